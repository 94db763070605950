"""Run and sweep orchestration: flat-text configs, plot-ready CSV artifacts,
and per-cell seed derivation for parallel sweeps.

Every artifact is written atomically (temp file, then rename) and every float
is printed with 17 significant digits, so identical configurations produce
byte-identical files no matter how many workers ran the cells.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace

import numpy as np

from .analytics import (
    RunSummary,
    bimodality_check,
    build_run_summary,
    lagged_correlation,
    warmup_steps,
)
from .core import ModelParams
from .dynamics import SimResult, simulate
from .solver import SolverConfig

__all__ = [
    "RunConfig",
    "SweepConfig",
    "parse_config_text",
    "run_config_from_text",
    "sweep_config_from_text",
    "format_number",
    "splitmix64",
    "cell_seed",
    "run_to_artifacts",
    "sweep_to_artifacts",
    "analyze_directory",
    "CSV_VERSION_LINE",
]

CSV_VERSION_LINE = "# csp-econ v1"

TIMESERIES_HEADER = "step,z,z_ema,removals,W,w,H,solver_iters"
GOODS_HEADER = "step,good,price,supply,demand,f_sellers,f_buyers"
SWEEP_HEADER = "sigma,replicate,mean_z,mean_zema,max_zema,min_zema,mean_lifetime,regime"
HIST_HEADER = "bin_left,bin_right,count"
FCORR_HEADER = "tau,buyers,sellers"

FCORR_MAX_TAU = 20
HIST_BINS = 100


def format_number(x) -> str:
    """Canonical text for one value: 17 significant digits for floats, so
    parsing the output reproduces the exact double."""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    return str(x)


# -- configuration ----------------------------------------------------------

_INT_FIELDS = {"n_goods", "n_agents", "n_steps", "seed", "warmup", "solver_max_iters"}
_FLOAT_FIELDS = {
    "sigma", "eps_d", "eps_p", "gamma", "omega", "x_m",
    "solver_grad_tol", "solver_obj_tol", "solver_ls_init",
}
_BOOL_FIELDS = {"update_before_trade", "emit_full_series"}

_TRUE = {"true", "1", "yes"}
_FALSE = {"false", "0", "no"}


@dataclass(frozen=True)
class RunConfig:
    """One simulation cell: model parameters plus artifact switches.

    ``warmup`` of None resolves to the analytics rule max(100, 5/omega);
    solver overrides of None resolve to the solver defaults. ``config.echo``
    always writes the resolved values.
    """

    n_goods: int = 100
    n_agents: int = 1000
    sigma: float = 0.2
    eps_d: float = 0.05
    eps_p: float = 0.05
    gamma: float = 1.0
    omega: float = 0.2
    x_m: float = 0.01
    n_steps: int = 2000
    seed: int = 0
    warmup: int | None = None
    update_before_trade: bool = False
    emit_full_series: bool = False
    solver_max_iters: int | None = None
    solver_grad_tol: float | None = None
    solver_obj_tol: float | None = None
    solver_ls_init: float | None = None

    def model_params(self) -> ModelParams:
        return ModelParams(
            n_goods=self.n_goods,
            n_agents=self.n_agents,
            sigma=self.sigma,
            eps_d=self.eps_d,
            eps_p=self.eps_p,
            gamma=self.gamma,
            omega=self.omega,
            x_m=self.x_m,
            n_steps=self.n_steps,
            seed=self.seed,
        )

    def solver_config(self) -> SolverConfig:
        base = SolverConfig()
        return SolverConfig(
            max_iters=base.max_iters if self.solver_max_iters is None else self.solver_max_iters,
            grad_tol=base.resolve_grad_tol(self.n_goods)
            if self.solver_grad_tol is None
            else self.solver_grad_tol,
            obj_tol=base.obj_tol if self.solver_obj_tol is None else self.solver_obj_tol,
            ls_init=base.ls_init if self.solver_ls_init is None else self.solver_ls_init,
        )

    def resolved_warmup(self) -> int:
        return warmup_steps(self.omega) if self.warmup is None else self.warmup

    def validate(self) -> None:
        self.model_params()
        self.solver_config()
        if self.warmup is not None and self.warmup < 0:
            raise ValueError(f"warmup must be >= 0, got {self.warmup}")

    def resolved(self) -> "RunConfig":
        """Every optional field pinned to the value the run will use."""
        solver = self.solver_config()
        return replace(
            self,
            warmup=self.resolved_warmup(),
            solver_max_iters=solver.max_iters,
            solver_grad_tol=solver.grad_tol,
            solver_obj_tol=solver.obj_tol,
            solver_ls_init=solver.ls_init,
        )

    def echo_text(self) -> str:
        r = self.resolved()
        lines = [
            f"{f.name} = {format_number(getattr(r, f.name))}"
            for f in sorted(fields(r), key=lambda f: f.name)
        ]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SweepConfig:
    """A grid of runs: one swept model field, several replicates per value."""

    base: RunConfig
    variable: str = "sigma"
    values: tuple[float, ...] = ()
    replicates: int = 1
    master_seed: int = 0

    def validate(self) -> None:
        if not self.values:
            raise ValueError("sweep needs a non-empty value grid")
        if self.replicates < 1:
            raise ValueError("sweep needs at least one replicate per value")
        if self.master_seed < 0:
            raise ValueError("master seed must be non-negative")
        if self.variable not in {
            "sigma", "eps_d", "eps_p", "gamma", "omega", "x_m",
            "n_goods", "n_agents", "n_steps",
        }:
            raise ValueError(f"cannot sweep over {self.variable!r}")
        for vi, value in enumerate(self.values):
            self.cell_config(vi, 0).validate()

    def cell_config(self, value_index: int, replicate: int) -> RunConfig:
        value = self.values[value_index]
        if self.variable in _INT_FIELDS:
            value = int(value)
        return replace(
            self.base,
            **{self.variable: value},
            seed=cell_seed(self.master_seed, value_index, replicate),
        )


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; blanks ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, value: str):
    try:
        if key in _INT_FIELDS:
            return int(value)
        if key in _FLOAT_FIELDS:
            return float(value)
        if key in _BOOL_FIELDS:
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {value!r}")
        raise KeyError(key)
    except ValueError as exc:
        raise ValueError(f"bad value for {key}: {exc}") from exc


def run_config_from_mapping(mapping: dict[str, str]) -> RunConfig:
    kwargs = {}
    for key, value in mapping.items():
        if key not in _INT_FIELDS | _FLOAT_FIELDS | _BOOL_FIELDS:
            raise ValueError(f"unknown configuration key: {key!r}")
        kwargs[key] = _coerce(key, value)
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def run_config_from_text(text: str) -> RunConfig:
    return run_config_from_mapping(parse_config_text(text))


_SWEEP_KEYS = {"sweep_variable", "sweep_values", "sweep_replicates", "sweep_master_seed"}


def sweep_config_from_text(text: str) -> SweepConfig:
    mapping = parse_config_text(text)
    variable = mapping.pop("sweep_variable", "sigma")
    values_text = mapping.pop("sweep_values", "")
    replicates = int(mapping.pop("sweep_replicates", "1"))
    master_seed = int(mapping.pop("sweep_master_seed", "0"))
    values = tuple(float(v) for v in values_text.split(",") if v.strip())
    base = run_config_from_mapping(mapping)
    cfg = SweepConfig(
        base=base,
        variable=variable,
        values=values,
        replicates=replicates,
        master_seed=master_seed,
    )
    cfg.validate()
    return cfg


# -- seeding ----------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One step of the splitmix64 mixer; a bijection on 64-bit words."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


# distinct odd multipliers keep the value and replicate axes independent
_VALUE_SALT = 0xD1342543DE82EF95
_REPLICATE_SALT = 0xAF251AF3B0F025B5


def cell_seed(master_seed: int, value_index: int, replicate: int) -> int:
    """Derived seed for one sweep cell, stable across execution order."""
    s = splitmix64((master_seed ^ (_VALUE_SALT * (value_index + 1))) & _MASK64)
    return splitmix64((s ^ (_REPLICATE_SALT * (replicate + 1))) & _MASK64)


# -- artifact writing -------------------------------------------------------


def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header: str, rows) -> str:
    lines = [CSV_VERSION_LINE, header]
    lines.extend(rows)
    return "\n".join(lines) + "\n"


def _json_text(obj, indent: int = 0) -> str:
    """Minimal JSON with canonical float formatting (non-finite -> null)."""
    pad = "  " * indent
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return "null"
        return "%.17g" % x
    if isinstance(obj, str):
        escaped = (
            obj.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
        )
        return f'"{escaped}"'
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        inner = ",\n".join(
            f'{pad}  "{k}": {_json_text(v, indent + 1)}' for k, v in obj.items()
        )
        return "{\n" + inner + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        inner = ", ".join(_json_text(v, indent + 1) for v in seq)
        return "[" + inner + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _timeseries_rows(result: SimResult):
    for rec in result.records:
        yield ",".join(
            (
                str(rec.step),
                format_number(rec.z),
                format_number(rec.z_ema),
                str(rec.removed.size),
                format_number(rec.total_cost),
                format_number(rec.wage),
                format_number(rec.objective),
                str(rec.solver_iters),
            )
        )


def _goods_rows(result: SimResult):
    for rec in result.records:
        for i in range(rec.prices.size):
            yield ",".join(
                (
                    str(rec.step),
                    str(i),
                    format_number(rec.prices[i]),
                    format_number(rec.supply[i]),
                    format_number(rec.demand[i]),
                    format_number(rec.f_sellers[i]),
                    format_number(rec.f_buyers[i]),
                )
            )


def run_to_artifacts(cfg: RunConfig, out_dir: str) -> RunSummary | None:
    """Execute one configuration and persist its artifacts.

    Writes ``config.echo``, ``timeseries.csv``, ``goods.csv`` (only with
    ``emit_full_series``), and ``summary.json``. A zero-step run writes the
    echo and headered-but-empty CSVs and no summary.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    if not os.path.isdir(out_dir) or not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory not writable: {out_dir}")
    _atomic_write(os.path.join(out_dir, "config.echo"), cfg.echo_text())

    if cfg.n_steps == 0:
        _atomic_write(
            os.path.join(out_dir, "timeseries.csv"), _csv_text(TIMESERIES_HEADER, [])
        )
        if cfg.emit_full_series:
            _atomic_write(
                os.path.join(out_dir, "goods.csv"), _csv_text(GOODS_HEADER, [])
            )
        return None

    result = simulate(
        cfg.model_params(),
        cfg.solver_config(),
        update_before_trade=cfg.update_before_trade,
    )
    _atomic_write(
        os.path.join(out_dir, "timeseries.csv"),
        _csv_text(TIMESERIES_HEADER, _timeseries_rows(result)),
    )
    if cfg.emit_full_series:
        _atomic_write(
            os.path.join(out_dir, "goods.csv"),
            _csv_text(GOODS_HEADER, _goods_rows(result)),
        )
    summary = build_run_summary(
        result.z,
        result.z_ema,
        result.economy.ledger.lifetimes,
        cfg.omega,
        cfg.n_agents,
        solver_converged=result.scalar_series("solver_converged"),
        warmup=cfg.resolved_warmup(),
    )
    _atomic_write(
        os.path.join(out_dir, "summary.json"), _json_text(summary.to_dict()) + "\n"
    )
    return summary


def _sweep_row(value: float, replicate: int, summary: RunSummary | None) -> str:
    if summary is None:
        stats = ["nan"] * 5
        regime = "ERROR"
    else:
        stats = [
            format_number(summary.mean_z),
            format_number(summary.mean_zema),
            format_number(summary.max_zema),
            format_number(summary.min_zema),
            "nan" if summary.mean_lifetime is None else format_number(summary.mean_lifetime),
        ]
        regime = summary.regime
    return ",".join([format_number(value), str(replicate), *stats, regime])


def _cell_dir(out_dir: str, value_index: int, replicate: int) -> str:
    return os.path.join(out_dir, f"cell_v{value_index:03d}_r{replicate:03d}")


def _run_sweep_cell(payload) -> tuple[int, int, str]:
    """Worker: one cell, exceptions folded into an error row."""
    sweep_cfg, vi, ri, out_dir = payload
    value = sweep_cfg.values[vi]
    try:
        cfg = sweep_cfg.cell_config(vi, ri)
        summary = run_to_artifacts(cfg, _cell_dir(out_dir, vi, ri))
    except Exception:
        summary = None
    return vi, ri, _sweep_row(value, ri, summary)


def sweep_to_artifacts(
    sweep_cfg: SweepConfig, out_dir: str, threads: int = 1
) -> str:
    """Run every (value, replicate) cell and write ``sweep.csv``.

    Row order and content depend only on the configuration, never on the
    execution schedule; failed cells produce an ERROR row and the sweep
    continues.
    """
    sweep_cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    jobs = [
        (sweep_cfg, vi, ri, out_dir)
        for vi in range(len(sweep_cfg.values))
        for ri in range(sweep_cfg.replicates)
    ]
    rows: dict[tuple[int, int], str] = {}
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for vi, ri, row in pool.map(_run_sweep_cell, jobs):
                rows[(vi, ri)] = row
    else:
        for job in jobs:
            vi, ri, row = _run_sweep_cell(job)
            rows[(vi, ri)] = row
    ordered = [rows[key] for key in sorted(rows)]
    path = os.path.join(out_dir, "sweep.csv")
    _atomic_write(path, _csv_text(SWEEP_HEADER, ordered))
    return path


# -- analysis of persisted runs ---------------------------------------------


def _read_csv(path: str, expected_header: str) -> list[list[str]]:
    with open(path) as fh:
        version = fh.readline().rstrip("\n")
        if version != CSV_VERSION_LINE:
            raise ValueError(f"{path}: unknown format marker {version!r}")
        header = fh.readline().rstrip("\n")
        if header != expected_header:
            raise ValueError(f"{path}: expected header {expected_header!r}, got {header!r}")
        return [line.rstrip("\n").split(",") for line in fh if line.strip()]


def _hist_rows(samples: np.ndarray):
    counts, edges = np.histogram(samples, bins=HIST_BINS)
    for i in range(counts.size):
        yield ",".join(
            (format_number(edges[i]), format_number(edges[i + 1]), str(int(counts[i])))
        )


def analyze_directory(run_dir: str) -> dict:
    """Post-process one run directory into plot-ready files.

    Reads ``config.echo`` and the CSVs, recomputes the summary over the
    measurement window, and writes ``hist_demand.csv``, ``hist_price.csv``,
    ``hist_supply.csv``, ``fcorr.csv`` (all only when the per-good series
    exists), plus ``analysis.json``. Never modifies the run's own artifacts,
    and produces identical bytes when run twice.
    """
    echo_path = os.path.join(run_dir, "config.echo")
    with open(echo_path) as fh:
        cfg = run_config_from_mapping(parse_config_text(fh.read()))

    ts = _read_csv(os.path.join(run_dir, "timeseries.csv"), TIMESERIES_HEADER)
    z = np.array([float(r[1]) for r in ts])
    z_ema = np.array([float(r[2]) for r in ts])
    converged = np.array([int(r[7]) < cfg.solver_config().max_iters for r in ts])

    goods_path = os.path.join(run_dir, "goods.csv")
    prices = demand = supply = fbuy = fsell = None
    if os.path.exists(goods_path):
        rows = _read_csv(goods_path, GOODS_HEADER)
        if rows:
            data = np.array([[float(v) for v in r] for r in rows])
            n = int(data[:, 1].max()) + 1
            t_len = data.shape[0] // n
            prices = data[:, 2].reshape(t_len, n)
            supply = data[:, 3].reshape(t_len, n)
            demand = data[:, 4].reshape(t_len, n)
            fsell = data[:, 5].reshape(t_len, n)
            fbuy = data[:, 6].reshape(t_len, n)

    warmup = cfg.resolved_warmup()
    summary = build_run_summary(
        z,
        z_ema,
        [],
        cfg.omega,
        cfg.n_agents,
        solver_converged=converged,
        prices=prices,
        demand=demand,
        supply=supply,
        warmup=warmup,
    )
    report = summary.to_dict()
    # lifetimes live only in the in-memory ledger; a persisted run has none
    report["mean_lifetime"] = None
    report["n_lifetimes"] = None
    report["histograms_available"] = prices is not None

    if prices is not None:
        pw, dw, sw = prices[warmup:], np.abs(demand[warmup:]), supply[warmup:]
        for name, samples in (
            ("hist_price.csv", pw),
            ("hist_demand.csv", dw),
            ("hist_supply.csv", sw),
        ):
            body = _hist_rows(samples.ravel()) if samples.size else []
            _atomic_write(os.path.join(run_dir, name), _csv_text(HIST_HEADER, body))

        fcorr_rows = []
        if pw.shape[0] >= FCORR_MAX_TAU + 4:
            # dp[j] is the move leaving step j; pairing it with f[j + tau]
            # asks how failures tau steps later relate to today's move
            dp = pw[1:] - pw[:-1]
            taus = range(0, FCORR_MAX_TAU + 1)
            buyers = lagged_correlation(dp, fbuy[warmup:][:-1], taus)
            sellers = lagged_correlation(dp, fsell[warmup:][:-1], taus)
            fcorr_rows = [
                ",".join(
                    (
                        str(tau),
                        format_number(buyers.normalized[j]),
                        format_number(sellers.normalized[j]),
                    )
                )
                for j, tau in enumerate(taus)
            ]
            report["fcorr_buyers_peak_tau"] = int(
                buyers.taus[int(np.argmax(buyers.normalized))]
            )
            report["fcorr_sellers_min_tau"] = int(
                sellers.taus[int(np.argmin(sellers.normalized))]
            )
        _atomic_write(os.path.join(run_dir, "fcorr.csv"), _csv_text(FCORR_HEADER, fcorr_rows))

    _atomic_write(os.path.join(run_dir, "analysis.json"), _json_text(report) + "\n")
    return report
