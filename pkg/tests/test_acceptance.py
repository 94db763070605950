"""End-to-end checks of the documented claims at reference parameters.

Every check runs the real simulator at the published defaults (100 goods,
1000 agents, five seeds per claim), so the whole module takes about an
hour on one core; deselect it with ``-m "not acceptance"`` for everyday
work. Each test emits one ``[PASS]``/``[FAIL]`` line with its measured
numbers. Verdict and setup lines are written to the real stderr so progress
is visible while the long fixtures build.

The price/demand anticorrelation check is expected to fail its sigma=0.2
sub-condition: the price solver discounts heavily demanded goods in every
regime, including the unstable one, so the pooled correlation there sits
near -0.55 rather than within (-0.1, 0.1). The README discusses why.
"""
from __future__ import annotations

import csv
import io
import subprocess
import sys
from types import SimpleNamespace

import numpy as np
import pytest

from cspecon import (
    ModelParams,
    bimodality_check,
    classify_regime,
    dominant_period,
    hamiltonian,
    lagged_correlation,
    lifetimes_summary,
    price_demand_correlation,
    project_prices,
    removal_impact,
    simulate,
    solve_prices,
    spike_stats,
    warmup_steps,
)
from cspecon.harness import RunConfig, SweepConfig, sweep_to_artifacts

from oracles import brute_force_min_h, fd_gradient

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2, 3, 4)
STEPS_SHORT = 2000
STEPS_CRISIS = 5000  # several full cycles at the crisis point

_CAPTURE_MANAGER = None


@pytest.fixture(scope="session", autouse=True)
def _verdicts_reach_the_terminal(request):
    global _CAPTURE_MANAGER
    _CAPTURE_MANAGER = request.config.pluginmanager.getplugin("capturemanager")
    yield
    _CAPTURE_MANAGER = None


def _say(line: str) -> None:
    # verdict and setup lines are the point of the suite; lift capture so
    # they stream while the multi-minute fixtures build instead of being
    # buried in per-test buffers shown only on failure
    if _CAPTURE_MANAGER is not None:
        with _CAPTURE_MANAGER.global_and_fixture_disabled():
            print(line, file=sys.stderr, flush=True)
    else:
        print(line, file=sys.stderr, flush=True)


def _verdict(num: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:02d}: {detail}"
    _say(line)
    assert ok, line


def _fmt(values, pattern="{:+.3f}") -> str:
    return "[" + ", ".join(pattern.format(v) for v in values) + "]"


def _run_cell(sigma: float, steps: int, seed: int, with_impact: bool = False):
    params = ModelParams(sigma=sigma, n_steps=steps, seed=seed)
    res = simulate(params, record_pi_ema=with_impact)
    w = warmup_steps(params.omega)
    cell = SimpleNamespace(
        seed=seed,
        warmup=w,
        n_agents=params.n_agents,
        z=res.z,
        z_ema=res.z_ema,
        prices=res.prices,
        demand=res.demand,
        f_sellers=res.f_sellers,
        f_buyers=res.f_buyers,
        lifetimes=list(res.economy.ledger.lifetimes),
        residuals=res.max_residuals(),
        impact=None,
    )
    if with_impact:
        # summarize while the smoothed-profit series is alive, then drop it:
        # keeping five (5000, 1000) arrays would cost 200 MB for one number
        cell.impact = removal_impact(
            res.pi_ema_series, res.removal_sets, res.z_ema, tau=1, warmup=w
        )
    return cell


def _build_cells(label: str, sigma: float, steps: int, with_impact: bool = False):
    cells = []
    for k, seed in enumerate(SEEDS):
        _say(f"[setup] {label}: seed {k + 1}/{len(SEEDS)} (sigma={sigma}, {steps} steps)")
        cells.append(_run_cell(sigma, steps, seed, with_impact))
    return cells


@pytest.fixture(scope="session")
def runs_u():
    return _build_cells("unstable cell", 0.2, STEPS_SHORT)


@pytest.fixture(scope="session")
def runs_s():
    return _build_cells("stable cell", -0.75, STEPS_SHORT)


@pytest.fixture(scope="session")
def runs_ec():
    return _build_cells("crisis cell", -1.6, STEPS_CRISIS, with_impact=True)


@pytest.fixture(scope="session")
def sweep_table(tmp_path_factory):
    values = tuple(round(-2.0 + 0.25 * k, 2) for k in range(11))  # -2.0 .. 0.5
    cfg = SweepConfig(
        base=RunConfig(n_steps=STEPS_SHORT),
        variable="sigma",
        values=values,
        replicates=len(SEEDS),
        master_seed=20260817,
    )
    out = tmp_path_factory.mktemp("sweep")
    _say(f"[setup] sweep: {len(values)} values x {cfg.replicates} replicates, {STEPS_SHORT} steps each")
    path = sweep_to_artifacts(cfg, str(out), threads=1)
    with open(path) as fh:
        text = fh.read()
    body = text.split("\n", 1)[1]  # drop the version line
    return list(csv.DictReader(io.StringIO(body)))


def test_criterion_01_unstable_regime_churn(runs_u):
    means = [float(c.z_ema[c.warmup :].mean()) for c in runs_u]
    lives = [lifetimes_summary(c.lifetimes, warmup=c.warmup).mean for c in runs_u]
    ok = all(0.20 <= m <= 0.40 for m in means) and all(lv <= 5.0 for lv in lives)
    _verdict(
        1,
        ok,
        f"sigma=0.2 time-mean z_ema {_fmt(means)} in [0.20, 0.40], "
        f"mean lifetimes {_fmt(lives, '{:.2f}')} <= 5",
    )


def test_criterion_02_stable_regime_and_demand_bimodality(runs_s):
    means = [float(c.z_ema[c.warmup :].mean()) for c in runs_s]
    regimes = [classify_regime(c.z_ema[c.warmup :]) for c in runs_s]
    modes = [
        bimodality_check(np.abs(c.demand[c.warmup :]).ravel()).n_modes for c in runs_s
    ]
    ok = (
        all(0.01 <= m <= 0.05 for m in means)
        and all(r == "S" for r in regimes)
        and all(n == 2 for n in modes)
    )
    _verdict(
        2,
        ok,
        f"sigma=-0.75 time-mean z_ema {_fmt(means)} in [0.01, 0.05], "
        f"regimes {regimes}, demand modes {modes}",
    )


def test_criterion_03_crisis_regime_spikes(runs_ec):
    regimes, peaks, baselines, periods = [], [], [], []
    for c in runs_ec:
        zw = c.z_ema[c.warmup :]
        st = spike_stats(zw, threshold=0.05)
        regimes.append(classify_regime(zw))
        peaks.append(float(st.peak_values.max()) if st.n_episodes else 0.0)
        baselines.append(st.baseline_median)
        periods.append(dominant_period(zw))
    # "order 10^2 to 10^3" as the half-decade band around those magnitudes
    lo, hi = 10**1.5, 10**3.5
    ok = (
        all(r == "EC" for r in regimes)
        and all(p >= 0.05 for p in peaks)
        and all(b <= 0.02 for b in baselines)
        and all(lo <= t < hi for t in periods)
    )
    _verdict(
        3,
        ok,
        f"sigma=-1.6 regimes {regimes}, spike peaks {_fmt(peaks, '{:.3f}')} >= 0.05, "
        f"baselines {_fmt(baselines, '{:.4f}')} <= 0.02, "
        f"cycle lengths {_fmt(periods, '{:.0f}')} in [{lo:.0f}, {hi:.0f})",
    )


def test_criterion_04_sweep_shape(sweep_table):
    bad = [r for r in sweep_table if r["regime"] == "ERROR"]
    by_sigma: dict[float, list[dict]] = {}
    for r in sweep_table:
        by_sigma.setdefault(float(r["sigma"]), []).append(r)
    sigmas = sorted(by_sigma)
    mz = [np.mean([float(r["mean_z"]) for r in by_sigma[s]]) for s in sigmas]
    mze = [np.mean([float(r["mean_zema"]) for r in by_sigma[s]]) for s in sigmas]
    mxz = [np.mean([float(r["max_zema"]) for r in by_sigma[s]]) for s in sigmas]
    argmin_sigma = sigmas[int(np.argmin(mxz))]
    ok = (
        not bad
        and len(sigmas) == 11
        and all(np.diff(mz) > 0)
        and all(np.diff(mze) > 0)
        and -1.0 <= argmin_sigma <= -0.5
    )
    _verdict(
        4,
        ok,
        f"grid {sigmas}: mean z {_fmt(mz, '{:.4f}')} and z_ema {_fmt(mze, '{:.4f}')} "
        f"rise with sigma, max z_ema {_fmt(mxz, '{:.3f}')} dips at "
        f"sigma={argmin_sigma} (want [-1.0, -0.5]), error rows={len(bad)}",
    )


def test_criterion_05_price_demand_anticorrelation(runs_u, runs_s, runs_ec):
    def pooled(cells):
        return [
            price_demand_correlation(c.prices[c.warmup :], c.demand[c.warmup :]).pooled
            for c in cells
        ]

    u, s, ec = pooled(runs_u), pooled(runs_s), pooled(runs_ec)
    u_mean, s_mean, ec_mean = (float(np.mean(v)) for v in (u, s, ec))
    ok = s_mean < -0.2 and ec_mean < -0.2 and abs(u_mean) < 0.1
    _verdict(
        5,
        ok,
        f"pooled corr(p, |D|): sigma=-0.75 {s_mean:+.3f} < -0.2, "
        f"sigma=-1.6 {ec_mean:+.3f} < -0.2, sigma=0.2 {u_mean:+.3f} wanted in "
        f"(-0.1, 0.1); per-seed U {_fmt(u)}",
    )


def test_criterion_06_failure_price_response(runs_s):
    taus = range(0, 21)
    buyer_curves, seller_curves = [], []
    for c in runs_s:
        pw = c.prices[c.warmup :]
        dp = pw[1:] - pw[:-1]
        # dp[j] is the move leaving step j; pair it with failures tau steps later
        fb = c.f_buyers[c.warmup :][:-1]
        fs = c.f_sellers[c.warmup :][:-1]
        buyer_curves.append(lagged_correlation(dp, fb, taus).normalized)
        seller_curves.append(lagged_correlation(dp, fs, taus).normalized)
    buyers = np.mean(buyer_curves, axis=0)
    sellers = np.mean(seller_curves, axis=0)
    bt, st = int(np.argmax(buyers)), int(np.argmin(sellers))
    ok = bt == 1 and buyers[1] > 0 and st == 1 and sellers[1] < 0
    _verdict(
        6,
        ok,
        f"sigma=-0.75 buyers curve max at tau={bt} ({buyers[bt]:+.4f}, want tau=1 > 0), "
        f"sellers curve min at tau={st} ({sellers[st]:+.4f}, want tau=1 < 0)",
    )


def test_criterion_07_removal_impact_on_survivors(runs_ec):
    fracs = []
    for c in runs_ec:
        occupied = c.impact.bin_counts > 0
        assert occupied.any()
        fracs.append(float((c.impact.bin_means[occupied] < 0).mean()))
    ok = all(f >= 0.9 for f in fracs)
    _verdict(
        7,
        ok,
        f"sigma=-1.6 fraction of occupied z_ema bins with negative mean "
        f"survivor profit change {_fmt(fracs, '{:.2f}')} >= 0.9",
    )


def test_criterion_08_conservation_suite(runs_u, runs_s, runs_ec):
    cells = runs_u + runs_s + runs_ec
    money = max(c.residuals["money_residual"] for c in cells)
    clearing = max(c.residuals["clearing_residual"] for c in cells)
    mean_err = max(c.residuals["price_mean_err"] for c in cells)
    floor_err = max(c.residuals["price_floor_err"] for c in cells)
    m = cells[0].n_agents
    # the same bounds are enforced live at every step of every run
    # (simulate(check=True)); these are the recorded worst cases
    ok = (
        money <= 1e-8 * m
        and clearing <= 1e-9
        and mean_err <= 1e-9
        and floor_err <= 1e-12
    )
    _verdict(
        8,
        ok,
        f"worst residuals over {len(cells)} runs x {STEPS_SHORT}-{STEPS_CRISIS} steps: "
        f"money {money:.2e} <= {1e-8 * m:.0e}, clearing {clearing:.2e} <= 1e-09, "
        f"price mean {mean_err:.2e} <= 1e-09, floor {floor_err:.2e} <= 1e-12",
    )


def test_criterion_09_solver_oracles():
    rng = np.random.default_rng(1234)

    def feasible(n, x_m):
        return project_prices(rng.uniform(0.0, 2.0, n), x_m)

    worst_bf = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 5))
        m = int(rng.integers(1, 7))
        xi = rng.standard_normal((m, n))
        sigma = float(rng.uniform(-1.0, 1.0))
        x_m = float(rng.choice([0.0, 0.01, 0.2]))
        _, rep = solve_prices(xi, sigma, feasible(n, x_m), x_m)
        _, ref = brute_force_min_h(xi, sigma, x_m)
        worst_bf = max(worst_bf, abs(rep.objective - ref))

    from cspecon.solver import _grad

    worst_fd = 0.0
    checked = 0
    while checked < 100:
        m, n = int(rng.integers(1, 7)), int(rng.integers(2, 5))
        xi = rng.standard_normal((m, n))
        sigma = float(rng.uniform(-1.0, 1.0))
        p = feasible(n, 0.0)
        if np.abs(xi @ p - sigma).min() < 1e-4:
            continue  # keep the finite-difference stencil inside one smooth piece
        g, _ = _grad(xi, p, sigma)
        fd = fd_gradient(xi, p, sigma)
        rel = float(np.linalg.norm(g - fd)) / max(float(np.linalg.norm(fd)), 1e-12)
        worst_fd = max(worst_fd, rel)
        checked += 1

    xi1 = np.array([[1.0, -1.0]])
    p1, rep1 = solve_prices(xi1, -2.0, np.array([1.0, 1.0]), 0.0)
    ex1 = max(float(np.abs(p1 - 1.0).max()), rep1.objective)
    p2, rep2 = solve_prices(xi1, 0.5, np.array([1.0, 1.0]), 0.0)
    ex2 = max(float(np.abs(p2 - [1.25, 0.75]).max()), rep2.objective)
    xi3 = np.array([[1.0, -1.0], [-1.0, 1.0]])
    p3, rep3 = solve_prices(xi3, 0.5, np.array([1.5, 0.5]), 0.0)
    ex3 = max(float(np.abs(p3 - 1.0).max()), abs(rep3.objective - 0.25))
    worst_ex = max(ex1, ex2, ex3)

    ok = worst_bf <= 1e-4 and worst_fd <= 1e-5 and worst_ex <= 1e-6
    _verdict(
        9,
        ok,
        f"200 brute-force instances worst |dH| {worst_bf:.2e} <= 1e-04, "
        f"100 finite-difference points worst rel err {worst_fd:.2e} <= 1e-05, "
        f"3 analytic examples worst err {worst_ex:.2e} <= 1e-06",
    )


def _cli(args: list[str], cwd: str) -> subprocess.CompletedProcess:
    proc = subprocess.run(
        [sys.executable, "-m", "cspecon.cli", *args],
        capture_output=True,
        text=True,
        cwd=cwd,
    )
    assert proc.returncode == 0, proc.stderr
    return proc


def test_criterion_10_determinism(tmp_path):
    run_cfg = tmp_path / "cell.cfg"
    run_cfg.write_text("sigma = -0.75\nn_steps = 300\nseed = 3\n")
    _cli(["run", str(run_cfg), "--out", str(tmp_path / "a")], str(tmp_path))
    _cli(["run", str(run_cfg), "--out", str(tmp_path / "b")], str(tmp_path))
    first = (tmp_path / "a" / "timeseries.csv").read_bytes()
    second = (tmp_path / "b" / "timeseries.csv").read_bytes()

    sweep_cfg = tmp_path / "grid.cfg"
    sweep_cfg.write_text(
        "n_steps = 200\n"
        "sweep_values = -0.75, -0.25, 0.25\n"
        "sweep_replicates = 2\n"
        "sweep_master_seed = 99\n"
    )
    _cli(["sweep", str(sweep_cfg), "--out", str(tmp_path / "s1"), "--threads", "1"], str(tmp_path))
    _cli(["sweep", str(sweep_cfg), "--out", str(tmp_path / "s8"), "--threads", "8"], str(tmp_path))
    serial = (tmp_path / "s1" / "sweep.csv").read_bytes()
    parallel = (tmp_path / "s8" / "sweep.csv").read_bytes()

    ok = first == second and serial == parallel
    _verdict(
        10,
        ok,
        f"rerun timeseries.csv identical={first == second} ({len(first)} bytes), "
        f"sweep.csv identical at 1 vs 8 threads={serial == parallel} "
        f"({len(serial)} bytes)",
    )
