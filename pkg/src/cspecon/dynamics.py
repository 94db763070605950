"""One full time step of the economy, and the trajectory driver.

Step order: prices are solved for the preferences they will trade at, then
aggregates, rationed transactions, costs and wages, profits, the profit moving
average, removal and replacement of agents below the threshold, and finally
the behavioral preference update for the survivors. The alternative reading
that updates preferences before trading is available as a switch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .analytics import f_index
from .core import Economy, ModelParams, RngStream, gaps, init_economy, pref_scale
from .solver import SolverConfig, solve_prices

__all__ = [
    "Aggregates",
    "StepRecord",
    "SimResult",
    "compute_aggregates",
    "execute_transactions",
    "compute_wages",
    "compute_profits",
    "update_ema",
    "cull_and_replace",
    "update_preferences",
    "step",
    "simulate",
]

logger = logging.getLogger(__name__)

# conservation bounds checked every step when enabled
MONEY_TOL_PER_AGENT = 1e-8
CLEARING_TOL = 1e-9
PRICE_MEAN_TOL = 1e-9
PRICE_FLOOR_TOL = 1e-12


@dataclass
class Aggregates:
    """Per-good totals of one step.

    ``demand`` is stored signed (a sum of negative entries); ``zeta`` is
    supply over demand magnitude, NaN where there is no demand at all.
    ``tradeable`` marks goods with both sides present.
    """

    supply: np.ndarray
    demand: np.ndarray
    zeta: np.ndarray
    tradeable: np.ndarray


def compute_aggregates(xi: np.ndarray) -> Aggregates:
    """Split intended quantities into supply, demand, and the rationing ratio."""
    xi = np.asarray(xi, dtype=float)
    supply = np.maximum(xi, 0.0).sum(axis=0)
    demand = xi.sum(axis=0) - supply
    mag = -demand
    zeta = np.full(xi.shape[1], np.nan)
    has_buyers = mag > 0.0
    zeta[has_buyers] = supply[has_buyers] / mag[has_buyers]
    tradeable = has_buyers & (supply > 0.0)
    return Aggregates(supply=supply, demand=demand, zeta=zeta, tradeable=tradeable)


def execute_transactions(xi: np.ndarray, agg: Aggregates) -> np.ndarray:
    """Realized trades after rationing the long side of each market.

    Excess supply (zeta > 1) scales sellers down by 1/zeta; excess demand
    (zeta < 1) scales buyers down by zeta; a balanced market trades as
    intended. Goods missing a counterparty do not trade at all.
    """
    xi = np.asarray(xi, dtype=float)
    n = xi.shape[1]
    fs = np.zeros(n)
    fb = np.zeros(n)
    t = agg.tradeable
    zt = agg.zeta[t]
    fs[t] = np.where(zt > 1.0, 1.0 / zt, 1.0)
    fb[t] = np.where(zt < 1.0, zt, 1.0)
    pos = np.maximum(xi, 0.0)
    return pos * fs + (xi - pos) * fb


def compute_wages(xi: np.ndarray, costs: np.ndarray, n_agents: int) -> tuple[float, float]:
    """Total production cost on intended supply, and its uniform per-agent share."""
    supply = np.maximum(xi, 0.0).sum(axis=0)
    total = float(costs @ supply)
    return total, total / n_agents


def compute_profits(
    xi: np.ndarray,
    xi_bar: np.ndarray,
    p: np.ndarray,
    costs: np.ndarray,
    wage: float,
) -> np.ndarray:
    """Money exchanged per agent: sales minus purchases, minus production cost
    on what the agent meant to supply, plus the uniform wage."""
    production_cost = np.maximum(xi, 0.0) @ costs
    return xi_bar @ p - production_cost + wage


def update_ema(pi_ema_prev: np.ndarray, pi_bar: np.ndarray, omega: float) -> np.ndarray:
    """Elementwise moving average, weight omega on the fresh value."""
    if not 0.0 < omega <= 1.0:
        raise ValueError(f"omega must be in (0, 1], got {omega}")
    return omega * pi_bar + (1.0 - omega) * pi_ema_prev


def cull_and_replace(
    ledger, xi: np.ndarray, sigma: float, rng: RngStream, step: int
) -> np.ndarray:
    """Replace every agent whose smoothed profit is strictly below sigma.

    Replaced rows are redrawn i.i.d. normal at the same ``pref_scale`` as the
    initial population; the newcomer's moving average starts at the survivors'
    mean realized profit (zero if nobody survived). Completed lifetimes are
    logged with their death step. Returns the sorted indices of the replaced
    agents.
    """
    doomed = np.nonzero(ledger.pi_ema < sigma)[0]
    if doomed.size == 0:
        return doomed
    n_agents = ledger.pi_ema.size
    if doomed.size < n_agents:
        mask = np.ones(n_agents, dtype=bool)
        mask[doomed] = False
        newcomer_ema = float(ledger.pi_bar[mask].mean())
    else:
        newcomer_ema = 0.0
    for idx in doomed:
        ledger.lifetimes.append((int(step), int(step - ledger.birth_step[idx])))
    xi[doomed] = rng.replacement.standard_normal(
        (doomed.size, xi.shape[1])
    ) * pref_scale(xi.shape[1])
    ledger.pi_ema[doomed] = newcomer_ema
    ledger.birth_step[doomed] = step
    return doomed


def update_preferences(
    xi: np.ndarray,
    agg: Aggregates,
    p: np.ndarray,
    eps_d: float,
    eps_p: float,
    rng: RngStream,
    skip_rows: np.ndarray | None = None,
) -> np.ndarray:
    """Multiplicative behavioral update of intended quantities.

    Sellers shade toward the scarce side of their market (supply versus
    demand magnitude), buyers toward cheap goods (price versus 1). Every
    entry gets its own fresh u ~ U[0,1]; exact ties leave the entry alone,
    zeros stay zero, and eps < 1 guarantees signs never flip. Rows listed in
    ``skip_rows`` (agents born this step) keep their fresh draw.

    A full matrix of u is consumed from each noise stream regardless of which
    entries use it, so the stream schedule does not depend on the state.
    """
    if not 0.0 <= eps_d < 1.0 or not 0.0 <= eps_p < 1.0:
        raise ValueError("adjustment speeds must be in [0, 1)")
    m, n = xi.shape
    u_d = rng.demand_noise.random((m, n))
    u_p = rng.price_noise.random((m, n))
    pressure_d = np.sign(-agg.demand - agg.supply)  # +1 scarce, -1 glut, 0 tie
    pressure_p = np.sign(1.0 - np.asarray(p))       # +1 cheap, -1 dear, 0 at par
    factor = np.where(
        xi > 0.0,
        1.0 + eps_d * u_d * pressure_d,
        np.where(xi < 0.0, 1.0 + eps_p * u_p * pressure_p, 1.0),
    )
    if skip_rows is not None and len(skip_rows):
        factor[skip_rows] = 1.0
    return xi * factor


@dataclass
class StepRecord:
    """Observables of one completed step. Arrays are private copies."""

    step: int
    z: float
    z_ema: float
    removed: np.ndarray
    total_cost: float
    wage: float
    objective: float
    solver_iters: int
    solver_converged: bool
    prices: np.ndarray
    supply: np.ndarray
    demand: np.ndarray
    f_sellers: np.ndarray
    f_buyers: np.ndarray
    money_residual: float
    clearing_residual: float
    price_mean_err: float
    price_floor_err: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.z <= 1.0 or not 0.0 <= self.z_ema <= 1.0:
            raise ValueError("z and z_ema are fractions of agents")


def step(
    econ: Economy,
    params: ModelParams,
    solver_cfg: SolverConfig | None = None,
    *,
    update_before_trade: bool = False,
    check: bool = True,
) -> StepRecord:
    """Advance the economy by one step and return its record.

    With ``check`` on (the default), money conservation, per-good clearing,
    and price feasibility are verified every step and a violation raises.
    """
    t = econ.step_index
    m = params.n_agents

    p, rep = solve_prices(econ.xi, params.sigma, econ.p, params.x_m, solver_cfg)
    econ.p = p
    if not rep.converged:
        logger.warning(
            "solver hit max_iters at step %d (H=%.6g, grad=%.3g); using best iterate",
            t, rep.objective, rep.grad_mapping_norm,
        )

    h = gaps(econ.xi, p, params.sigma)
    z = np.count_nonzero(h < 0.0) / m

    agg = compute_aggregates(econ.xi)
    if update_before_trade:
        econ.xi = update_preferences(
            econ.xi, agg, p, params.eps_d, params.eps_p, econ.rng
        )
        agg = compute_aggregates(econ.xi)

    xi_bar = execute_transactions(econ.xi, agg)
    total_cost, wage = compute_wages(econ.xi, econ.costs, m)
    pi_bar = compute_profits(econ.xi, xi_bar, p, econ.costs, wage)
    econ.ledger.pi_bar = pi_bar
    econ.ledger.pi_ema = update_ema(econ.ledger.pi_ema, pi_bar, params.omega)

    doomed = np.nonzero(econ.ledger.pi_ema < params.sigma)[0]
    f_sellers, f_buyers = f_index(econ.xi, doomed)
    removed = cull_and_replace(econ.ledger, econ.xi, params.sigma, econ.rng, t)
    z_ema = removed.size / m

    if not update_before_trade:
        econ.xi = update_preferences(
            econ.xi, agg, p, params.eps_d, params.eps_p, econ.rng, skip_rows=removed
        )

    money_residual = float(pi_bar.sum())
    colsum = xi_bar.sum(axis=0)
    clearing_residual = float(
        (np.abs(colsum) / np.maximum(1.0, agg.supply)).max()
    )
    price_mean_err = abs(float(p.mean()) - 1.0)
    price_floor_err = max(0.0, params.x_m - float(p.min()))

    if check:
        if abs(money_residual) > MONEY_TOL_PER_AGENT * m:
            raise RuntimeError(
                f"money not conserved at step {t}: sum(pi_bar)={money_residual:.3e}"
            )
        if clearing_residual > CLEARING_TOL:
            raise RuntimeError(
                f"market failed to clear at step {t}: residual={clearing_residual:.3e}"
            )
        if price_mean_err > PRICE_MEAN_TOL or price_floor_err > PRICE_FLOOR_TOL:
            raise RuntimeError(f"infeasible prices at step {t}")

    econ.step_index = t + 1
    return StepRecord(
        step=t,
        z=z,
        z_ema=z_ema,
        removed=removed,
        total_cost=total_cost,
        wage=wage,
        objective=rep.objective,
        solver_iters=rep.iterations,
        solver_converged=rep.converged,
        prices=p.copy(),
        supply=agg.supply.copy(),
        demand=agg.demand.copy(),
        f_sellers=f_sellers,
        f_buyers=f_buyers,
        money_residual=money_residual,
        clearing_residual=clearing_residual,
        price_mean_err=price_mean_err,
        price_floor_err=price_floor_err,
    )


@dataclass
class SimResult:
    """A finished trajectory: per-step records plus final state."""

    params: ModelParams
    records: list[StepRecord]
    economy: Economy
    pi_ema_series: np.ndarray | None = None
    removal_sets: list[np.ndarray] = field(default_factory=list)

    def scalar_series(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def vector_series(self, name: str) -> np.ndarray:
        return np.stack([getattr(r, name) for r in self.records])

    @property
    def z(self) -> np.ndarray:
        return self.scalar_series("z")

    @property
    def z_ema(self) -> np.ndarray:
        return self.scalar_series("z_ema")

    @property
    def prices(self) -> np.ndarray:
        return self.vector_series("prices")

    @property
    def demand(self) -> np.ndarray:
        return self.vector_series("demand")

    @property
    def supply(self) -> np.ndarray:
        return self.vector_series("supply")

    @property
    def f_sellers(self) -> np.ndarray:
        return self.vector_series("f_sellers")

    @property
    def f_buyers(self) -> np.ndarray:
        return self.vector_series("f_buyers")

    def max_residuals(self) -> dict[str, float]:
        if not self.records:
            return dict.fromkeys(
                ("money_residual", "clearing_residual", "price_mean_err", "price_floor_err"),
                0.0,
            )
        return {
            name: max(abs(getattr(r, name)) for r in self.records)
            for name in ("money_residual", "clearing_residual", "price_mean_err", "price_floor_err")
        }


def simulate(
    params: ModelParams,
    solver_cfg: SolverConfig | None = None,
    *,
    update_before_trade: bool = False,
    record_pi_ema: bool = False,
    check: bool = True,
) -> SimResult:
    """Run ``params.n_steps`` steps from a fresh seeded economy."""
    econ = init_economy(params)
    records: list[StepRecord] = []
    removal_sets: list[np.ndarray] = []
    ema_series = (
        np.empty((params.n_steps, params.n_agents)) if record_pi_ema else None
    )
    for t in range(params.n_steps):
        rec = step(
            econ,
            params,
            solver_cfg,
            update_before_trade=update_before_trade,
            check=check,
        )
        records.append(rec)
        removal_sets.append(rec.removed)
        if ema_series is not None:
            ema_series[t] = econ.ledger.pi_ema
    return SimResult(
        params=params,
        records=records,
        economy=econ,
        pi_ema_series=ema_series,
        removal_sets=removal_sets,
    )
