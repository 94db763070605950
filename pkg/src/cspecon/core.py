"""Economy state, parameters, deterministic random source, and elementary quantities.

Conventions used throughout the package:

* ``xi`` is the M x N preference matrix; entry ``xi[mu, i]`` is agent mu's intended
  quantity of good i, positive for selling and negative for buying.
* ``p`` is the length-N price vector, feasible when its mean is 1 and every entry
  is at least ``x_m``.
* The gap of agent mu is ``h_mu = xi[mu] . p - sigma``; a negative gap means the
  agent's budget constraint is violated at those prices.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import math

import numpy as np

__all__ = [
    "ModelParams",
    "AgentLedger",
    "RngStream",
    "Economy",
    "init_economy",
    "gap",
    "gaps",
    "hamiltonian",
]


@dataclass(frozen=True)
class ModelParams:
    """Scalar knobs of one simulation.

    Attributes
    ----------
    n_goods : int
        Number of goods N (at least 2).
    n_agents : int
        Number of agents M (at least 1).
    sigma : float
        Budget threshold in money units. Negative values allow debt.
    eps_d, eps_p : float
        Adjustment speeds toward supply-demand pressure and price pressure.
        Must lie in [0, 1) so multiplicative updates can never flip a sign.
    gamma : float
        Upper bound of the per-good production-cost distribution.
    omega : float
        Weight of the profit moving average, in (0, 1].
    x_m : float
        Price floor, in [0, 1). Unit-mean prices are infeasible at x_m >= 1.
    n_steps : int
        Simulation horizon.
    seed : int
        Non-negative reproducibility seed; equal seed and params give
        bit-identical trajectories.
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

    def __post_init__(self) -> None:
        if int(self.n_goods) != self.n_goods or self.n_goods < 2:
            raise ValueError(f"n_goods must be an integer >= 2, got {self.n_goods}")
        if int(self.n_agents) != self.n_agents or self.n_agents < 1:
            raise ValueError(f"n_agents must be an integer >= 1, got {self.n_agents}")
        if not 0.0 < self.omega <= 1.0:
            raise ValueError(f"omega must be in (0, 1], got {self.omega}")
        for name in ("eps_d", "eps_p"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {v}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 <= self.x_m < 1.0:
            raise ValueError(f"x_m must be in [0, 1), got {self.x_m}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise ValueError(f"n_steps must be an integer >= 0, got {self.n_steps}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed}")
        if not np.isfinite(self.sigma):
            raise ValueError(f"sigma must be finite, got {self.sigma}")

    @property
    def alpha(self) -> float:
        """Agents per good, M/N."""
        return self.n_agents / self.n_goods


# Fixed substream order; changing it would silently reseed everything.
SUBSTREAMS = (
    "init-prefs",
    "init-prices",
    "costs",
    "demand-noise",
    "price-noise",
    "replacement",
)


class RngStream:
    """Named deterministic substreams derived from one seed.

    Each named stream is an independent PCG64 generator, so consuming draws
    from one (say, replacement rows) never shifts the sequence of another
    (say, preference-update noise).
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self._gens = {
            name: np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(k,)))
            for k, name in enumerate(SUBSTREAMS)
        }

    def get(self, name: str) -> np.random.Generator:
        return self._gens[name]

    @property
    def init_prefs(self) -> np.random.Generator:
        return self._gens["init-prefs"]

    @property
    def init_prices(self) -> np.random.Generator:
        return self._gens["init-prices"]

    @property
    def costs(self) -> np.random.Generator:
        return self._gens["costs"]

    @property
    def demand_noise(self) -> np.random.Generator:
        return self._gens["demand-noise"]

    @property
    def price_noise(self) -> np.random.Generator:
        return self._gens["price-noise"]

    @property
    def replacement(self) -> np.random.Generator:
        return self._gens["replacement"]


@dataclass
class AgentLedger:
    """Per-agent money bookkeeping.

    ``lifetimes`` collects ``(death_step, span)`` pairs for every replaced
    agent so statistics can be windowed by when the lifetime completed.
    """

    pi_bar: np.ndarray
    pi_ema: np.ndarray
    birth_step: np.ndarray
    lifetimes: list[tuple[int, int]] = field(default_factory=list)

    @classmethod
    def fresh(cls, n_agents: int) -> "AgentLedger":
        return cls(
            pi_bar=np.zeros(n_agents),
            pi_ema=np.zeros(n_agents),
            birth_step=np.zeros(n_agents, dtype=np.int64),
        )


@dataclass
class Economy:
    """Full mutable state of one trajectory."""

    xi: np.ndarray
    p: np.ndarray
    costs: np.ndarray
    ledger: AgentLedger
    rng: RngStream
    step_index: int = 0


def pref_scale(n_goods: int) -> float:
    """Per-entry standard deviation of preference draws, 1/sqrt(N).

    With mean-one prices, an agent's intended money xi . p is a sum of N
    entry-price products; scaling entries by 1/sqrt(N) keeps that sum, the
    profits, and hence the meaning of the threshold sigma O(1) regardless of
    how many goods exist. Without it sigma would be a vanishing margin.
    """
    return 1.0 / math.sqrt(n_goods)


def init_economy(params: ModelParams, rng: RngStream | None = None) -> Economy:
    """Draw the initial state.

    Preferences are i.i.d. normal with standard deviation ``pref_scale(N)``,
    raw prices uniform on [0, 2] then projected onto the feasible set (unit
    mean, floor ``x_m``), per-good costs uniform on [0, gamma]. Profits and
    their moving averages start at zero.
    """
    from .solver import project_prices

    rng = rng if rng is not None else RngStream(params.seed)
    xi = rng.init_prefs.standard_normal(
        (params.n_agents, params.n_goods)
    ) * pref_scale(params.n_goods)
    raw = rng.init_prices.uniform(0.0, 2.0, params.n_goods)
    p = project_prices(raw, params.x_m)
    costs = rng.costs.uniform(0.0, params.gamma, params.n_goods)
    return Economy(
        xi=xi,
        p=p,
        costs=costs,
        ledger=AgentLedger.fresh(params.n_agents),
        rng=rng,
    )


def gap(xi_row: np.ndarray, p: np.ndarray, sigma: float) -> float:
    """Signed budget slack of one agent, ``xi_row . p - sigma``."""
    xi_row = np.asarray(xi_row, dtype=float)
    p = np.asarray(p, dtype=float)
    if xi_row.shape != p.shape:
        raise ValueError(f"shape mismatch: {xi_row.shape} vs {p.shape}")
    return float(xi_row @ p - sigma)


def gaps(xi: np.ndarray, p: np.ndarray, sigma: float) -> np.ndarray:
    """All M gaps at once."""
    return np.asarray(xi, dtype=float) @ np.asarray(p, dtype=float) - sigma


def hamiltonian(xi: np.ndarray, p: np.ndarray, sigma: float) -> float:
    """One-sided quadratic penalty on violated constraints.

    H(p) = 1/2 * sum over agents with h_mu < 0 of h_mu^2. Gaps exactly at zero
    contribute nothing (their square vanishes anyway; the strict inequality
    fixes the subgradient convention at the kink).
    """
    h = gaps(np.atleast_2d(xi), p, sigma)
    neg = h[h < 0.0]
    return 0.5 * float(neg @ neg)
