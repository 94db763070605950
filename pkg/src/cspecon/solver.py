"""Convex price formation: minimize the hinge-quadratic penalty over feasible prices.

The feasible set is {p : mean(p) = 1, p_i >= x_m}. The penalty H is convex and
piecewise quadratic, so projected gradient descent with a backtracking line
search converges; warm starts from the previous step's prices make the typical
per-step cost a handful of iterations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import hamiltonian

__all__ = ["SolverConfig", "SolveReport", "project_prices", "solve_prices"]

# Line-search floor: 60 halvings from 1.0 is ~1e-18, far below any useful step.
_MAX_BACKTRACKS = 60


@dataclass(frozen=True)
class SolverConfig:
    """Stopping rules and line-search constants.

    ``grad_tol`` of None means 1e-8 * sqrt(N), resolved per instance. The
    objective rule stops once the relative decrease of an accepted step falls
    below ``obj_tol``.
    """

    max_iters: int = 10000
    grad_tol: float | None = None
    obj_tol: float = 1e-12
    # ls_init seeds the first line search; later searches start from twice the
    # previously accepted step so a well-scaled step is found in O(1) trials.
    ls_init: float = 1.0
    ls_shrink: float = 0.5
    ls_decrease: float = 1e-4
    keep_trace: bool = False

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.grad_tol is not None and self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.obj_tol <= 0 or self.ls_init <= 0 or self.ls_decrease <= 0:
            raise ValueError("tolerances must be positive")
        if not 0.0 < self.ls_shrink < 1.0:
            raise ValueError("ls_shrink must be in (0, 1)")

    def resolve_grad_tol(self, n_goods: int) -> float:
        if self.grad_tol is not None:
            return self.grad_tol
        return 1e-8 * math.sqrt(n_goods)


@dataclass
class SolveReport:
    iterations: int
    objective: float
    grad_mapping_norm: float
    converged: bool
    trace: list[float] | None = None

    def __post_init__(self) -> None:
        if self.objective < 0.0:
            raise ValueError("objective cannot be negative")


def project_prices(raw: np.ndarray, x_m: float) -> np.ndarray:
    """Euclidean projection onto {q : mean(q) = 1, q_i >= x_m}.

    The minimizer has the water-filling form q_i = max(x_m, raw_i - lam). The
    scalar lam solves the piecewise-linear equation sum(q) = N exactly: sort
    raw descending, then for each candidate count k of unclamped coordinates
    lam_k makes the k largest sum to the remaining budget, and exactly one k
    leaves the k-th largest above the floor.

    Parameters
    ----------
    raw : array
        Point to project, length N.
    x_m : float
        Price floor; must be < 1 or the set is empty.
    """
    raw = np.asarray(raw, dtype=float)
    n = raw.size
    if x_m >= 1.0:
        raise ValueError(f"x_m must be < 1 for a feasible price set, got {x_m}")
    target = float(n)

    s = np.sort(raw)[::-1]
    cums = np.cumsum(s)
    ks = np.arange(1, n + 1, dtype=float)
    lam = (cums - (target - (n - ks) * x_m)) / ks
    free = s - lam > x_m
    # k=1 is always valid because target > n * x_m, so argmax-style last True works
    k = int(np.nonzero(free)[0][-1])
    return np.maximum(x_m, raw - lam[k])


def _grad(xi: np.ndarray, p: np.ndarray, sigma: float) -> tuple[np.ndarray, float]:
    """Gradient of H and its value, sharing the gap computation."""
    h = xi @ p - sigma
    mask = h < 0.0
    hneg = np.where(mask, h, 0.0)
    g = hneg @ xi
    return g, 0.5 * float(hneg @ hneg)


def _smallest_zero_step(
    xi: np.ndarray, sigma: float, p: np.ndarray, g: np.ndarray, t_hi: float, x_m: float
) -> np.ndarray:
    """First point along the projection arc where H vanishes.

    Called only when H(project(p - t_hi g)) == 0. The optimal set can be a
    face; bisecting t keeps the returned point the nearest optimum along the
    arc, which is what a vanishing-step gradient flow would reach.
    """
    t_lo = 0.0
    for _ in range(100):
        if t_hi - t_lo <= 1e-12 * max(1.0, t_hi):
            break
        mid = 0.5 * (t_lo + t_hi)
        cand = project_prices(p - mid * g, x_m)
        if hamiltonian(xi, cand, sigma) == 0.0:
            t_hi = mid
        else:
            t_lo = mid
    return project_prices(p - t_hi * g, x_m)


def solve_prices(
    xi: np.ndarray,
    sigma: float,
    warm: np.ndarray,
    x_m: float,
    cfg: SolverConfig | None = None,
) -> tuple[np.ndarray, SolveReport]:
    """Minimize H over feasible prices, warm-started.

    Returns a feasible price vector with H(p) <= H(warm) and a convergence
    report. Non-convergence within ``max_iters`` is not an error: the best
    iterate is returned with ``converged=False`` and the caller decides.
    """
    if cfg is None:
        cfg = SolverConfig()
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 2:
        raise ValueError("xi must be an M x N matrix")
    p = project_prices(np.asarray(warm, dtype=float), x_m)
    gtol = cfg.resolve_grad_tol(p.size)

    g, f = _grad(xi, p, sigma)
    trace = [f] if cfg.keep_trace else None
    if f == 0.0:
        return p, SolveReport(0, 0.0, 0.0, True, trace)

    converged = False
    gm_norm = math.inf
    iters = 0
    t_start = cfg.ls_init

    # Accelerated projected gradient with a monotone anchor: p only ever
    # improves, candidates come from the extrapolated point y, and momentum
    # restarts whenever it overshoots. The extrapolation is what keeps the
    # badly conditioned active sets (many near-parallel binding rows) from
    # reducing progress to a crawl.
    y = p
    g_y, f_y = g, f
    t_mom = 1.0
    while iters < cfg.max_iters:
        gm = p - project_prices(p - g, x_m)
        gm_norm = float(np.linalg.norm(gm))
        if gm_norm < gtol:
            converged = True
            break

        t = t_start
        cand = None
        fc = f
        hneg_cand = None
        for _ in range(_MAX_BACKTRACKS):
            trial = project_prices(y - t * g_y, x_m)
            hneg = np.minimum(xi @ trial - sigma, 0.0)
            f_trial = 0.5 * float(hneg @ hneg)
            d = trial - y
            # quadratic-model bound; holds whenever t <= 1/L on the local piece
            if f_trial <= f_y + float(g_y @ d) + float(d @ d) / (2.0 * t):
                cand, fc, hneg_cand = trial, f_trial, hneg
                break
            t *= cfg.ls_shrink
        if cand is None:
            # step underflow: no acceptable decrease, stop with the best iterate
            break
        iters += 1
        t_start = 2.0 * t

        if fc == 0.0:
            p = _smallest_zero_step(xi, sigma, y, g_y, t, x_m)
            f = 0.0
            if cfg.keep_trace:
                trace.append(f)
            converged = True
            gm_norm = 0.0
            break

        if fc <= f:
            rel_decrease = (f - fc) / max(f, np.finfo(float).tiny)
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_mom * t_mom))
            prev = p
            p, f = cand, fc
            g = hneg_cand @ xi
            y = p + ((t_mom - 1.0) / t_next) * (p - prev)
            g_y, f_y = _grad(xi, y, sigma)
            t_mom = t_next
            if cfg.keep_trace:
                trace.append(f)
            if rel_decrease < cfg.obj_tol:
                converged = True
                gm = p - project_prices(p - g, x_m)
                gm_norm = float(np.linalg.norm(gm))
                break
        else:
            # momentum overshot the valley: restart from the anchor, which
            # makes the next candidate a plain descent step and so improving
            y = p
            g_y, f_y = g, f
            t_mom = 1.0
            if cfg.keep_trace:
                trace.append(f)

    return p, SolveReport(iters, f, gm_norm, converged, trace)
