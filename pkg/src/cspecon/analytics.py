"""Diagnostics over recorded trajectories: regimes, lifetimes, distributions,
lagged correlations with the positions of agents about to fail, and the
profit drag that removals leave on survivors.

All statistics exclude a warm-up window of max(100, 5/omega) steps; the
moving-average transient and the initial projection shock live there.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "warmup_steps",
    "f_index",
    "autocorrelation",
    "LagCorrResult",
    "lagged_correlation",
    "LifetimeSummary",
    "lifetimes_summary",
    "BimodalityVerdict",
    "bimodality_check",
    "PriceDemandCorr",
    "price_demand_correlation",
    "RemovalImpact",
    "removal_impact",
    "RegimeThresholds",
    "classify_regime",
    "SpikeStats",
    "spike_stats",
    "RunSummary",
    "build_run_summary",
]


def warmup_steps(omega: float) -> int:
    """Steps to discard before measuring anything."""
    return max(100, math.ceil(5.0 / omega))


def f_index(xi_pre_removal: np.ndarray, doomed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-good positions of the agents about to be replaced.

    ``f_sellers[i]`` totals the doomed agents' intended supply of good i,
    ``f_buyers[i]`` the magnitude of their intended demand. Both are
    non-negative and additive over disjoint doomed sets.
    """
    xi_pre_removal = np.asarray(xi_pre_removal, dtype=float)
    n = xi_pre_removal.shape[1]
    doomed = np.asarray(doomed, dtype=np.intp)
    if doomed.size == 0:
        return np.zeros(n), np.zeros(n)
    rows = xi_pre_removal[doomed]
    pos = np.maximum(rows, 0.0)
    return pos.sum(axis=0), (pos - rows).sum(axis=0)


def autocorrelation(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Normalized autocorrelation at lags 0..max_lag (biased estimator).

    A constant series has no structure; all lags report 0 except lag 0.
    """
    x = np.asarray(x, dtype=float)
    xc = x - x.mean()
    denom = float(xc @ xc)
    out = np.zeros(max_lag + 1)
    out[0] = 1.0
    # exact-constant input leaves only rounding residue in xc, which would
    # correlate perfectly; call it structureless instead
    if denom == 0.0 or (x == x[0]).all():
        return out
    full = np.correlate(xc, xc, mode="full")[x.size - 1 :]
    upto = min(max_lag, x.size - 1)
    out[: upto + 1] = full[: upto + 1] / denom
    return out


@dataclass
class LagCorrResult:
    """Correlation between price changes and a per-good series at various lags.

    ``normalized`` is the per-good Pearson coefficient averaged over goods
    (degenerate goods skipped); ``unnormalized`` is the plain product mean.
    ``degenerate`` flags lags where every good had zero variance.
    """

    taus: np.ndarray
    normalized: np.ndarray
    unnormalized: np.ndarray
    degenerate: np.ndarray


def lagged_correlation(dp: np.ndarray, f: np.ndarray, taus) -> LagCorrResult:
    """Correlate dp[t] with f[t + tau] for each lag in ``taus``.

    Both inputs are (T, N) and index-aligned: row t of ``dp`` and row t of
    ``f`` belong to the same step.
    """
    dp = np.atleast_2d(np.asarray(dp, dtype=float))
    f = np.atleast_2d(np.asarray(f, dtype=float))
    if dp.shape != f.shape:
        raise ValueError(f"shape mismatch: {dp.shape} vs {f.shape}")
    taus = np.asarray(list(taus), dtype=int)
    t_len = dp.shape[0]
    if t_len - int(np.abs(taus).max(initial=0)) < 3:
        raise ValueError("series too short for the requested lags")

    normalized = np.zeros(taus.size)
    unnormalized = np.zeros(taus.size)
    degenerate = np.zeros(taus.size, dtype=bool)
    for j, tau in enumerate(taus):
        if tau >= 0:
            a, b = dp[: t_len - tau], f[tau:]
        else:
            a, b = dp[-tau:], f[: t_len + tau]
        ac = a - a.mean(axis=0)
        bc = b - b.mean(axis=0)
        sa = np.sqrt((ac * ac).mean(axis=0))
        sb = np.sqrt((bc * bc).mean(axis=0))
        valid = (sa > 0.0) & (sb > 0.0)
        unnormalized[j] = float((a * b).mean())
        if valid.any():
            corr = (ac[:, valid] * bc[:, valid]).mean(axis=0) / (sa[valid] * sb[valid])
            normalized[j] = float(corr.mean())
        else:
            degenerate[j] = True
    return LagCorrResult(taus, normalized, unnormalized, degenerate)


@dataclass
class LifetimeSummary:
    mean: float
    count: int
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    censored_count: int


def lifetimes_summary(
    lifetimes: list[tuple[int, int]],
    warmup: int = 0,
    censored_count: int = 0,
    bins: int = 50,
) -> LifetimeSummary:
    """Mean and histogram of lifespans completed after the warm-up.

    ``lifetimes`` holds (death_step, span) pairs. Agents still alive at the
    end are not in the log; pass their number as ``censored_count``.
    """
    spans = np.array([s for d, s in lifetimes if d >= warmup], dtype=float)
    if spans.size == 0:
        raise ValueError("no completed lifetimes in the measurement window")
    counts, edges = np.histogram(spans, bins=bins)
    return LifetimeSummary(
        mean=float(spans.mean()),
        count=int(spans.size),
        hist_counts=counts,
        hist_edges=edges,
        censored_count=int(censored_count),
    )


@dataclass
class BimodalityVerdict:
    n_modes: int
    locations: list[float]
    counts: np.ndarray
    edges: np.ndarray


def bimodality_check(
    samples: np.ndarray,
    min_samples: int = 10_000,
    bins: int = 256,
    smooth_bins: float = 3.0,
    prominence: float = 0.2,
    height_floor: float = 0.05,
) -> BimodalityVerdict:
    """Count modes of a distribution from a smoothed histogram.

    Peaks shorter than ``height_floor`` of the tallest are discarded as
    tail noise. A surviving peak only counts as a separate mode if it
    rises above the valley between it and its neighbor by at least
    ``prominence`` of the smaller peak's own height; shallower bumps are
    merged into the taller neighbor. Prominence is relative to the
    smaller peak, not the global one, so a spike at a hard boundary does
    not swallow a broad low bulk next to it.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {samples.size}")
    counts, edges = np.histogram(samples, bins=bins)
    radius = int(math.ceil(4 * smooth_bins))
    xk = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (xk / smooth_bins) ** 2)
    kernel /= kernel.sum()
    density = np.convolve(counts.astype(float), kernel, mode="same")

    # boundary bins count too: mass piled at the support edge (e.g. prices
    # pinned at the floor) is a mode like any other
    def _is_peak(i: int) -> bool:
        left = density[i - 1] if i > 0 else -np.inf
        right = density[i + 1] if i < bins - 1 else -np.inf
        return density[i] > left and density[i] >= right

    floor = height_floor * float(density.max())
    peaks = [i for i in range(bins) if _is_peak(i) and density[i] >= floor]
    if not peaks:
        peaks = [int(np.argmax(density))]
    # merge adjacent peaks whose separating valley is too shallow
    merged = True
    while merged and len(peaks) > 1:
        merged = False
        for k in range(len(peaks) - 1):
            a, b = peaks[k], peaks[k + 1]
            lower = float(min(density[a], density[b]))
            valley = float(density[a : b + 1].min())
            if lower - valley < prominence * lower:
                peaks.pop(k if density[a] < density[b] else k + 1)
                merged = True
                break
    centers = 0.5 * (edges[:-1] + edges[1:])
    return BimodalityVerdict(
        n_modes=len(peaks),
        locations=[float(centers[i]) for i in peaks],
        counts=counts,
        edges=edges,
    )


@dataclass
class PriceDemandCorr:
    pooled: float
    per_good: np.ndarray
    degenerate: bool


def price_demand_correlation(prices: np.ndarray, demand: np.ndarray) -> PriceDemandCorr:
    """Pearson correlation between prices and demand magnitudes, pooled over
    all (good, step) pairs, plus the per-good coefficients."""
    prices = np.asarray(prices, dtype=float)
    mag = np.abs(np.asarray(demand, dtype=float))
    if prices.shape != mag.shape:
        raise ValueError(f"shape mismatch: {prices.shape} vs {mag.shape}")

    def _pearson(x, y):
        xc = x - x.mean()
        yc = y - y.mean()
        den = math.sqrt(float(xc @ xc) * float(yc @ yc))
        if den == 0.0:
            return np.nan
        return float(xc @ yc) / den

    pooled = _pearson(prices.ravel(), mag.ravel())
    per_good = np.array(
        [_pearson(prices[:, i], mag[:, i]) for i in range(prices.shape[1])]
    )
    return PriceDemandCorr(
        pooled=pooled, per_good=per_good, degenerate=bool(np.isnan(pooled))
    )


@dataclass
class RemovalImpact:
    z_values: np.ndarray
    deltas: np.ndarray
    bin_edges: np.ndarray
    bin_means: np.ndarray
    bin_counts: np.ndarray


def removal_impact(
    pi_ema_series: np.ndarray,
    removal_sets: list[np.ndarray],
    z_ema: np.ndarray,
    tau: int,
    warmup: int = 0,
    bin_width: float = 0.01,
) -> RemovalImpact:
    """Change of survivors' smoothed profit tau steps after a removal event.

    For each step with at least one removal, averages pi_ema(t+tau) -
    pi_ema(t) over agents not replaced anywhere in [t, t+tau] (a replacement
    inside the window would inject a newcomer's reset value). Results are
    binned against the removal fraction of the event step.
    """
    ema = np.asarray(pi_ema_series, dtype=float)
    z_ema = np.asarray(z_ema, dtype=float)
    t_len, m = ema.shape
    zs, deltas = [], []
    for t in range(warmup, t_len - tau):
        if removal_sets[t].size == 0:
            continue
        mask = np.ones(m, dtype=bool)
        for s in range(t, t + tau + 1):
            mask[removal_sets[s]] = False
        if not mask.any():
            continue
        deltas.append(float((ema[t + tau, mask] - ema[t, mask]).mean()))
        zs.append(float(z_ema[t]))
    zs = np.array(zs)
    deltas = np.array(deltas)
    if zs.size == 0:
        return RemovalImpact(zs, deltas, np.array([]), np.array([]), np.array([], dtype=int))
    edges = np.arange(0.0, zs.max() + bin_width, bin_width)
    if edges[-1] <= zs.max():
        edges = np.append(edges, edges[-1] + bin_width)
    idx = np.digitize(zs, edges) - 1
    nbins = edges.size - 1
    means = np.full(nbins, np.nan)
    counts = np.zeros(nbins, dtype=int)
    for b in range(nbins):
        sel = idx == b
        counts[b] = int(sel.sum())
        if counts[b]:
            means[b] = float(deltas[sel].mean())
    return RemovalImpact(zs, deltas, edges, means, counts)


@dataclass(frozen=True)
class RegimeThresholds:
    """Knobs of the regime detector; overridable from configuration."""

    mean_u: float = 0.15
    ac_peak: float = 0.3
    ac_min_lag: int = 10
    spike_ratio: float = 3.0
    min_length: int = 1000
    max_lag: int = 2500


def _tallest_secondary_peak(ac: np.ndarray, min_lag: int) -> tuple[int, float]:
    """Lag and height of the highest autocorrelation local maximum past
    ``min_lag``; (-1, -inf) when the tail has no local maximum."""
    best_lag, best = -1, -np.inf
    for k in range(max(min_lag, 1), ac.size - 1):
        if ac[k] > ac[k - 1] and ac[k] >= ac[k + 1] and ac[k] > best:
            best_lag, best = k, float(ac[k])
    return best_lag, best


def dominant_period(
    z_ema: np.ndarray, min_lag: int = 10, max_lag: int = 2500
) -> float:
    """Cycle length of a removal-fraction series, in steps.

    Estimated as the lag of the tallest autocorrelation local maximum, which
    is robust to a single crisis fragmenting into several threshold
    crossings. NaN when no local maximum exists past ``min_lag``.
    """
    z = np.asarray(z_ema, dtype=float)
    lag = min(z.size // 2, max_lag)
    if lag <= min_lag:
        return float("nan")
    best_lag, _ = _tallest_secondary_peak(autocorrelation(z, lag), min_lag)
    return float(best_lag) if best_lag > 0 else float("nan")


def classify_regime(z_ema: np.ndarray, thresholds: RegimeThresholds | None = None) -> str:
    """Label a removal-fraction series U, EC, or S.

    U when the mean removal fraction is high; EC when the series is spiky
    (max far above the median) with a periodic signature in its
    autocorrelation; S otherwise.
    """
    th = thresholds or RegimeThresholds()
    z = np.asarray(z_ema, dtype=float)
    if z.size < th.min_length:
        raise ValueError(f"need at least {th.min_length} steps, got {z.size}")
    if z.mean() > th.mean_u:
        return "U"
    max_lag = min(z.size // 2, th.max_lag)
    _, secondary = _tallest_secondary_peak(
        autocorrelation(z, max_lag), th.ac_min_lag
    )
    spiky = z.max() > 0.0 and z.max() >= th.spike_ratio * float(np.median(z))
    if spiky and secondary >= th.ac_peak:
        return "EC"
    return "S"


@dataclass
class SpikeStats:
    n_episodes: int
    peak_steps: np.ndarray
    peak_values: np.ndarray
    period: float
    baseline_median: float


def spike_stats(z_ema: np.ndarray, threshold: float = 0.05) -> SpikeStats:
    """Episodes where the removal fraction crosses ``threshold``.

    The period is the mean distance between episode peaks (NaN with fewer
    than two episodes); the baseline is the median outside episodes.
    """
    z = np.asarray(z_ema, dtype=float)
    mask = z >= threshold
    starts = np.nonzero(mask & ~np.roll(mask, 1))[0]
    if mask.size and mask[0]:
        starts = np.unique(np.append(starts, 0))
    peak_steps, peak_values = [], []
    for s in starts:
        e = s
        while e < z.size and mask[e]:
            e += 1
        j = s + int(np.argmax(z[s:e]))
        peak_steps.append(j)
        peak_values.append(float(z[j]))
    peak_steps = np.array(peak_steps, dtype=int)
    peak_values = np.array(peak_values)
    period = float(np.diff(peak_steps).mean()) if peak_steps.size >= 2 else float("nan")
    baseline = float(np.median(z[~mask])) if (~mask).any() else float("nan")
    return SpikeStats(
        n_episodes=int(peak_steps.size),
        peak_steps=peak_steps,
        peak_values=peak_values,
        period=period,
        baseline_median=baseline,
    )


@dataclass
class RunSummary:
    """Windowed statistics of one run, serializable to structured text."""

    n_steps: int
    warmup: int
    measured_steps: int
    mean_z: float
    max_z: float
    min_z: float
    mean_zema: float
    max_zema: float
    min_zema: float
    mean_lifetime: float | None
    n_lifetimes: int
    censored_count: int
    regime: str
    spike_period: float | None
    spike_threshold: float
    n_spike_episodes: int
    solver_nonconverged_steps: int
    demand_modes: int | None = None
    demand_mode_locations: list[float] = field(default_factory=list)
    price_modes: int | None = None
    price_mode_locations: list[float] = field(default_factory=list)
    supply_modes: int | None = None
    supply_mode_locations: list[float] = field(default_factory=list)
    price_demand_corr: float | None = None
    distributions_available: bool = False

    def to_dict(self) -> dict:
        return {
            "n_steps": self.n_steps,
            "warmup": self.warmup,
            "measured_steps": self.measured_steps,
            "mean_z": self.mean_z,
            "max_z": self.max_z,
            "min_z": self.min_z,
            "mean_zema": self.mean_zema,
            "max_zema": self.max_zema,
            "min_zema": self.min_zema,
            "mean_lifetime": self.mean_lifetime,
            "n_lifetimes": self.n_lifetimes,
            "censored_count": self.censored_count,
            "regime": self.regime,
            "spike_period": self.spike_period,
            "spike_threshold": self.spike_threshold,
            "n_spike_episodes": self.n_spike_episodes,
            "solver_nonconverged_steps": self.solver_nonconverged_steps,
            "demand_modes": self.demand_modes,
            "demand_mode_locations": self.demand_mode_locations,
            "price_modes": self.price_modes,
            "price_mode_locations": self.price_mode_locations,
            "supply_modes": self.supply_modes,
            "supply_mode_locations": self.supply_mode_locations,
            "price_demand_corr": self.price_demand_corr,
            "distributions_available": self.distributions_available,
        }


def build_run_summary(
    z: np.ndarray,
    z_ema: np.ndarray,
    lifetimes: list[tuple[int, int]],
    omega: float,
    n_agents: int,
    *,
    solver_converged: np.ndarray | None = None,
    prices: np.ndarray | None = None,
    demand: np.ndarray | None = None,
    supply: np.ndarray | None = None,
    thresholds: RegimeThresholds | None = None,
    spike_threshold: float = 0.05,
    warmup: int | None = None,
) -> RunSummary:
    """Assemble the windowed statistics; distribution fields stay None unless
    per-good series are supplied."""
    z = np.asarray(z, dtype=float)
    z_ema = np.asarray(z_ema, dtype=float)
    w = warmup_steps(omega) if warmup is None else warmup
    zw = z[w:]
    ze = z_ema[w:]
    measured = zw.size

    def _stat(fn, arr):
        return float(fn(arr)) if arr.size else float("nan")

    try:
        regime = classify_regime(ze, thresholds)
    except ValueError:
        regime = "NA"
    spikes = spike_stats(ze, spike_threshold) if measured else None
    try:
        lt = lifetimes_summary(lifetimes, warmup=w, censored_count=n_agents)
        mean_lifetime, n_lifetimes = lt.mean, lt.count
    except ValueError:
        mean_lifetime, n_lifetimes = None, 0

    summary = RunSummary(
        n_steps=int(z.size),
        warmup=int(w),
        measured_steps=int(measured),
        mean_z=_stat(np.mean, zw),
        max_z=_stat(np.max, zw),
        min_z=_stat(np.min, zw),
        mean_zema=_stat(np.mean, ze),
        max_zema=_stat(np.max, ze),
        min_zema=_stat(np.min, ze),
        mean_lifetime=mean_lifetime,
        n_lifetimes=n_lifetimes,
        censored_count=int(n_agents),
        regime=regime,
        spike_period=(
            None
            if spikes is None or math.isnan(spikes.period)
            else float(spikes.period)
        ),
        spike_threshold=spike_threshold,
        n_spike_episodes=0 if spikes is None else spikes.n_episodes,
        solver_nonconverged_steps=(
            0
            if solver_converged is None
            else int(np.count_nonzero(~np.asarray(solver_converged, dtype=bool)))
        ),
    )

    if prices is not None and demand is not None:
        pw = np.asarray(prices, dtype=float)[w:]
        dw = np.asarray(demand, dtype=float)[w:]
        summary.distributions_available = True
        summary.price_demand_corr = price_demand_correlation(pw, dw).pooled
        try:
            v = bimodality_check(np.abs(dw).ravel())
            summary.demand_modes, summary.demand_mode_locations = v.n_modes, v.locations
            v = bimodality_check(pw.ravel())
            summary.price_modes, summary.price_mode_locations = v.n_modes, v.locations
            if supply is not None:
                v = bimodality_check(np.asarray(supply, dtype=float)[w:].ravel())
                summary.supply_modes, summary.supply_mode_locations = v.n_modes, v.locations
        except ValueError:
            summary.demand_modes = None
            summary.price_modes = None
            summary.supply_modes = None
    return summary
