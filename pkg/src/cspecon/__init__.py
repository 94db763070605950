"""Constraint-satisfaction production economy: a deterministic simulator of
many heterogeneous producer-consumers whose prices are set each step by
minimizing unmet-demand penalties over the feasible price set."""

from .core import (
    pref_scale,
    SUBSTREAMS,
    AgentLedger,
    Economy,
    ModelParams,
    RngStream,
    gap,
    gaps,
    hamiltonian,
    init_economy,
)
from .solver import SolveReport, SolverConfig, project_prices, solve_prices
from .dynamics import (
    Aggregates,
    SimResult,
    StepRecord,
    compute_aggregates,
    compute_profits,
    compute_wages,
    cull_and_replace,
    execute_transactions,
    simulate,
    step,
    update_ema,
    update_preferences,
)
from .analytics import (
    RegimeThresholds,
    RunSummary,
    autocorrelation,
    bimodality_check,
    build_run_summary,
    classify_regime,
    dominant_period,
    f_index,
    lagged_correlation,
    lifetimes_summary,
    price_demand_correlation,
    removal_impact,
    spike_stats,
    warmup_steps,
)

__version__ = "0.1.0"

__all__ = [
    "SUBSTREAMS",
    "AgentLedger",
    "Aggregates",
    "Economy",
    "ModelParams",
    "RegimeThresholds",
    "RngStream",
    "RunSummary",
    "SimResult",
    "SolveReport",
    "SolverConfig",
    "StepRecord",
    "bimodality_check",
    "build_run_summary",
    "classify_regime",
    "compute_aggregates",
    "compute_profits",
    "compute_wages",
    "cull_and_replace",
    "dominant_period",
    "execute_transactions",
    "f_index",
    "gap",
    "gaps",
    "hamiltonian",
    "init_economy",
    "lagged_correlation",
    "lifetimes_summary",
    "price_demand_correlation",
    "project_prices",
    "removal_impact",
    "simulate",
    "solve_prices",
    "spike_stats",
    "step",
    "update_ema",
    "update_preferences",
    "warmup_steps",
    "__version__",
]
