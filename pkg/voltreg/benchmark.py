"""
Complexity benchmarks and the multi-phase versus diagonal-only comparison.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .clustering import auto_partition, central_op_count, fit_exponent, model_op_count, recommend_k
from .config import SolverConfig
from .errors import ConfigError
from .feeder import FeederCase
from .hierarchical import EngineOptions, HierarchicalEngine, run_hierarchical
from .opf import (
    build_problem,
    initial_state,
    primal_dual_step,
    solve_centralized,
    total_cost,
    voltage_violation,
)
from .sensitivity import build_sensitivity, diagonal_only
from .synthetic import TOPOLOGIES, generate_feeder

logger = logging.getLogger(__name__)

BENCHMARK_COLUMNS = [
    "N",
    "K",
    "model_ops",
    "measured_ops",
    "central_ops",
    "per_iter_wallclock_central",
    "per_iter_wallclock_hier",
    "per_iter_wallclock_hier_parallel",
]


def resolve_k(value, N: int) -> int:
    """Accept an integer, "auto" (the recommended K) or "N/<d>"."""
    text = str(value).strip().lower()
    if text == "auto":
        return recommend_k(N)
    if text.startswith("n/"):
        try:
            return max(N // int(text[2:]), 1)
        except ValueError as e:
            raise ConfigError(f"Bad K expression {value!r}") from e
    try:
        K = int(text)
    except ValueError as e:
        raise ConfigError(f"K must be an integer, 'auto' or 'N/<d>', got {value!r}") from e
    if not 1 <= K <= N:
        raise ConfigError(f"K must lie in [1, {N}], got {K}")
    return K


def benchmark_feeder(N: int, branching: int = 2, seed: int = 0, topology: str = "clustered") -> FeederCase:
    """
    The synthetic tree every K of a sweep at size N runs on.

    The clustered topology hangs recommend_k(N) balanced blocks off the
    slack, so the tree does not change with the K being measured.
    """
    if topology not in TOPOLOGIES:
        raise ConfigError(f"topology must be one of {TOPOLOGIES}, got {topology!r}")
    subtrees = recommend_k(N) if topology == "clustered" else 1
    return generate_feeder(N, branching=branching, topology=topology, subtrees=subtrees, seed=seed)


def benchmark_row(
    N: int,
    K: int,
    branching: int,
    iters: int,
    max_dense: int,
    seed: int,
    workers: int = 1,
    topology: str = "clustered",
    case: Optional[FeederCase] = None,
) -> dict:
    """
    One table row: the benchmark tree for N split by auto_partition into K subtrees.

    Operation counts come from one coupling round. Wall-clock columns stay
    empty (NaN) above max_dense nodes, where the dense matrices are not built.
    """
    if case is None:
        case = benchmark_feeder(N, branching, seed, topology)
    partition = auto_partition(case.feeder, K)
    config = SolverConfig(max_iters=iters, check_stepsize=False, seed=seed)
    dense = N <= max_dense
    problem = build_problem(case, config, sensitivities=dense)

    engine = HierarchicalEngine(problem, partition)
    engine.coupling(np.random.default_rng(seed).random(problem.n))
    measured = engine.op_count()
    row = {
        "N": N,
        "K": K,
        "model_ops": model_op_count(N, K, [s.size for s in partition.subtrees]).total,
        "measured_ops": measured.total,
        "central_ops": central_op_count(problem.n).total,
        "per_iter_wallclock_central": math.nan,
        "per_iter_wallclock_hier": math.nan,
        "per_iter_wallclock_hier_parallel": math.nan,
    }
    if dense:
        state = initial_state(problem)
        start = time.perf_counter()
        for _ in range(iters):
            state = primal_dual_step(state, problem)
        row["per_iter_wallclock_central"] = (time.perf_counter() - start) / iters
        result = run_hierarchical(problem, partition, EngineOptions(workers=workers))
        row["per_iter_wallclock_hier"] = result.per_iter_wallclock
        row["per_iter_wallclock_hier_parallel"] = result.per_iter_wallclock_parallel
    logger.info(f"Benchmark N={N} K={K}: measured {row['measured_ops']} ops, central {row['central_ops']}")
    return row


def benchmark_table(
    sizes,
    ks=("auto",),
    branching: int = 2,
    iters: int = 20,
    max_dense: int = 2048,
    seed: int = 0,
    workers: int = 1,
    topology: str = "clustered",
) -> pd.DataFrame:
    rows = []
    for N in sizes:
        case = benchmark_feeder(N, branching, seed, topology)
        for value in ks:
            K = resolve_k(value, N)
            rows.append(benchmark_row(N, K, branching, iters, max_dense, seed, workers, topology, case))
    return pd.DataFrame(rows, columns=BENCHMARK_COLUMNS)


def scaling_fit(table: pd.DataFrame, sizes) -> dict:
    """Fitted exponents of measured and centralized ops against N, using the recommended-K rows."""
    rows = table[[K == recommend_k(N) for N, K in zip(table["N"], table["K"])]]
    rows = rows.drop_duplicates("N").sort_values("N")
    if len(rows) < 2:
        return {}
    return {
        "sizes": [int(n) for n in rows["N"]],
        "hierarchical_exponent": fit_exponent(rows["N"], rows["measured_ops"]),
        "central_exponent": fit_exponent(rows["N"], rows["central_ops"]),
    }


########################################
# MODEL COMPARISON
########################################


@dataclass
class ModelRun:
    status: str
    iters: int
    final_cost: float
    max_undervolt: float
    max_overvolt: float
    p0_series: list = field(default_factory=list)


def compare_models(case: FeederCase, config: SolverConfig) -> dict[str, ModelRun]:
    """
    Feedback-mode solves driven by the full multi-phase sensitivities and by
    their diagonal-only reduction. Costs and violations are those the
    nonlinear oracle reports at the final iterate.
    """
    config = config.replace(mode="feedback")
    full = build_sensitivity(case.feeder)
    runs = {}
    for name, pack in (("multi_phase", full), ("diagonal_only", diagonal_only(full))):
        problem = build_problem(case, config, pack=pack)
        result = solve_centralized(problem)
        under, over = voltage_violation(problem, result.final.v)
        runs[name] = ModelRun(
            status=result.status,
            iters=result.iterations,
            final_cost=total_cost(problem, result.final),
            max_undervolt=under,
            max_overvolt=over,
            p0_series=result.p0_series.tolist(),
        )
        logger.info(f"{name}: {result.status} after {result.iterations} iterations, cost {runs[name].final_cost:.9g}")
    return runs


def compare_report(runs: dict[str, ModelRun]) -> dict:
    return {
        name: {
            "status": run.status,
            "iters": run.iters,
            "final_cost": run.final_cost,
            "max_undervolt": run.max_undervolt,
            "max_overvolt": run.max_overvolt,
        }
        for name, run in runs.items()
    }


def compare_p0_frame(runs: dict[str, ModelRun]) -> pd.DataFrame:
    """P0 per iteration for both runs; the shorter run is padded with empty cells."""
    length = max((len(run.p0_series) for run in runs.values()), default=0)
    data = {"iter": list(range(1, length + 1))}
    for name, run in runs.items():
        data[name] = run.p0_series + [math.nan] * (length - len(run.p0_series))
    return pd.DataFrame(data)
