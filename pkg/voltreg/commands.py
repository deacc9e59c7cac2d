"""Command-line interface: solve, cluster, benchmark, compare and gen."""

from __future__ import annotations

import functools
import json
import logging
import os
import sys
import time
import warnings

import click
import numpy as np

from .__about__ import __version__
from .benchmark import benchmark_table, compare_models, compare_p0_frame, compare_report, resolve_k, scaling_fit
from .clustering import auto_partition, load_partition, partition_from_clusters, partition_to_dict, recommend_k, require_valid
from .config import PRESETS, load_config
from .errors import ParseError, StepsizeWarning, VoltregError
from .feeder import dump_feeder, load_feeder, serialize_feeder
from .hierarchical import EngineOptions, run_hierarchical, write_actor_timing_csv
from .opf import (
    STATUS_CONVERGED,
    build_problem,
    initial_state,
    solve_centralized,
    summary_dict,
    write_final_state,
    write_trajectory_csv,
)
from .powerflow import nonlinear_solve, write_flows_csv
from .sensitivity import dump_matrix_csv
from .synthetic import TOPOLOGIES, generate_feeder
from .utils import dump_json, dump_yaml

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_ITERATION_LIMIT = 2


def guarded(func):
    """Report voltreg errors in red on stderr and exit 1."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except VoltregError as e:
            click.echo(click.style(f"{type(e).__name__}: {e}", fg="red"), err=True)
            sys.exit(EXIT_INPUT)

    return wrapper


def solver_options(func):
    """The solver flags shared by solve and compare; unset flags leave the config alone."""
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML settings file."),
        click.option("--preset", type=click.Choice(sorted(PRESETS)), help="Named stepsize preset."),
        click.option("--mode", type=click.Choice(["linear", "feedback"]), help="Refresh v and P0 from the linear model or the nonlinear sweep."),
        click.option("--eps", type=float, help="Primal stepsize."),
        click.option("--eps-dual-mult", type=float, help="Dual stepsize as a multiple of eps."),
        click.option("--eta", type=float, help="Dual regularization."),
        click.option("--vmin", type=float, help="Lower voltage magnitude bound (p.u.)."),
        click.option("--vmax", type=float, help="Upper voltage magnitude bound (p.u.)."),
        click.option("--max-iters", type=int, help="Iteration limit."),
        click.option("--sigma", type=float, help="Stopping threshold on |P0(t+1) - P0(t)|."),
        click.option("--sigma-z", type=float, help="Stopping threshold on the step's largest entry."),
        click.option("--seed", type=int, help="Seed for random initialization."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _config(config_path, preset, **overrides):
    return load_config(config_path, overrides=overrides, preset=preset)


def _partition(feeder, choice, clusters):
    """Resolve --partition: file:<path>, auto:<k|auto>, or the feeder's own clusters."""
    if choice is None:
        if clusters is not None:
            return require_valid(feeder, partition_from_clusters(feeder, clusters))
        # a chain has fewer leaves than the recommended K
        return auto_partition(feeder, min(recommend_k(feeder.n_nodes - 1), len(feeder.leaves)))
    kind, _, value = choice.partition(":")
    if kind == "file":
        return require_valid(feeder, load_partition(feeder, value))
    if kind == "auto":
        return auto_partition(feeder, resolve_k(value or "auto", feeder.n_nodes - 1))
    raise ParseError(f"--partition must be file:<path> or auto:<k>, got {choice!r}")


@click.group()
@click.version_option(__version__, prog_name="voltreg")
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for every iteration.")
def main(verbose):
    """
    Voltage regulation on radial multi-phase feeders with centralized and
    hierarchical primal-dual solvers.
    """
    level = logging.WARNING if not verbose else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--feeder", "feeder_path", required=True, help="Feeder JSON file or builtin:<name>.")
@click.option("--engine", type=click.Choice(["central", "hier"]), default="central", show_default=True)
@click.option("--partition", "partition_spec", help="file:<path> or auto:<k|auto>; defaults to the feeder's clusters.")
@click.option("--init", "init", type=click.Choice(["nominal", "random"]), default="nominal", show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", show_default=True)
@click.option("--log-messages", type=click.Path(dir_okay=False), help="JSON-lines log of every engine message.")
@click.option("--dump-flows", is_flag=True, help="Write the nonlinear branch flows at the final iterate.")
@click.option("--dump-matrices", is_flag=True, help="Write R and X as labelled CSV files.")
@click.option("--workers", type=int, default=1, show_default=True, help="Threads per superstep (hier engine).")
@click.option("--schedule-seed", type=int, help="Shuffle actor order inside supersteps (hier engine).")
@solver_options
@guarded
def solve(
    feeder_path,
    engine,
    partition_spec,
    init,
    out_dir,
    log_messages,
    dump_flows,
    dump_matrices,
    workers,
    schedule_seed,
    config_path,
    preset,
    **overrides,
):
    """
    Solve the voltage-regulation problem and write the run artifacts.
    """
    case = load_feeder(feeder_path)
    config = _config(config_path, preset, **overrides)
    problem = build_problem(case, config)
    initial = initial_state(problem, np.random.default_rng(config.seed) if init == "random" else None)
    os.makedirs(out_dir, exist_ok=True)

    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StepsizeWarning)
        if engine == "central":
            result = solve_centralized(problem, initial=initial)
        else:
            partition = _partition(case.feeder, partition_spec, case.clusters)
            options = EngineOptions(schedule_seed=schedule_seed, workers=workers, message_log=log_messages)
            result = run_hierarchical(problem, partition, options, initial=initial)
    wallclock = time.perf_counter() - start
    logger.info(f"{engine} solve finished in {wallclock:.3f}s, writing artifacts to {out_dir}")

    for message in result.warnings:
        click.echo(click.style(f"Warning: {message}", fg="yellow"), err=True)

    write_trajectory_csv(result, os.path.join(out_dir, "trajectory.csv"))
    write_final_state(problem, result.final, os.path.join(out_dir, "final_state.json"))
    dump_json(summary_dict(problem, result), os.path.join(out_dir, "summary.json"))
    dump_yaml({"engine": engine, "feeder": feeder_path, "init": init, **config.to_dict()}, os.path.join(out_dir, "config.yaml"))
    timing = {"wallclock": wallclock}
    if engine == "hier":
        timing["per_iter_wallclock"] = result.per_iter_wallclock
        timing["per_iter_wallclock_parallel"] = result.per_iter_wallclock_parallel
        write_actor_timing_csv(result, os.path.join(out_dir, "actor_timing.csv"))
        dump_json(result.op_count.to_dict(), os.path.join(out_dir, "op_count.json"))
    dump_json(timing, os.path.join(out_dir, "timing.json"))
    if dump_flows:
        _, branches = nonlinear_solve(
            case.feeder, result.final.p, result.final.q, tol=config.sweep_tol, max_iters=config.sweep_max_iters
        )
        write_flows_csv(case.feeder, branches, os.path.join(out_dir, "flows.csv"))
    if dump_matrices:
        dump_matrix_csv(problem.pack, os.path.join(out_dir, "R.csv"), matrix="R")
        dump_matrix_csv(problem.pack, os.path.join(out_dir, "X.csv"), matrix="X")

    if result.status == STATUS_CONVERGED:
        click.echo(click.style(f"Converged after {result.iterations} iterations; artifacts in {out_dir}", fg="green"))
        sys.exit(EXIT_OK)
    click.echo(click.style(f"Stopped with status {result.status} after {result.iterations} iterations", fg="yellow"))
    sys.exit(EXIT_ITERATION_LIMIT)


@main.command()
@click.option("--feeder", "feeder_path", required=True, help="Feeder JSON file or builtin:<name>.")
@click.option("--k", "k_value", default="auto", show_default=True, help="Number of subtrees, or auto.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Write the partition here instead of stdout.")
@guarded
def cluster(feeder_path, k_value, out_path):
    """
    Partition a feeder into subtrees and print the partition JSON.
    """
    case = load_feeder(feeder_path)
    feeder = case.feeder
    partition = auto_partition(feeder, resolve_k(k_value, feeder.n_nodes - 1))
    data = partition_to_dict(feeder, partition)
    if out_path:
        dump_json(data, out_path)
        click.echo(click.style(f"Wrote {partition.K} subtrees to {out_path}", fg="green"), err=True)
    else:
        click.echo(json.dumps(data, indent=2, sort_keys=True))


@main.command()
@click.option("--nodes", "sizes", type=int, multiple=True, default=(256, 1024, 4096), show_default=True)
@click.option("--branching", type=int, default=2, show_default=True)
@click.option("--k", "ks", multiple=True, default=("auto",), show_default=True, help="Integers, auto or N/<d>; repeatable.")
@click.option("--iters", type=int, default=20, show_default=True, help="Iterations timed per engine.")
@click.option("--max-dense", type=int, default=2048, show_default=True, help="Largest N timed with dense matrices.")
@click.option(
    "--topology",
    type=click.Choice(TOPOLOGIES),
    default="clustered",
    show_default=True,
    help="Synthetic tree shared by every K at one size.",
)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", show_default=True)
@guarded
def benchmark(sizes, branching, ks, iters, max_dense, topology, workers, seed, out_dir):
    """
    Count coupling operations and time both engines on synthetic feeders.
    """
    os.makedirs(out_dir, exist_ok=True)
    table = benchmark_table(
        sizes, ks, branching=branching, iters=iters, max_dense=max_dense, seed=seed, workers=workers, topology=topology
    )
    table.to_csv(os.path.join(out_dir, "benchmark.csv"), index=False, float_format="%.17g")
    fit = scaling_fit(table, sizes)
    if fit:
        dump_json(fit, os.path.join(out_dir, "benchmark_fit.json"))
        click.echo(
            f"Fitted exponents: hierarchical {fit['hierarchical_exponent']:.3f}, "
            f"centralized {fit['central_exponent']:.3f}"
        )
    click.echo(click.style(f"Wrote {len(table)} rows to {out_dir}", fg="green"))


@main.command()
@click.option("--feeder", "feeder_path", required=True, help="Feeder JSON file or builtin:<name>.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", show_default=True)
@solver_options
@guarded
def compare(feeder_path, out_dir, config_path, preset, **overrides):
    """
    Feedback-mode runs with the full multi-phase model and its diagonal-only reduction.
    """
    case = load_feeder(feeder_path)
    config = _config(config_path, preset, **overrides)
    os.makedirs(out_dir, exist_ok=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StepsizeWarning)
        runs = compare_models(case, config)
    dump_json(compare_report(runs), os.path.join(out_dir, "compare.json"))
    compare_p0_frame(runs).to_csv(os.path.join(out_dir, "compare_p0.csv"), index=False, float_format="%.17g")
    for name, run in runs.items():
        click.echo(
            f"{name}: {run.status}, cost {run.final_cost:.9g}, "
            f"undervolt {run.max_undervolt:.3g}, overvolt {run.max_overvolt:.3g}"
        )
    click.echo(click.style(f"Comparison written to {out_dir}", fg="green"))


@main.command()
@click.option("--nodes", type=int, required=True, help="Number of non-slack nodes.")
@click.option("--branching", type=int, default=2, show_default=True)
@click.option("--phases", type=click.Choice(["1", "3"]), default="1", show_default=True)
@click.option("--topology", type=click.Choice(TOPOLOGIES), default="dary", show_default=True)
@click.option("--subtrees", type=int, default=1, show_default=True, help="Subtrees of the clustered topology.")
@click.option("--impedance-range", type=(float, float), default=(0.01, 0.2), show_default=True)
@click.option("--total-load", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Write the feeder here instead of stdout.")
@guarded
def gen(nodes, branching, phases, topology, subtrees, impedance_range, total_load, seed, out_path):
    """
    Generate a seeded synthetic feeder file.
    """
    case = generate_feeder(
        nodes,
        branching=branching,
        phases=int(phases),
        topology=topology,
        subtrees=subtrees,
        impedance_range=impedance_range,
        total_load=total_load,
        seed=seed,
    )
    if out_path:
        dump_feeder(case, out_path)
        click.echo(click.style(f"Wrote {nodes}-node feeder to {out_path}", fg="green"), err=True)
    else:
        click.echo(json.dumps(serialize_feeder(case), indent=2))
