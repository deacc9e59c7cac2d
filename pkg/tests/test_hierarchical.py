import json

import numpy as np
import pytest

from tests.helpers import load_device, make_case, make_feeder
from voltreg.clustering import auto_partition, central_op_count, make_partition, partition_from_clusters, recommend_k
from voltreg.config import SolverConfig
from voltreg.errors import BarrierTimeout, MissingAggregate, MissingCoupling, MissingMember, ScopeError
from voltreg.hierarchical import (
    EngineOptions,
    HierarchicalEngine,
    MemberDual,
    OutCoupling,
    cc_compute_couplings,
    hierarchical_coupling,
    rc_aggregate,
    rc_distribute,
    run_hierarchical,
    write_actor_timing_csv,
)
from voltreg.opf import build_problem, estimate_constants, initial_state, solve_centralized
from voltreg.synthetic import generate_feeder


def _tight(**changes):
    """A narrow voltage band so the duals become active within a few iterations."""
    settings = dict(eps=0.01, eta=0.1, vmin=0.9999, vmax=1.0001, max_iters=40, check_stepsize=False)
    settings.update(changes)
    return SolverConfig(**settings)


def _assert_same_runs(central, hier, atol=1e-10):
    assert hier.status == central.status
    assert len(hier.states) == len(central.states)
    for mine, theirs in zip(hier.states, central.states):
        assert mine.iteration == theirs.iteration
        for name in ("p", "q", "mu_lo", "mu_hi", "v"):
            np.testing.assert_allclose(getattr(mine, name), getattr(theirs, name), rtol=0, atol=atol)
        assert mine.P0 == pytest.approx(theirs.P0, abs=atol)


@pytest.fixture
def fork_case():
    # 0 -> 1 -> {2, 3}
    feeder = make_feeder([0, 1, 1], z=[0.1 + 0.1j, 0.2 + 0.1j, 0.1 + 0.3j])
    return make_case(feeder, [load_device(k, -0.05) for k in (1, 2, 3)])


class TestMatchesCentralized:
    @pytest.mark.parametrize("K", [1, 3, 6])
    def test_binary_tree(self, binary63, K):
        problem = build_problem(binary63, _tight())
        partition = auto_partition(binary63.feeder, K)
        central = solve_centralized(problem, record_states=True)
        hier = run_hierarchical(problem, partition, EngineOptions(record_states=True))
        _assert_same_runs(central, hier)

    def test_three_phase(self, random3phase):
        problem = build_problem(random3phase, _tight(max_iters=25))
        partition = auto_partition(random3phase.feeder, 4)
        central = solve_centralized(problem, record_states=True)
        hier = run_hierarchical(problem, partition, EngineOptions(record_states=True))
        _assert_same_runs(central, hier)

    def test_whole_feeder_in_one_subtree(self, line3):
        problem = build_problem(line3, _tight())
        central = solve_centralized(problem, record_states=True)
        hier = run_hierarchical(problem, make_partition([(1, [1, 2])]), EngineOptions(record_states=True))
        _assert_same_runs(central, hier)

    def test_every_node_unclustered(self, star8):
        problem = build_problem(star8, _tight())
        partition = make_partition([], range(1, 9))
        central = solve_centralized(problem, record_states=True)
        hier = run_hierarchical(problem, partition, EngineOptions(record_states=True))
        _assert_same_runs(central, hier)

    def test_converges_to_the_same_point(self, undervoltage_line3, regularized_config):
        problem = build_problem(undervoltage_line3, regularized_config)
        central = solve_centralized(problem)
        hier = run_hierarchical(problem, make_partition([(2, [2])], [1]))
        assert hier.status == central.status == "converged"
        assert abs(hier.iterations - central.iterations) <= 1
        np.testing.assert_allclose(hier.final.stacked(), central.final.stacked(), atol=1e-10)

    def test_feedback_mode(self, line3):
        problem = build_problem(line3, _tight(mode="feedback", max_iters=15))
        central = solve_centralized(problem, record_states=True)
        hier = run_hierarchical(problem, make_partition([(2, [2])], [1]), EngineOptions(record_states=True))
        _assert_same_runs(central, hier)

    @pytest.mark.parametrize(
        "name, split",
        [
            ("line3", lambda feeder: make_partition([(2, [2])], [1])),
            ("tri2", lambda feeder: make_partition([(1, [1])])),
            ("star8", lambda feeder: make_partition([], range(1, 9))),
            ("binary63", lambda feeder: auto_partition(feeder, 6)),
            ("random3phase200", lambda feeder: auto_partition(feeder, 6)),
        ],
        ids=["line3", "tri2", "all-unclustered", "binary63", "random3phase200"],
    )
    def test_two_hundred_iterations(self, name, split, request):
        case = request.getfixturevalue(name)
        config = _tight(max_iters=200, sigma=1e-300, sigma_z=1e-300)
        problem = build_problem(case, config)
        bound = estimate_constants(problem).stepsize_bound
        problem = build_problem(case, config.replace(eps=0.5 * bound), pack=problem.pack)
        central = solve_centralized(problem, record_states=True)
        hier = run_hierarchical(problem, split(case.feeder), EngineOptions(record_states=True))
        assert central.iterations == 200
        _assert_same_runs(central, hier, atol=1e-9)

    def test_random_start(self, binary63):
        problem = build_problem(binary63, _tight(max_iters=10))
        start = initial_state(problem, np.random.default_rng(4))
        central = solve_centralized(problem, initial=start, record_states=True)
        hier = run_hierarchical(problem, auto_partition(binary63.feeder, 4), EngineOptions(record_states=True), start)
        _assert_same_runs(central, hier)


class TestCoupling:
    def test_matches_dense_products(self, random3phase, rng):
        problem = build_problem(random3phase, SolverConfig())
        engine = HierarchicalEngine(problem, auto_partition(random3phase.feeder, 3))
        d = rng.normal(size=problem.n)
        alpha, beta = hierarchical_coupling(engine, d)
        np.testing.assert_allclose(alpha, problem.pack.R.T @ d, atol=1e-12)
        np.testing.assert_allclose(beta, problem.pack.X.T @ d, atol=1e-12)

    def test_clustered_synthetic(self, rng):
        case = generate_feeder(90, phases=3, topology="clustered", subtrees=5, seed=8)
        problem = build_problem(case, SolverConfig())
        engine = HierarchicalEngine(problem, partition_from_clusters(case.feeder, case.clusters))
        d = rng.normal(size=problem.n)
        alpha, beta = engine.coupling(d)
        np.testing.assert_allclose(alpha, problem.pack.R.T @ d, atol=1e-12)
        np.testing.assert_allclose(beta, problem.pack.X.T @ d, atol=1e-12)

    def test_runs_without_dense_matrices(self, binary63, rng):
        dense = build_problem(binary63, SolverConfig())
        sparse = build_problem(binary63, SolverConfig(), sensitivities=False)
        partition = auto_partition(binary63.feeder, 4)
        d = rng.normal(size=dense.n)
        alpha, beta = HierarchicalEngine(sparse, partition).coupling(d)
        np.testing.assert_allclose(alpha, dense.pack.R.T @ d, atol=1e-12)
        np.testing.assert_allclose(beta, dense.pack.X.T @ d, atol=1e-12)


class TestActors:
    def test_rc_aggregate(self, fork_case):
        engine = HierarchicalEngine(build_problem(fork_case, SolverConfig()), make_partition([(1, [1, 2, 3])]))
        rc = engine.rcs[0]
        for node, d in ((3, 0.3), (1, 0.1), (2, 0.2)):
            rc.deliver(MemberDual(node=node, d=(d,), step_inf=d / 10))
        aggregate = rc_aggregate(rc)
        assert aggregate.sums == pytest.approx((0.6, 0.0, 0.0))
        assert aggregate.step_inf == pytest.approx(0.03)
        np.testing.assert_allclose(rc.d, [0.1, 0.2, 0.3])
        assert (rc.mults, rc.adds) == (0, 2)

    def test_rc_aggregate_missing_member(self, fork_case):
        engine = HierarchicalEngine(build_problem(fork_case, SolverConfig()), make_partition([(1, [1, 2, 3])]))
        rc = engine.rcs[0]
        rc.deliver(MemberDual(node=1, d=(0.1,), step_inf=0.0))
        with pytest.raises(MissingMember, match=r"\[2, 3\]"):
            rc_aggregate(rc)

    def test_rc_distribute_adds_the_outside_part(self, fork_case):
        engine = HierarchicalEngine(build_problem(fork_case, SolverConfig()), make_partition([(1, [1, 2, 3])]))
        engine.coupling(np.zeros(3))
        rc = engine.rcs[0]
        messages = rc_distribute(rc, OutCoupling(subtree=0, s=(0.6 - 0.6j, 0j, 0j)))
        assert [m.node for m in messages] == [1, 2, 3]
        for message in messages:
            np.testing.assert_allclose(message.alpha, [0.6])
            np.testing.assert_allclose(message.beta, [0.6])

    def test_rc_distribute_without_out_coupling(self, fork_case):
        engine = HierarchicalEngine(build_problem(fork_case, SolverConfig()), make_partition([(1, [1, 2, 3])]))
        with pytest.raises(MissingCoupling):
            rc_distribute(engine.rcs[0])

    def test_cc_needs_every_aggregate(self, fork_case):
        engine = HierarchicalEngine(build_problem(fork_case, SolverConfig()), make_partition([(2, [2])], [1, 3]))
        with pytest.raises(MissingAggregate, match="subtree 0"):
            cc_compute_couplings(engine.cc)

    def test_cc_couples_across_subtrees(self, fork_case):
        feeder = fork_case.feeder
        problem = build_problem(fork_case, SolverConfig())
        engine = HierarchicalEngine(problem, make_partition([(2, [2]), (3, [3])], [1]))
        d = np.array([0.0, 1.0, 0.0])
        alpha, _ = engine.coupling(d)
        # only node 2 carries a dual; every node sees it through its common path with 2
        z1 = feeder.cumulative_z[1][0, 0]
        z2 = feeder.cumulative_z[2][0, 0]
        np.testing.assert_allclose(alpha, [2 * z1.real, 2 * z2.real, 2 * z1.real])

    def test_node_update_needs_its_coupling(self, fork_case):
        engine = HierarchicalEngine(build_problem(fork_case, SolverConfig()), make_partition([], [1, 2, 3]))
        with pytest.raises(MissingCoupling):
            engine.nodes[0].update()


class TestExecution:
    def test_schedule_and_workers_do_not_change_iterates(self, binary63):
        problem = build_problem(binary63, _tight(max_iters=15))
        partition = auto_partition(binary63.feeder, 5)
        plain = run_hierarchical(problem, partition)
        shuffled = run_hierarchical(problem, partition, EngineOptions(schedule_seed=3))
        threaded = run_hierarchical(problem, partition, EngineOptions(workers=4, schedule_seed=9))
        for other in (shuffled, threaded):
            np.testing.assert_array_equal(other.final.stacked(), plain.final.stacked())
            assert other.iterations == plain.iterations

    def test_barrier_timeout(self, line3):
        problem = build_problem(line3, _tight())
        options = EngineOptions(latency=2.0, barrier_timeout=1.0)
        with pytest.raises(BarrierTimeout):
            run_hierarchical(problem, make_partition([(2, [2])], [1]), options)

    def test_slow_link_only(self, line3):
        problem = build_problem(line3, _tight())

        def latency(sender, recipient):
            return 5.0 if sender == "physics" else 0.1

        with pytest.raises(BarrierTimeout, match="physics"):
            run_hierarchical(problem, make_partition([(2, [2])], [1]), EngineOptions(latency=latency, barrier_timeout=1.0))

    def test_simulated_clock(self, line3):
        problem = build_problem(line3, _tight(max_iters=3))
        result = run_hierarchical(problem, make_partition([(1, [1, 2])]), EngineOptions(latency=0.1))
        # seven setup supersteps carry messages, then six per iteration
        assert result.simulated_time == pytest.approx(0.7 + 0.6 * result.iterations)

    def test_message_log(self, tmp_path, line3):
        path = tmp_path / "messages.jsonl"
        problem = build_problem(line3, _tight(max_iters=2))
        run_hierarchical(problem, make_partition([(2, [2])], [1]), EngineOptions(message_log=str(path)))
        records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
        assert records[0]["kind"] == "Provision"
        assert records[0]["step"] == 0
        assert set(records[0]) == {"iter", "step", "from", "to", "kind", "payload"}
        kinds = {r["kind"] for r in records}
        assert {"MemberDual", "UnclusteredDual", "DualAggregate", "OutCoupling", "NodeCoupling"} <= kinds
        assert {"Setpoint", "VoltageReading", "SubstationReading", "SubstationBroadcast"} <= kinds
        assert max(r["iter"] for r in records) == 2
        steps = [r["step"] for r in records if r["iter"] == 2]
        assert steps == sorted(steps)

    def test_actor_timing(self, tmp_path, line3):
        problem = build_problem(line3, _tight(max_iters=4))
        result = run_hierarchical(problem, make_partition([(1, [1, 2])]))
        path = tmp_path / "actor_timing.csv"
        write_actor_timing_csv(result, path)
        header = path.read_text(encoding="utf-8").splitlines()[0]
        assert header == "iter,actor,micros,mults,adds"
        assert {row["actor"] for row in result.actor_timing} >= {"cc", "physics", "rc:0", "node:1", "node:2"}
        assert result.per_iter_wallclock >= result.per_iter_wallclock_parallel > 0


class TestOperationCounts:
    def test_single_subtree(self, line3):
        engine = HierarchicalEngine(build_problem(line3, SolverConfig()), make_partition([(1, [1, 2])]))
        engine.coupling(np.ones(2))
        assert engine.op_count().breakdown == {"rc:0": (4, 5)}

    def test_run_reports_one_iteration(self, line3):
        result = run_hierarchical(build_problem(line3, _tight(max_iters=5)), make_partition([(1, [1, 2])]))
        assert result.op_count.breakdown == {"rc:0": (4, 5)}

    def test_far_below_centralized(self, rng):
        N = 1024
        case = generate_feeder(N, topology="clustered", subtrees=recommend_k(N), seed=0)
        problem = build_problem(case, SolverConfig(), sensitivities=False)
        engine = HierarchicalEngine(problem, partition_from_clusters(case.feeder, case.clusters))
        engine.coupling(rng.random(N))
        assert engine.op_count().total < 0.1 * central_op_count(N).total


class TestInformationScope:
    def test_tables_stay_in_scope(self, binary63, rng):
        feeder = binary63.feeder
        partition = auto_partition(feeder, 4)
        problem = build_problem(binary63, SolverConfig())
        engine = HierarchicalEngine(problem, partition, EngineOptions(audit=True))
        engine.coupling(rng.normal(size=problem.n))
        for rc, subtree in zip(engine.rcs, partition.subtrees):
            assert rc.table.scope == frozenset(subtree.members)
            assert {node for pair in rc.table.accessed for node in pair} <= set(subtree.members)
        reduced = {0, *partition.roots, *partition.unclustered}
        assert engine.cc.table.scope == frozenset(reduced)
        assert {node for pair in engine.cc.table.accessed for node in pair} <= reduced

    def test_rc_cannot_read_outside_its_subtree(self, fork_case):
        engine = HierarchicalEngine(build_problem(fork_case, SolverConfig()), make_partition([(2, [2])], [1, 3]))
        engine.coupling(np.zeros(3))
        with pytest.raises(ScopeError):
            engine.rcs[0].table.get(1, 2)
