"""
Hierarchical execution of the primal-dual iteration.

Node agents, one regional coordinator (RC) per subtree, one central
coordinator (CC) and a physics actor standing in for the grid exchange
immutable messages in barrier-synchronized supersteps:

    1. nodes update (p, q, mu) and report their duals and setpoints
    2. RCs aggregate member duals per phase for the CC
    3. the CC computes the couplings between subtrees and unclustered nodes
    4. RCs add their intra-subtree couplings and hand each member its share
    5. the physics actor returns voltages and the substation power
    6. the CC broadcasts C0'(P0) and evaluates the stopping rule

Each RC only holds the impedances of its own subtree plus the root-to-slack
segment it receives from the CC. The CC only holds the reduced network.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import ExitStack
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import pandas as pd

from .clustering import OpCount, Partition, measured_op_count, require_valid
from .errors import BarrierTimeout, MissingAggregate, MissingCoupling, MissingMember
from .feeder import SubstationCost
from .opf import (
    DeviceBlock,
    IterateState,
    IterationMonitor,
    OpfProblem,
    SolveResult,
    check_stepsize,
    initial_state,
    local_update,
    refresh,
    should_stop,
)
from .sensitivity import ROTATION, PathImpedanceTable
from .utils import complex_pair

logger = logging.getLogger(__name__)

CC = "cc"
PHYSICS = "physics"


def node_actor(node: int) -> str:
    return f"node:{node}"


def rc_actor(k: int) -> str:
    return f"rc:{k}"


def coupling_weights(table: PathImpedanceTable, targets, sources) -> np.ndarray:
    """
    W[a, b] = 2 conj(Z_{j i}^{psi phi}) w^(psi - phi) for target (i, phi) and
    source (j, psi), so that s = W d gives alpha = Re(s) and beta = -Im(s).
    """
    weights = np.zeros((len(targets), len(sources)), dtype=complex)
    for a, (i, phi) in enumerate(targets):
        for b, (j, psi) in enumerate(sources):
            z = table.get(j, i)[psi, phi]
            weights[a, b] = 2.0 * np.conj(z) * ROTATION[psi, phi]
    return weights


########################################
# MESSAGES
########################################


class Message:
    kind = "message"

    def payload(self) -> dict:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                value = value.tolist()
            if isinstance(value, (list, tuple)):
                value = [complex_pair(v) if isinstance(v, complex) else _plain(v) for v in value]
            elif isinstance(value, complex):
                value = complex_pair(value)
            else:
                value = _plain(value)
            out[name] = value
        return out


def _plain(value):
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


@dataclass(frozen=True)
class MemberDual(Message):
    node: int
    d: tuple[float, ...]
    step_inf: float
    kind = "MemberDual"


@dataclass(frozen=True)
class UnclusteredDual(Message):
    node: int
    d: tuple[float, ...]
    step_inf: float
    kind = "UnclusteredDual"


@dataclass(frozen=True)
class DualAggregate(Message):
    """Per-phase sums of (mu_hi - mu_lo) over a subtree, indexed a, b, c."""

    subtree: int
    sums: tuple[float, float, float]
    step_inf: float
    kind = "DualAggregate"


@dataclass(frozen=True)
class OutCoupling(Message):
    """Per-phase coupling from outside the subtree, indexed a, b, c."""

    subtree: int
    s: tuple[complex, complex, complex]
    kind = "OutCoupling"


@dataclass(frozen=True)
class NodeCoupling(Message):
    """Coupling for each of the node's phases; alpha = Re(s), beta = -Im(s)."""

    node: int
    s: tuple[complex, ...]
    kind = "NodeCoupling"

    @property
    def alpha(self) -> np.ndarray:
        return np.array([value.real for value in self.s])

    @property
    def beta(self) -> np.ndarray:
        return np.array([-value.imag for value in self.s])


@dataclass(frozen=True)
class SubstationBroadcast(Message):
    dC0: float
    kind = "SubstationBroadcast"


@dataclass(frozen=True)
class Setpoint(Message):
    node: int
    p: tuple[float, ...]
    q: tuple[float, ...]
    kind = "Setpoint"


@dataclass(frozen=True)
class VoltageReading(Message):
    node: int
    v: tuple[float, ...]
    kind = "VoltageReading"


@dataclass(frozen=True)
class SubstationReading(Message):
    P0: float
    kind = "SubstationReading"


@dataclass(frozen=True)
class Provision(Message):
    """The root-to-slack impedance of a subtree root, sent once at setup."""

    subtree: int
    z: tuple[tuple[complex, ...], ...]
    kind = "Provision"

    def payload(self) -> dict:
        return {"subtree": self.subtree, "z": [[complex_pair(v) for v in row] for row in self.z]}


@dataclass(frozen=True)
class Envelope:
    iteration: int
    step: int
    sender: str
    recipient: str
    message: Message

    def to_dict(self) -> dict:
        return {
            "iter": self.iteration,
            "step": self.step,
            "from": self.sender,
            "to": self.recipient,
            "kind": self.message.kind,
            "payload": self.message.payload(),
        }


Outgoing = list[tuple[str, Message]]


########################################
# ACTORS
########################################


class Actor:
    def __init__(self, name: str):
        self.name = name
        self.inbox: list[Message] = []
        self.mults = 0
        self.adds = 0

    def deliver(self, message: Message):
        self.inbox.append(message)

    def take(self, message_type) -> list:
        taken = [m for m in self.inbox if isinstance(m, message_type)]
        self.inbox = [m for m in self.inbox if not isinstance(m, message_type)]
        return taken

    def count(self, mults: int, adds: int):
        self.mults += mults
        self.adds += adds


class NodeAgent(Actor):
    """Owns the injections and duals of one node's phases."""

    def __init__(self, node: int, phases: tuple[int, ...], block: DeviceBlock, coordinator: str, config):
        super().__init__(node_actor(node))
        self.node = node
        self.phases = phases
        self.block = block
        self.coordinator = coordinator
        self.config = config
        n = len(phases)
        self.p = np.zeros(n)
        self.q = np.zeros(n)
        self.mu_lo = np.zeros(n)
        self.mu_hi = np.zeros(n)
        self.v = np.zeros(n)
        self.alpha: Optional[np.ndarray] = None
        self.beta: Optional[np.ndarray] = None
        self.dC0: Optional[float] = None
        self.step_inf = 0.0

    def _dual_message(self) -> Message:
        d = tuple(float(x) for x in self.mu_hi - self.mu_lo)
        if self.coordinator == CC:
            return UnclusteredDual(node=self.node, d=d, step_inf=self.step_inf)
        return MemberDual(node=self.node, d=d, step_inf=self.step_inf)

    def _report(self) -> Outgoing:
        return [
            (self.coordinator, self._dual_message()),
            (PHYSICS, Setpoint(node=self.node, p=tuple(map(float, self.p)), q=tuple(map(float, self.q)))),
        ]

    def announce(self) -> Outgoing:
        """Report the current state without updating it (setup and coupling-only rounds)."""
        return self._report()

    def absorb(self):
        for message in self.take(NodeCoupling):
            self.alpha, self.beta = message.alpha, message.beta
        for message in self.take(VoltageReading):
            self.v = np.array(message.v)
        for message in self.take(SubstationBroadcast):
            self.dC0 = message.dC0

    def update(self) -> Outgoing:
        self.absorb()
        if self.alpha is None or self.dC0 is None:
            raise MissingCoupling(f"Node {self.node} has no coupling or substation broadcast for this iteration")
        old = np.concatenate([self.p, self.q, self.mu_lo, self.mu_hi])
        self.p, self.q, self.mu_lo, self.mu_hi = local_update(
            self.block, self.p, self.q, self.mu_lo, self.mu_hi, self.v, self.alpha, self.beta, self.dC0, self.config
        )
        new = np.concatenate([self.p, self.q, self.mu_lo, self.mu_hi])
        with np.errstate(invalid="ignore"):
            self.step_inf = float(np.max(np.abs(new - old), initial=0.0))
        self.alpha = self.beta = self.dC0 = None
        return self._report()


def rc_aggregate(rc: RegionalCoordinator) -> DualAggregate:
    """Per-phase sums of member duals, members in ascending index order."""
    duals = {m.node: m for m in rc.take(MemberDual)}
    missing = [node for node in rc.members if node not in duals]
    if missing:
        raise MissingMember(f"RC {rc.index} has no dual from members {missing}")
    rc.d = np.array([x for node in rc.members for x in duals[node].d], dtype=float)
    sums = [0.0, 0.0, 0.0]
    for phase in range(3):
        mask = rc.coordinate_phases == phase
        if mask.any():
            sums[phase] = float(np.sum(rc.d[mask]))
            rc.count(0, int(mask.sum()) - 1)
    step_inf = max((duals[node].step_inf for node in rc.members), default=0.0)
    return DualAggregate(subtree=rc.index, sums=tuple(sums), step_inf=step_inf)


def rc_distribute(rc: RegionalCoordinator, out: Optional[OutCoupling] = None) -> list[NodeCoupling]:
    """Intra-subtree coupling from the RC's own table plus the external part from the CC."""
    if out is None:
        received = rc.take(OutCoupling)
        if not received:
            raise MissingCoupling(f"RC {rc.index} has no out-coupling from the CC")
        out = received[-1]
    if rc.weights is None:
        raise MissingCoupling(f"RC {rc.index} was never provisioned with its root-to-slack impedance")
    m = len(rc.coordinates)
    s = rc.weights @ rc.d
    rc.count(m * m, m * (m - 1))
    s = s + np.array(out.s)[rc.coordinate_phases]
    rc.count(0, m)
    messages, start = [], 0
    for node in rc.members:
        width = rc.width[node]
        messages.append(NodeCoupling(node=node, s=tuple(complex(x) for x in s[start : start + width])))
        start += width
    return messages


class RegionalCoordinator(Actor):
    """
    Knows its subtree's lines only. The impedance table is built when the
    CC's Provision message supplies the root-to-slack segment.
    """

    def __init__(self, index: int, root: int, members, node_phases: dict, parent: dict, line_z: dict, audit=False):
        super().__init__(rc_actor(index))
        self.index = index
        self.root = root
        self.members = tuple(sorted(members))
        self.width = {node: len(node_phases[node]) for node in self.members}
        self.coordinates = tuple((node, phase) for node in self.members for phase in node_phases[node])
        self.coordinate_phases = np.array([phase for _, phase in self.coordinates], dtype=np.int64)
        self._parent = dict(parent)
        self._line_z = dict(line_z)
        self.audit = audit
        self.table: Optional[PathImpedanceTable] = None
        self.weights: Optional[np.ndarray] = None
        self.d = np.zeros(len(self.coordinates))

    def provision(self):
        for message in self.take(Provision):
            self.table = PathImpedanceTable(self.root, self._parent, self._line_z, base=np.array(message.z), audit=self.audit)
            self.weights = coupling_weights(self.table, self.coordinates, self.coordinates)
        return []

    def aggregate(self) -> Outgoing:
        return [(CC, rc_aggregate(self))]

    def distribute(self) -> Outgoing:
        return [(node_actor(message.node), message) for message in rc_distribute(self)]


def cc_compute_couplings(cc: CentralCoordinator) -> tuple[list[OutCoupling], list[NodeCoupling]]:
    """
    Couplings between subtrees and unclustered nodes from the reduced-network
    table: a subtree row sums every column outside its own subtree, an
    unclustered row sums every column.
    """
    aggregates = {m.subtree: m for m in cc.take(DualAggregate)}
    duals = {m.node: m for m in cc.take(UnclusteredDual)}
    missing = [f"subtree {k}" for k in range(len(cc.roots)) if k not in aggregates]
    missing += [f"node {node}" for node, _ in cc.unclustered if node not in duals]
    if missing:
        raise MissingAggregate(f"CC is missing {', '.join(missing)}")

    columns = [aggregates[k].sums[phase] for k, phase in cc.subtree_keys]
    for node, phases in cc.unclustered:
        columns.extend(duals[node].d)
    vector = np.array(columns, dtype=float)
    s = cc.weights @ vector if len(vector) else np.zeros(len(cc.row_keys), dtype=complex)
    used = cc.mask.sum(axis=1)
    cc.count(int(used.sum()), int(np.maximum(used - 1, 0).sum()))

    cc.step_inf = max(
        [m.step_inf for m in aggregates.values()] + [m.step_inf for m in duals.values()],
        default=0.0,
    )
    out = []
    for k in range(len(cc.roots)):
        values = [0j, 0j, 0j]
        for row, phase in cc.out_rows[k]:
            values[phase] = complex(s[row])
        out.append(OutCoupling(subtree=k, s=tuple(values)))
    nodes = []
    for node, _ in cc.unclustered:
        nodes.append(NodeCoupling(node=node, s=tuple(complex(s[row]) for row in cc.node_rows[node])))
    return out, nodes


class CentralCoordinator(Actor):
    """Knows the reduced network only: subtree roots, unclustered nodes and the lines joining them."""

    def __init__(
        self,
        table: PathImpedanceTable,
        roots,
        node_phases: dict,
        unclustered,
        substation_cost: SubstationCost,
        config,
        broadcast_to,
    ):
        super().__init__(CC)
        self.table = table
        self.roots = tuple(roots)
        self.unclustered = tuple((node, tuple(node_phases[node])) for node in unclustered)
        self.substation_cost = substation_cost
        self.config = config
        self.broadcast_to = tuple(broadcast_to)
        self.subtree_keys = [(k, phase) for k, root in enumerate(self.roots) for phase in node_phases[root]]
        self.row_keys = [(("subtree", k), phase) for k, phase in self.subtree_keys]
        self.row_keys += [(("node", node), phase) for node, phases in self.unclustered for phase in phases]
        targets = [(self.roots[k], phase) for k, phase in self.subtree_keys]
        targets += [(node, phase) for node, phases in self.unclustered for phase in phases]
        weights = coupling_weights(table, targets, targets)
        # a subtree's own aggregate is covered inside the subtree by its RC
        owners = [owner for owner, _ in self.row_keys]
        self.mask = np.array([[not (a[0] == "subtree" and a == b) for b in owners] for a in owners], dtype=bool)
        self.mask = self.mask.reshape(len(owners), len(owners))
        self.out_rows = {k: [] for k in range(len(self.roots))}
        self.node_rows = {node: [] for node, _ in self.unclustered}
        for row, ((what, key), phase) in enumerate(self.row_keys):
            if what == "subtree":
                self.out_rows[key].append((row, phase))
            else:
                self.node_rows[key].append(row)
        self.weights = np.where(self.mask, weights, 0.0)
        self.P0: Optional[float] = None
        self.step_inf = 0.0
        self.stop = False

    def provision(self) -> Outgoing:
        return [
            (rc_actor(k), Provision(subtree=k, z=tuple(tuple(complex(x) for x in row) for row in self.table.get(root, root))))
            for k, root in enumerate(self.roots)
        ]

    def couple(self) -> Outgoing:
        out, nodes = cc_compute_couplings(self)
        return [(rc_actor(m.subtree), m) for m in out] + [(node_actor(m.node), m) for m in nodes]

    def broadcast(self, check_stop: bool = True) -> Outgoing:
        readings = self.take(SubstationReading)
        if not readings:
            raise MissingAggregate("CC has no substation reading")
        P0 = readings[-1].P0
        if check_stop and self.P0 is not None:
            self.stop = should_stop(P0 - self.P0, self.step_inf, self.config)
        self.P0 = P0
        message = SubstationBroadcast(dC0=float(self.substation_cost.derivative(P0)))
        return [(name, message) for name in self.broadcast_to]


class PhysicsActor(Actor):
    """The grid: turns every node's setpoint into voltages and the substation power."""

    def __init__(self, problem: OpfProblem):
        super().__init__(PHYSICS)
        self.problem = problem
        self.v: Optional[np.ndarray] = None
        self.P0: Optional[float] = None

    def measure(self) -> Outgoing:
        feeder = self.problem.feeder
        setpoints = {m.node: m for m in self.take(Setpoint)}
        missing = [node for node in range(1, feeder.n_nodes) if node not in setpoints]
        if missing:
            raise MissingMember(f"Physics actor has no setpoint from nodes {missing[:10]}")
        p = np.array([x for node in range(1, feeder.n_nodes) for x in setpoints[node].p])
        q = np.array([x for node in range(1, feeder.n_nodes) for x in setpoints[node].q])
        self.v, self.P0 = refresh(self.problem, p, q)
        outgoing: Outgoing = [(CC, SubstationReading(P0=self.P0))]
        for node in range(1, feeder.n_nodes):
            outgoing.append((node_actor(node), VoltageReading(node=node, v=tuple(map(float, self.v[feeder.xi_slice(node)])))))
        return outgoing


########################################
# ENGINE
########################################


Latency = Union[float, Callable[[str, str], float]]


@dataclass
class EngineOptions:
    """
    Execution knobs that never change the iterates.

    latency is a per-link delay in simulated seconds (a number or a function
    of sender and recipient); a superstep whose slowest message exceeds
    barrier_timeout raises BarrierTimeout. The simulated clock never sleeps.
    """

    schedule_seed: Optional[int] = None
    workers: int = 1
    latency: Latency = 0.0
    barrier_timeout: float = math.inf
    message_log: Optional[str] = None
    record_states: bool = False
    audit: bool = False


@dataclass
class HierarchicalResult(SolveResult):
    op_count: OpCount = field(default_factory=OpCount)
    actor_timing: list[dict] = field(default_factory=list)
    per_iter_wallclock: float = 0.0
    per_iter_wallclock_parallel: float = 0.0
    simulated_time: float = 0.0


class HierarchicalEngine:
    def __init__(self, problem: OpfProblem, partition: Partition, options: Optional[EngineOptions] = None):
        self.problem = problem
        self.partition = require_valid(problem.feeder, partition)
        self.options = options or EngineOptions()
        feeder = problem.feeder
        node_phases = {node: feeder.node_phases[node] for node in range(feeder.n_nodes)}
        subtree_of = self.partition.subtree_of()

        self.nodes = []
        for node in range(1, feeder.n_nodes):
            coordinator = rc_actor(subtree_of[node]) if node in subtree_of else CC
            block = problem.block.take(feeder.xi_slice(node))
            self.nodes.append(NodeAgent(node, feeder.node_phases[node], block, coordinator, problem.config))

        self.rcs = []
        for k, subtree in enumerate(self.partition.subtrees):
            parent = {node: (None if node == subtree.root else feeder.parent[node]) for node in subtree.members}
            line_z = {node: feeder.line_into[node].full_matrix() for node in subtree.members if node != subtree.root}
            self.rcs.append(
                RegionalCoordinator(k, subtree.root, subtree.members, node_phases, parent, line_z, audit=self.options.audit)
            )

        reduced = {0, *self.partition.roots, *self.partition.unclustered}
        table = PathImpedanceTable.for_scope(feeder, reduced, 0, audit=self.options.audit)
        self.cc = CentralCoordinator(
            table,
            self.partition.roots,
            node_phases,
            self.partition.unclustered,
            problem.substation_cost,
            problem.config,
            [a.name for a in self.nodes],
        )
        self.physics = PhysicsActor(problem)
        self.actors = {a.name: a for a in [*self.nodes, *self.rcs, self.cc, self.physics]}

        self._rng = None if self.options.schedule_seed is None else np.random.default_rng(self.options.schedule_seed)
        self._pool: Optional[ThreadPoolExecutor] = None
        self._log = None
        self.clock = 0.0
        self.iteration = 0
        self._timing: dict[str, list[float]] = {}
        self._step_max: list[float] = []
        self._step_latency = 0.0
        self._provisioned = False

    # Superstep machinery.

    def _delay(self, sender: str, recipient: str) -> float:
        latency = self.options.latency
        return float(latency(sender, recipient)) if callable(latency) else float(latency)

    def _order(self, actors):
        actors = list(actors)
        if self._rng is not None:
            actors = [actors[k] for k in self._rng.permutation(len(actors))]
        return actors

    def _superstep(self, step: int, actors, action: str):
        """Run `action` on every actor, then deliver everything they sent at the barrier."""
        actors = list(actors)

        def run(actor):
            mults, adds = actor.mults, actor.adds
            start = time.perf_counter()
            outgoing = getattr(actor, action)()
            elapsed = time.perf_counter() - start
            return outgoing, elapsed, actor.mults - mults, actor.adds - adds

        ordered = self._order(actors)
        if self._pool is not None and len(ordered) > 1:
            results = dict(zip((a.name for a in ordered), self._pool.map(run, ordered)))
        else:
            results = {actor.name: run(actor) for actor in ordered}

        slowest = 0.0
        for actor in actors:
            outgoing, elapsed, mults, adds = results[actor.name]
            row = self._timing.setdefault(actor.name, [0.0, 0, 0])
            row[0] += elapsed
            row[1] += mults
            row[2] += adds
            slowest = max(slowest, elapsed)
            for recipient, message in outgoing:
                delay = self._delay(actor.name, recipient)
                if delay > self.options.barrier_timeout:
                    raise BarrierTimeout(
                        f"Message {message.kind} from {actor.name} to {recipient} needs {delay:g}s, "
                        f"over the {self.options.barrier_timeout:g}s barrier at step {step} of iteration {self.iteration}"
                    )
                envelope = Envelope(self.iteration, step, actor.name, recipient, message)
                self._step_latency = max(self._step_latency, delay)
                if self._log is not None:
                    self._log.write(json.dumps(envelope.to_dict(), sort_keys=True) + "\n")
                self.actors[recipient].deliver(message)
        self._step_max.append(slowest)
        self.clock += self._step_latency
        self._step_latency = 0.0

    def _couplings(self):
        self._superstep(2, self.rcs, "aggregate")
        self._superstep(3, [self.cc], "couple")
        self._superstep(4, self.rcs, "distribute")

    def _setup(self, state: IterateState):
        self._step_latency = 0.0
        if not self._provisioned:
            self._superstep(0, [self.cc], "provision")
            self._superstep(0, self.rcs, "provision")
            self._provisioned = True
        self.load_state(state)
        self._superstep(1, self.nodes, "announce")
        self._couplings()
        self._superstep(5, [self.physics], "measure")
        self.cc.P0 = None
        self._superstep(6, [self.cc], "broadcast")

    def load_state(self, state: IterateState):
        feeder = self.problem.feeder
        for agent in self.nodes:
            idx = feeder.xi_slice(agent.node)
            agent.p, agent.q = state.p[idx].copy(), state.q[idx].copy()
            agent.mu_lo, agent.mu_hi = state.mu_lo[idx].copy(), state.mu_hi[idx].copy()
            agent.step_inf = 0.0

    def collect_state(self) -> IterateState:
        """Assemble the global iterate from the node agents (an observer's view, not part of the protocol)."""
        return IterateState(
            p=np.concatenate([a.p for a in self.nodes]),
            q=np.concatenate([a.q for a in self.nodes]),
            mu_lo=np.concatenate([a.mu_lo for a in self.nodes]),
            mu_hi=np.concatenate([a.mu_hi for a in self.nodes]),
            v=self.physics.v.copy(),
            P0=self.physics.P0,
            iteration=self.iteration,
        )

    def step(self):
        self.iteration += 1
        self._superstep(1, self.nodes, "update")
        self._couplings()
        self._superstep(5, [self.physics], "measure")
        self._superstep(6, [self.cc], "broadcast")

    def run(self, initial: Optional[IterateState] = None) -> HierarchicalResult:
        problem, config = self.problem, self.problem.config
        warning_messages = check_stepsize(problem)
        state = initial_state(problem) if initial is None else initial
        monitor = IterationMonitor(problem, record_states=self.options.record_states)
        logger.info(
            f"Hierarchical solve: {len(self.nodes)} nodes, K={self.partition.K}, "
            f"{len(self.partition.unclustered)} unclustered, eps={config.eps:g}, mode={config.mode}"
        )
        timing_rows = []
        per_iter, per_iter_parallel, iter_ops = [], [], None
        with ExitStack() as stack:
            if self.options.workers > 1:
                self._pool = stack.enter_context(ThreadPoolExecutor(max_workers=self.options.workers))
            if self.options.message_log:
                self._log = stack.enter_context(open(self.options.message_log, "w", encoding="utf-8"))
            try:
                self.iteration = state.iteration
                self._setup(state)
                for _ in range(config.max_iters):
                    self._timing, self._step_max = {}, []
                    self.step()
                    current = self.collect_state()
                    for actor, (seconds, mults, adds) in sorted(self._timing.items()):
                        timing_rows.append(
                            {"iter": self.iteration, "actor": actor, "micros": seconds * 1e6, "mults": mults, "adds": adds}
                        )
                    per_iter.append(sum(seconds for seconds, _, _ in self._timing.values()))
                    per_iter_parallel.append(sum(self._step_max))
                    if iter_ops is None:
                        iter_ops = {actor: (mults, adds) for actor, (_, mults, adds) in self._timing.items() if mults or adds}
                    previous, state = state, current
                    if monitor.observe(previous, state, stop=self.cc.stop):
                        break
            finally:
                self._pool = None
                self._log = None

        base = monitor.result(state, warning_messages)
        result = HierarchicalResult(
            final=base.final,
            status=base.status,
            trajectory=base.trajectory,
            warnings=base.warnings,
            states=base.states,
            op_count=measured_op_count(iter_ops or {}),
            actor_timing=timing_rows,
            per_iter_wallclock=float(np.mean(per_iter)) if per_iter else 0.0,
            per_iter_wallclock_parallel=float(np.mean(per_iter_parallel)) if per_iter_parallel else 0.0,
            simulated_time=self.clock,
        )
        logger.info(f"Hierarchical solve finished: {result.status} after {result.iterations} iterations")
        return result

    def op_count(self) -> OpCount:
        """Coupling operations counted by the actors so far."""
        return measured_op_count({a.name: (a.mults, a.adds) for a in self.actors.values() if a.mults or a.adds})

    def coupling(self, d) -> tuple[np.ndarray, np.ndarray]:
        """
        Run the aggregation, coupling and distribution steps once for the
        given (mu_hi - mu_lo) and return the global (alpha, beta).
        """
        feeder = self.problem.feeder
        d = np.asarray(d, dtype=float)
        self._step_latency = 0.0
        if not self._provisioned:
            self._superstep(0, [self.cc], "provision")
            self._superstep(0, self.rcs, "provision")
            self._provisioned = True
        for agent in self.nodes:
            idx = feeder.xi_slice(agent.node)
            agent.mu_hi, agent.mu_lo = d[idx].copy(), np.zeros_like(d[idx])
        self._superstep(1, self.nodes, "announce")
        self.physics.take(Setpoint)
        self._couplings()
        for agent in self.nodes:
            agent.absorb()
        alpha = np.concatenate([a.alpha for a in self.nodes])
        beta = np.concatenate([a.beta for a in self.nodes])
        return alpha, beta


def run_hierarchical(
    problem: OpfProblem,
    partition: Partition,
    options: Optional[EngineOptions] = None,
    initial: Optional[IterateState] = None,
) -> HierarchicalResult:
    return HierarchicalEngine(problem, partition, options).run(initial)


def hierarchical_coupling(engine: HierarchicalEngine, d) -> tuple[np.ndarray, np.ndarray]:
    return engine.coupling(d)


def write_actor_timing_csv(result: HierarchicalResult, path):
    frame = pd.DataFrame(result.actor_timing, columns=["iter", "actor", "micros", "mults", "adds"])
    frame.to_csv(path, index=False, float_format="%.17g")
