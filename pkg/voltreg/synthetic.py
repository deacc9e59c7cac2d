"""
Seeded synthetic feeders for benchmarks and tests.

Line impedances are drawn log-uniform in the impedance range. Every phase of
every node carries one device: a controllable load box, a PV inverter or a
storage unit, with quadratic costs around a randomized nominal point.
"""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from .clustering import balanced_sizes
from .errors import ConfigError
from .feeder import (
    Box,
    ClusterDef,
    Device,
    Feeder,
    FeederCase,
    Line,
    PvInverter,
    QuadraticCost,
    Storage,
    SubstationCost,
)

logger = logging.getLogger(__name__)

TOPOLOGIES = ("dary", "random", "clustered")
DEFAULT_IMPEDANCE_RANGE = (0.01, 0.2)
# mutual impedance as a fraction of the self impedance on 3-phase lines
MUTUAL_RANGE = (0.2, 0.4)


def _parents(nodes: int, branching: int, topology: str, subtrees: int, rng) -> tuple[list[int], Optional[list[int]]]:
    if topology == "dary":
        return [(k - 1) // branching for k in range(1, nodes + 1)], None
    if topology == "random":
        return [int(rng.integers(0, k)) for k in range(1, nodes + 1)], None
    if not 1 <= subtrees <= nodes:
        raise ConfigError(f"clustered topology needs 1 <= subtrees <= nodes, got {subtrees}")
    parents, roots, start = [], [], 1
    for size in balanced_sizes(nodes, subtrees):
        roots.append(start)
        for k in range(size):
            # breadth-first d-ary numbering inside the block, hung from the slack
            parents.append(0 if k == 0 else start + (k - 1) // branching)
        start += size
    return parents, roots


def _impedance(rng, phases: int, low: float, high: float):
    def draw():
        return float(np.exp(rng.uniform(np.log(low), np.log(high))))

    if phases == 1:
        return ((complex(draw(), draw()),),)
    self_z = [complex(draw(), draw()) for _ in range(3)]
    mutual = rng.uniform(*MUTUAL_RANGE)
    z = [[self_z[r] if r == c else mutual * 0.5 * (self_z[r] + self_z[c]) for c in range(3)] for r in range(3)]
    return tuple(tuple(row) for row in z)


def _device(rng, node: int, phase: int, share: float) -> Device:
    cost_scale = rng.uniform(0.5, 1.5, size=2)
    kind = rng.choice(["load", "load", "pv", "storage"])
    if kind == "pv":
        p_av = share * rng.uniform(0.5, 1.0)
        feasible = PvInverter(p_av=p_av, capacity=1.1 * p_av)
        p0 = p_av
    elif kind == "storage":
        feasible = Storage(p_min=-share, p_max=share, capacity=1.2 * share)
        p0 = share * rng.uniform(-0.5, 0.5)
    else:
        feasible = Box(p_min=-1.5 * share, p_max=0.0, q_min=-0.5 * share, q_max=0.5 * share)
        p0 = -share * rng.uniform(0.5, 1.0)
    cost = QuadraticCost(cp=float(cost_scale[0]), cq=float(cost_scale[1]), p0=float(p0), q0=0.0)
    return Device(node=node, phase=phase, feasible=feasible, cost=cost)


def generate_feeder(
    nodes: int,
    branching: int = 2,
    phases: int = 1,
    topology: str = "dary",
    subtrees: int = 1,
    impedance_range: tuple[float, float] = DEFAULT_IMPEDANCE_RANGE,
    total_load: float = 0.5,
    seed: int = 0,
) -> FeederCase:
    """
    Build a feeder with `nodes` non-slack nodes.

    "dary" fills a balanced tree breadth first, "random" attaches each node
    to a uniformly drawn earlier node, and "clustered" hangs `subtrees`
    balanced d-ary blocks from the slack and records them as clusters.
    """
    if nodes < 1 or branching < 1:
        raise ConfigError("nodes and branching must be at least 1")
    if phases not in (1, 3):
        raise ConfigError(f"phases must be 1 or 3, got {phases}")
    if topology not in TOPOLOGIES:
        raise ConfigError(f"topology must be one of {TOPOLOGIES}, got {topology!r}")
    low, high = impedance_range
    if not 0 < low <= high:
        raise ConfigError(f"impedance range must satisfy 0 < lo <= hi, got {impedance_range}")

    rng = np.random.default_rng(seed)
    parents, roots = _parents(nodes, branching, topology, subtrees, rng)
    phase_set = (0,) if phases == 1 else (0, 1, 2)
    lines = tuple(
        Line(from_node=parent, to_node=k, phases=phase_set, z=_impedance(rng, phases, low, high))
        for k, parent in enumerate(parents, start=1)
    )
    feeder = Feeder(
        node_ids=tuple(str(k) for k in range(nodes + 1)),
        node_phases=(phase_set,) * (nodes + 1),
        lines=lines,
        slack_v2=tuple((phase, 1.0) for phase in phase_set),
    )
    share = total_load / (nodes * len(phase_set))
    devices = tuple(_device(rng, node, phase, share) for node in range(1, nodes + 1) for phase in phase_set)
    clusters = None if roots is None else tuple(ClusterDef(root) for root in roots)
    logger.info(f"Generated {topology} feeder: {nodes} nodes, {phases} phase(s), seed {seed}")
    return FeederCase(feeder=feeder, devices=devices, substation_cost=SubstationCost(), clusters=clusters)
