"""
Radial multi-phase feeders, devices and costs.

A feeder is indexed densely: node 0 is the slack bus and every other node has
exactly one incoming line. Phases are encoded a=0, b=1, c=2. Quantities are
per-unit on the declared base.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Union

import importlib_resources
import networkx as nx
import numpy as np
from pydantic import ValidationError

from .errors import DeviceError, DimensionError, ParseError, PhaseError, TopologyError, UnknownNode
from .schema import PHASE_NAMES, FeederFile, parse_phase

logger = logging.getLogger(__name__)

BUILTIN_PREFIX = "builtin:"


def phase_label(phases) -> str:
    """Render a phase set (or a single phase) as letters, e.g. (0, 2) -> 'ac'."""
    if isinstance(phases, (int, np.integer)):
        return PHASE_NAMES[phases]
    return "".join(PHASE_NAMES[phase] for phase in phases)


########################################
# FEASIBLE SETS AND COSTS
########################################


@dataclass(frozen=True)
class Box:
    """Per-axis interval constraints on (p, q)."""

    p_min: float
    p_max: float
    q_min: float
    q_max: float
    kind = "box"

    def __post_init__(self):
        if not (self.p_min <= self.p_max and self.q_min <= self.q_max):
            raise DeviceError(f"Empty box: p in [{self.p_min}, {self.p_max}], q in [{self.q_min}, {self.q_max}]")

    def box_disk(self):
        return self.p_min, self.p_max, self.q_min, self.q_max, math.inf

    def to_dict(self):
        return {"kind": "box", "p_min": self.p_min, "p_max": self.p_max, "q_min": self.q_min, "q_max": self.q_max}


@dataclass(frozen=True)
class PvInverter:
    """0 <= p <= p_av and p^2 + q^2 <= capacity^2."""

    p_av: float
    capacity: float
    kind = "pv"

    def __post_init__(self):
        if self.p_av < 0 or self.capacity <= 0:
            raise DeviceError(f"PV inverter needs p_av >= 0 and capacity > 0, got {self.p_av}, {self.capacity}")

    def box_disk(self):
        return 0.0, self.p_av, -math.inf, math.inf, self.capacity

    def to_dict(self):
        return {"kind": "pv", "p_av": self.p_av, "capacity": self.capacity}


@dataclass(frozen=True)
class Storage:
    """p_min <= p <= p_max and p^2 + q^2 <= capacity^2."""

    p_min: float
    p_max: float
    capacity: float
    kind = "storage"

    def __post_init__(self):
        if self.p_min > self.p_max or self.capacity <= 0:
            raise DeviceError(f"Storage needs p_min <= p_max and capacity > 0, got {self}")
        # the closest-to-zero admissible p must fit inside the disk
        witness = min(max(0.0, self.p_min), self.p_max)
        if abs(witness) > self.capacity:
            raise DeviceError(f"Storage interval [{self.p_min}, {self.p_max}] misses the capacity disk")

    def box_disk(self):
        return self.p_min, self.p_max, -math.inf, math.inf, self.capacity

    def to_dict(self):
        return {"kind": "storage", "p_min": self.p_min, "p_max": self.p_max, "capacity": self.capacity}


FeasibleSet = Union[Box, PvInverter, Storage]


@dataclass(frozen=True)
class QuadraticCost:
    """C(p, q) = cp (p - p0)^2 + cq (q - q0)^2."""

    cp: float = 1.0
    cq: float = 1.0
    p0: float = 0.0
    q0: float = 0.0

    def __post_init__(self):
        if not (self.cp > 0 and self.cq > 0):
            raise DeviceError(f"Cost curvature must be strictly positive, got cp={self.cp}, cq={self.cq}")

    def value(self, p, q):
        return self.cp * (p - self.p0) ** 2 + self.cq * (q - self.q0) ** 2

    def to_dict(self):
        return {"cp": self.cp, "cq": self.cq, "p0": self.p0, "q0": self.q0}


@dataclass(frozen=True)
class Device:
    node: int
    phase: int
    feasible: FeasibleSet
    cost: QuadraticCost


@dataclass(frozen=True)
class SubstationCost:
    """C0(P0) = alpha (P0 - p0_target)^2."""

    alpha: float = 0.0
    p0_target: float = 0.0

    def __post_init__(self):
        if self.alpha < 0:
            raise DeviceError(f"Substation cost weight must be nonnegative, got {self.alpha}")

    def value(self, P0):
        return self.alpha * (P0 - self.p0_target) ** 2

    def derivative(self, P0):
        return 2.0 * self.alpha * (P0 - self.p0_target)


########################################
# TOPOLOGY
########################################


@dataclass(frozen=True)
class Line:
    """A line from parent to child with its phase impedance matrix (rows/cols ordered by phase)."""

    from_node: int
    to_node: int
    phases: tuple[int, ...]
    z: tuple[tuple[complex, ...], ...]

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.z, dtype=complex)

    def full_matrix(self) -> np.ndarray:
        """The impedance embedded in a 3x3 matrix, zero on absent phases."""
        full = np.zeros((3, 3), dtype=complex)
        idx = np.array(self.phases)
        full[np.ix_(idx, idx)] = self.matrix
        return full


@dataclass(frozen=True)
class Feeder:
    """
    A radial feeder rooted at the slack bus (index 0).

    `slack_v2` and `inelastic` are (phase, value) pairs, so that the whole
    object stays immutable and comparable field by field.
    """

    node_ids: tuple[str, ...]
    node_phases: tuple[tuple[int, ...], ...]
    lines: tuple[Line, ...]
    slack_v2: tuple[tuple[int, float], ...]
    inelastic: tuple[tuple[int, float], ...] = ()
    base_mva: float = 1.0

    def __post_init__(self):
        self._check_topology()
        self._check_phases()

    def _check_topology(self):
        n = len(self.node_ids)
        if len(self.node_phases) != n:
            raise DimensionError("node_phases must list one phase set per node")
        graph = nx.DiGraph()
        graph.add_nodes_from(range(n))
        for line in self.lines:
            for end in (line.from_node, line.to_node):
                if not 0 <= end < n:
                    raise UnknownNode(f"Line {line.from_node}->{line.to_node} references node {end}")
            if line.to_node == 0:
                raise TopologyError("The slack node cannot be the child of a line")
            if graph.has_edge(line.from_node, line.to_node):
                raise TopologyError(f"Duplicate line {self.node_ids[line.from_node]}->{self.node_ids[line.to_node]}")
            graph.add_edge(line.from_node, line.to_node)
        for node, degree in graph.in_degree():
            if degree > 1:
                raise TopologyError(f"Node {self.node_ids[node]} has {degree} parents")
        if len(self.lines) != n - 1:
            raise TopologyError(f"A radial feeder with {n} nodes needs {n - 1} lines, got {len(self.lines)}")
        if not nx.is_arborescence(graph):
            raise TopologyError("Lines do not form a tree rooted at the slack node (cycle or disconnected part)")

    def _check_phases(self):
        slack_phases = set(self.node_phases[0])
        if set(phase for phase, _ in self.slack_v2) != slack_phases:
            raise PhaseError(f"slack_v2 must give one value per slack phase {phase_label(self.node_phases[0])}")
        for phase, value in self.slack_v2:
            if not value > 0:
                raise PhaseError(f"slack_v2 for phase {phase_label(phase)} must be positive")
        for phase, _ in self.inelastic:
            if phase not in slack_phases:
                raise PhaseError(f"Inelastic injection on phase {phase_label(phase)} absent at the slack")
        for line in self.lines:
            name = f"{self.node_ids[line.from_node]}->{self.node_ids[line.to_node]}"
            dim = len(line.phases)
            if len(line.z) != dim or any(len(row) != dim for row in line.z):
                raise DimensionError(f"Impedance of line {name} must be {dim}x{dim}")
            if any(line.z[k][k].real < 0 for k in range(dim)):
                raise ParseError(f"Line {name} has a negative resistance on its diagonal")
            if not set(line.phases) <= slack_phases:
                raise PhaseError(f"Line {name} carries phases missing at the slack")
            if not set(line.phases) <= set(self.node_phases[line.from_node]):
                raise PhaseError(f"Line {name} carries phases its from-node lacks")
            if not set(self.node_phases[line.to_node]) <= set(line.phases):
                raise PhaseError(
                    f"Node {self.node_ids[line.to_node]} phases {phase_label(self.node_phases[line.to_node])} "
                    f"not carried by line {name} ({phase_label(line.phases)})"
                )

    # Derived structure. Cached on the instance; the dataclass fields never change.

    @property
    def n_nodes(self) -> int:
        """Number of nodes including the slack."""
        return len(self.node_ids)

    @cached_property
    def line_into(self) -> dict[int, Line]:
        return {line.to_node: line for line in self.lines}

    @cached_property
    def parent(self) -> tuple[int, ...]:
        parents = [-1] * self.n_nodes
        for line in self.lines:
            parents[line.to_node] = line.from_node
        return tuple(parents)

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        kids = [[] for _ in range(self.n_nodes)]
        for line in self.lines:
            kids[line.from_node].append(line.to_node)
        return tuple(tuple(sorted(k)) for k in kids)

    @cached_property
    def preorder(self) -> tuple[int, ...]:
        """Depth-first order from the slack, children visited in ascending index."""
        order = []
        stack = [0]
        while stack:
            node = stack.pop()
            order.append(node)
            stack.extend(reversed(self.children[node]))
        return tuple(order)

    @cached_property
    def _preorder_position(self) -> np.ndarray:
        position = np.empty(self.n_nodes, dtype=np.int64)
        position[list(self.preorder)] = np.arange(self.n_nodes)
        return position

    @cached_property
    def subtree_size(self) -> tuple[int, ...]:
        sizes = [1] * self.n_nodes
        for node in reversed(self.preorder):
            if node:
                sizes[self.parent[node]] += sizes[node]
        return tuple(sizes)

    @cached_property
    def depth(self) -> tuple[int, ...]:
        depths = [0] * self.n_nodes
        for node in self.preorder[1:]:
            depths[node] = depths[self.parent[node]] + 1
        return tuple(depths)

    @cached_property
    def leaves(self) -> tuple[int, ...]:
        return tuple(node for node in range(1, self.n_nodes) if not self.children[node])

    def descendants(self, node: int) -> tuple[int, ...]:
        """The node and all nodes below it, in preorder."""
        self.check_node(node, allow_slack=True)
        start = self._preorder_position[node]
        return self.preorder[start : start + self.subtree_size[node]]

    def is_ancestor(self, ancestor: int, node: int) -> bool:
        """True when `ancestor` lies on the path from the slack to `node` (inclusive)."""
        start = self._preorder_position[ancestor]
        return start <= self._preorder_position[node] < start + self.subtree_size[ancestor]

    def lca(self, i: int, j: int) -> int:
        depth, parent = self.depth, self.parent
        while depth[i] > depth[j]:
            i = parent[i]
        while depth[j] > depth[i]:
            j = parent[j]
        while i != j:
            i, j = parent[i], parent[j]
        return i

    def check_node(self, node: int, allow_slack: bool = False):
        if not isinstance(node, (int, np.integer)) or not 0 <= node < self.n_nodes:
            raise UnknownNode(f"Unknown node index {node!r}")
        if node == 0 and not allow_slack:
            raise UnknownNode("The slack node has no path, sensitivities or injections")

    def index_of(self, node_id: str) -> int:
        try:
            return self._id_position[str(node_id)]
        except KeyError:
            raise UnknownNode(f"Unknown node id {node_id!r}") from None

    @cached_property
    def _id_position(self) -> dict[str, int]:
        return {node_id: k for k, node_id in enumerate(self.node_ids)}

    # Phase-expanded coordinates.

    @property
    def slack_phases(self) -> tuple[int, ...]:
        return self.node_phases[0]

    @cached_property
    def xi_index(self) -> tuple[tuple[int, int], ...]:
        """(node, phase) for every non-slack node, node-major with phases ascending."""
        return tuple((node, phase) for node in range(1, self.n_nodes) for phase in self.node_phases[node])

    @cached_property
    def xi_position(self) -> dict[tuple[int, int], int]:
        return {key: k for k, key in enumerate(self.xi_index)}

    @property
    def n_xi(self) -> int:
        return len(self.xi_index)

    @cached_property
    def xi_nodes(self) -> np.ndarray:
        return np.array([node for node, _ in self.xi_index], dtype=np.int64)

    @cached_property
    def xi_phases(self) -> np.ndarray:
        return np.array([phase for _, phase in self.xi_index], dtype=np.int64)

    def xi_slice(self, node: int) -> list[int]:
        """Positions of a node's phases in the phase-expanded vectors."""
        return [self.xi_position[(node, phase)] for phase in self.node_phases[node]]

    @cached_property
    def slack_voltage2(self) -> np.ndarray:
        """Squared slack voltage per phase as a length-3 array (zero on absent phases)."""
        values = np.zeros(3)
        for phase, value in self.slack_v2:
            values[phase] = value
        return values

    @cached_property
    def v_tilde(self) -> np.ndarray:
        """The constant term of the linear model: entry (i, phi) is slack_v2[phi]."""
        return self.slack_voltage2[self.xi_phases]

    @property
    def inelastic_total(self) -> float:
        return float(sum(value for _, value in sorted(self.inelastic)))

    @cached_property
    def cumulative_z(self) -> np.ndarray:
        """
        Sum of line impedances from the slack down to each node, shape (n, 3, 3).

        Accumulated root to leaf; the common-path impedance of i and j is the
        entry at lca(i, j).
        """
        cum = np.zeros((self.n_nodes, 3, 3), dtype=complex)
        for node in self.preorder[1:]:
            cum[node] = cum[self.parent[node]] + self.line_into[node].full_matrix()
        return cum

    @cached_property
    def max_mutual_impedance(self) -> float:
        """Largest off-diagonal impedance magnitude over all lines."""
        largest = 0.0
        for line in self.lines:
            matrix = line.matrix
            off = matrix - np.diag(np.diag(matrix))
            largest = max(largest, float(np.abs(off).max(initial=0.0)))
        return largest


def path_to_root(feeder: Feeder, i: int) -> list[Line]:
    """Lines on the path from the slack to node i, ordered root to i."""
    feeder.check_node(i)
    path = []
    node = i
    while node != 0:
        line = feeder.line_into[node]
        path.append(line)
        node = line.from_node
    path.reverse()
    return path


########################################
# FILES
########################################


@dataclass(frozen=True)
class ClusterDef:
    """A subtree declared in the feeder file; members None means 'root and all descendants'."""

    root: int
    members: Optional[tuple[int, ...]] = None


@dataclass(frozen=True)
class FeederCase:
    feeder: Feeder
    devices: tuple[Device, ...] = ()
    substation_cost: SubstationCost = SubstationCost()
    clusters: Optional[tuple[ClusterDef, ...]] = None

    def __post_init__(self):
        seen = set()
        for device in self.devices:
            self.feeder.check_node(device.node)
            if device.phase not in self.feeder.node_phases[device.node]:
                raise PhaseError(
                    f"Device on node {self.feeder.node_ids[device.node]} uses phase "
                    f"{phase_label(device.phase)} the node does not have"
                )
            key = (device.node, device.phase)
            if key in seen:
                raise DeviceError(f"Two devices on node {self.feeder.node_ids[device.node]} phase {phase_label(device.phase)}")
            seen.add(key)

    @cached_property
    def device_at(self) -> dict[tuple[int, int], Device]:
        return {(d.node, d.phase): d for d in self.devices}


def _resolve_path(path):
    path = str(path)
    if path.startswith(BUILTIN_PREFIX):
        name = path[len(BUILTIN_PREFIX) :]
        resource = importlib_resources.files("voltreg") / "feeders" / f"{name}.json"
        if not resource.is_file():
            raise ParseError(f"No bundled feeder named {name!r}")
        return resource
    return path


def load_feeder(path) -> FeederCase:
    """Read and validate a feeder description file (or 'builtin:<name>')."""
    source = _resolve_path(path)
    try:
        if hasattr(source, "read_text"):
            text = source.read_text(encoding="utf-8")
        else:
            with open(source, encoding="utf-8") as f:
                text = f.read()
        data = json.loads(text)
    except OSError as e:
        raise ParseError(f"Cannot read feeder file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"Feeder file {path} is not valid JSON: {e}") from e
    case = case_from_dict(data)
    logger.info(
        f"Loaded feeder {path}: {case.feeder.n_nodes - 1} nodes, "
        f"{case.feeder.n_xi} phase-expanded coordinates, {len(case.devices)} devices"
    )
    return case


def case_from_dict(data) -> FeederCase:
    """Validate a parsed feeder document and build the indexed FeederCase."""
    try:
        document = FeederFile.model_validate(data)
    except ValidationError as e:
        raise ParseError(f"Feeder file does not match the schema:\n{e}") from e

    ids = [node.id for node in document.nodes]
    if len(set(ids)) != len(ids):
        raise ParseError("Node ids must be unique")
    known = set(ids)
    for line in document.lines:
        for end in (line.from_node, line.to_node):
            if end not in known:
                raise UnknownNode(f"Line {line.from_node}->{line.to_node} references unknown node {end!r}")

    targets = [line.to_node for line in document.lines]
    if len(set(targets)) != len(targets):
        dup = next(t for t in targets if targets.count(t) > 1)
        raise TopologyError(f"Node {dup!r} has more than one parent")
    if document.slack is not None:
        if document.slack not in known:
            raise UnknownNode(f"Unknown slack node {document.slack!r}")
        slack = document.slack
    else:
        roots = [node_id for node_id in ids if node_id not in set(targets)]
        if len(roots) != 1:
            raise TopologyError(f"Expected exactly one root node, found {len(roots)}: {roots}")
        slack = roots[0]

    order = [slack] + [node_id for node_id in ids if node_id != slack]
    index = {node_id: k for k, node_id in enumerate(order)}
    phases_by_id = {node.id: node.phases for node in document.nodes}
    node_phases = tuple(tuple(phases_by_id[node_id]) for node_id in order)

    lines = []
    for line in document.lines:
        to_index = index[line.to_node]
        phases = tuple(line.phases) if line.phases is not None else node_phases[to_index]
        lines.append(
            Line(
                from_node=index[line.from_node],
                to_node=to_index,
                phases=phases,
                z=_impedance_rows(line, len(phases)),
            )
        )
    lines.sort(key=lambda ln: ln.to_node)

    feeder = Feeder(
        node_ids=tuple(order),
        node_phases=node_phases,
        lines=tuple(lines),
        slack_v2=_phase_pairs(document.slack_v2),
        inelastic=_phase_pairs(document.inelastic),
        base_mva=document.base_mva,
    )

    devices = []
    for d in document.devices:
        if d.node not in index:
            raise UnknownNode(f"Device references unknown node {d.node!r}")
        devices.append(
            Device(
                node=index[d.node],
                phase=d.phase,
                feasible=_feasible_from_spec(d.feasible),
                cost=QuadraticCost(cp=d.cost.cp, cq=d.cost.cq, p0=d.cost.p0, q0=d.cost.q0),
            )
        )

    clusters = None
    if document.clusters is not None:
        clusters = []
        for c in document.clusters:
            if c.root not in index or any(m not in index for m in c.members or ()):
                raise UnknownNode(f"Cluster rooted at {c.root!r} references an unknown node")
            members = None if c.members is None else tuple(sorted(index[m] for m in c.members))
            clusters.append(ClusterDef(root=index[c.root], members=members))
        clusters = tuple(clusters)

    return FeederCase(
        feeder=feeder,
        devices=tuple(devices),
        substation_cost=SubstationCost(alpha=document.substation_cost.alpha, p0_target=document.substation_cost.p0_target),
        clusters=clusters,
    )


def _phase_pairs(mapping) -> tuple[tuple[int, float], ...]:
    return tuple(sorted((parse_phase(key), float(value)) for key, value in mapping.items()))


def _impedance_rows(line, dim):
    name = f"{line.from_node}->{line.to_node}"
    if line.z is not None:
        if len(line.z) != dim or any(len(row) > dim for row in line.z):
            raise DimensionError(f"Impedance of line {name} must be {dim}x{dim}")
        # short rows leave the remaining (mutual) entries at zero
        return tuple(tuple(row[k] if k < len(row) else 0j for k in range(dim)) for row in line.z)
    if line.z_diag is not None:
        if len(line.z_diag) != dim:
            raise DimensionError(f"z_diag of line {name} must have {dim} entries")
        return tuple(tuple(line.z_diag[r] if r == c else 0j for c in range(dim)) for r in range(dim))
    raise ParseError(f"Line {name} needs either z or z_diag")


def _feasible_from_spec(entry) -> FeasibleSet:
    if entry.kind == "box":
        return Box(p_min=entry.p_min, p_max=entry.p_max, q_min=entry.q_min, q_max=entry.q_max)
    if entry.kind == "pv":
        return PvInverter(p_av=entry.p_av, capacity=entry.capacity)
    return Storage(p_min=entry.p_min, p_max=entry.p_max, capacity=entry.capacity)


def serialize_feeder(case: FeederCase) -> dict:
    """The inverse of case_from_dict: a document load_feeder reads back identically."""
    feeder = case.feeder
    ids = feeder.node_ids
    data = {
        "base_mva": feeder.base_mva,
        "slack": ids[0],
        "slack_v2": {phase_label(phase): value for phase, value in feeder.slack_v2},
        "nodes": [{"id": ids[k], "phases": phase_label(feeder.node_phases[k])} for k in range(feeder.n_nodes)],
        "lines": [
            {
                "from": ids[line.from_node],
                "to": ids[line.to_node],
                "phases": phase_label(line.phases),
                "z": [[[entry.real, entry.imag] for entry in row] for row in line.z],
            }
            for line in feeder.lines
        ],
        "devices": [
            {
                "node": ids[d.node],
                "phase": phase_label(d.phase),
                "set": d.feasible.to_dict(),
                "cost": d.cost.to_dict(),
            }
            for d in case.devices
        ],
        "inelastic": {phase_label(phase): value for phase, value in feeder.inelastic},
        "substation_cost": {"alpha": case.substation_cost.alpha, "p0_target": case.substation_cost.p0_target},
    }
    if case.clusters is not None:
        data["clusters"] = [
            {"root": ids[c.root], **({} if c.members is None else {"members": [ids[m] for m in c.members]})}
            for c in case.clusters
        ]
    return data


def dump_feeder(case: FeederCase, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(serialize_feeder(case), indent=2))
        f.write("\n")
