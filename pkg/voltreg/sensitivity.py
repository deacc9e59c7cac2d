"""
Voltage sensitivities of the linearized branch-flow model.

For phase-expanded coordinates (i, phi) and (j, psi) the entries are

    R[(i,phi),(j,psi)] =  2 Re{ conj(Z_ij^{phi psi}) w^(phi - psi) }
    X[(i,phi),(j,psi)] = -2 Im{ conj(Z_ij^{phi psi}) w^(phi - psi) }

where Z_ij is the impedance of the lines shared by the slack-to-i and
slack-to-j paths and w = exp(-2j*pi/3). On single-phase feeders this reduces
to R_ij = 2 * sum of r over the common path (and X likewise).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .errors import DimensionError, PhaseError, ScopeError
from .feeder import Feeder, phase_label

logger = logging.getLogger(__name__)

# w^0, w^1, w^2 with w = exp(-2j*pi/3); w^k is looked up with k mod 3 so w^3 == 1 exactly.
OMEGA_POWERS = (
    complex(1.0, 0.0),
    complex(-0.5, -math.sqrt(3.0) / 2.0),
    complex(-0.5, math.sqrt(3.0) / 2.0),
)

# ROTATION[phi, psi] = w^(phi - psi)
ROTATION = np.array([[OMEGA_POWERS[(phi - psi) % 3] for psi in range(3)] for phi in range(3)])


def common_path_impedance(feeder: Feeder, i: int, j: int) -> np.ndarray:
    """Z_ij over the slack phases: the summed impedance of the lines both paths share."""
    feeder.check_node(i)
    feeder.check_node(j)
    phases = list(feeder.slack_phases)
    return feeder.cumulative_z[feeder.lca(i, j)][np.ix_(phases, phases)]


def lca_matrix(feeder: Feeder) -> np.ndarray:
    """
    Lowest common ancestor of every node pair, shape (n, n).

    Built row by row in preorder: a child's row copies its parent's row and
    claims its own subtree range.
    """
    n = feeder.n_nodes
    position = np.empty(n, dtype=np.int64)
    position[list(feeder.preorder)] = np.arange(n)
    sizes = feeder.subtree_size
    by_preorder = np.zeros((n, n), dtype=np.int32)
    for node in feeder.preorder[1:]:
        row = by_preorder[node]
        row[:] = by_preorder[feeder.parent[node]]
        start = position[node]
        row[start : start + sizes[node]] = node
    return by_preorder[:, position]


@dataclass(frozen=True, eq=False)
class SensitivityPack:
    """Dense R and X over the phase-expanded index, plus the constant voltage term."""

    R: np.ndarray
    X: np.ndarray
    index: tuple[tuple[int, int], ...]
    v_tilde: np.ndarray
    labels: tuple[str, ...] = ()
    position: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.index)
        if self.R.shape != (n, n) or self.X.shape != (n, n) or self.v_tilde.shape != (n,):
            raise DimensionError(f"Sensitivity matrices must be {n}x{n}")
        if not self.position:
            object.__setattr__(self, "position", {key: k for k, key in enumerate(self.index)})

    @property
    def n(self) -> int:
        return len(self.index)

    @property
    def phases(self) -> np.ndarray:
        return np.array([phase for _, phase in self.index], dtype=np.int64)


def _labels(feeder: Feeder) -> tuple[str, ...]:
    return tuple(f"{feeder.node_ids[node]}.{phase_label(phase)}" for node, phase in feeder.xi_index)


def _pair_impedance(feeder: Feeder) -> np.ndarray:
    """Z_ij^{phi psi} for every pair of phase-expanded coordinates."""
    nodes, phases = feeder.xi_nodes, feeder.xi_phases
    ancestors = lca_matrix(feeder)[np.ix_(nodes, nodes)]
    return feeder.cumulative_z[ancestors, phases[:, None], phases[None, :]]


def build_single_phase(feeder: Feeder) -> SensitivityPack:
    """R_ij = 2 sum r and X_ij = 2 sum x over the common path."""
    phase_sets = {feeder.node_phases[node] for node in range(1, feeder.n_nodes)}
    if len(phase_sets) > 1 or any(len(s) != 1 for s in phase_sets):
        raise PhaseError("build_single_phase needs every node on the same single phase")
    z = _pair_impedance(feeder)
    return SensitivityPack(
        R=2.0 * z.real,
        X=2.0 * z.imag,
        index=feeder.xi_index,
        v_tilde=feeder.v_tilde.copy(),
        labels=_labels(feeder),
    )


def build_multi_phase(feeder: Feeder) -> SensitivityPack:
    phases = feeder.xi_phases
    weighted = np.conj(_pair_impedance(feeder)) * ROTATION[phases[:, None], phases[None, :]]
    pack = SensitivityPack(
        R=2.0 * weighted.real,
        X=-2.0 * weighted.imag,
        index=feeder.xi_index,
        v_tilde=feeder.v_tilde.copy(),
        labels=_labels(feeder),
    )
    logger.debug(f"Built {pack.n}x{pack.n} multi-phase sensitivities")
    return pack


def build_sensitivity(feeder: Feeder) -> SensitivityPack:
    """The multi-phase builder; on single-phase feeders its entries equal build_single_phase's."""
    return build_multi_phase(feeder)


def diagonal_only(pack: SensitivityPack) -> SensitivityPack:
    """Drop every cross-phase entry, leaving the single-phase-style model."""
    phases = pack.phases
    same = phases[:, None] == phases[None, :]
    return SensitivityPack(
        R=np.where(same, pack.R, 0.0),
        X=np.where(same, pack.X, 0.0),
        index=pack.index,
        v_tilde=pack.v_tilde,
        labels=pack.labels,
        position=pack.position,
    )


def dump_matrix_csv(pack: SensitivityPack, path, matrix: str = "R"):
    """Write R or X with (node.phase) labels on both axes, 17 significant digits."""
    values = {"R": pack.R, "X": pack.X}[matrix]
    labels = list(pack.labels) or [f"{node}.{phase_label(phase)}" for node, phase in pack.index]
    frame = pd.DataFrame(values, index=labels, columns=labels)
    frame.to_csv(path, float_format="%.17g", index_label="node.phase")


class PathImpedanceTable:
    """
    Common-path impedances for node pairs inside one scope.

    The table is built only from the lines inside the scope plus a base
    impedance for the scope root (the root-to-slack segment), so whoever holds
    it knows nothing about the rest of the feeder. Reading a pair outside the
    scope raises ScopeError. With audit on, every pair read is recorded.
    """

    def __init__(self, root: int, parent: dict, line_z: dict, base: Optional[np.ndarray] = None, audit: bool = False):
        self.root = root
        self._parent = dict(parent)
        self._cum = {root: np.zeros((3, 3), dtype=complex) if base is None else np.array(base, dtype=complex)}
        self._depth = {root: 0}
        pending = [node for node in self._parent if node != root]
        # resolve root to leaf so every node adds its line onto its parent's sum
        while pending:
            remaining = []
            for node in pending:
                up = self._parent[node]
                if up in self._cum:
                    self._cum[node] = self._cum[up] + line_z[node]
                    self._depth[node] = self._depth[up] + 1
                else:
                    remaining.append(node)
            if len(remaining) == len(pending):
                raise ScopeError(f"Nodes {sorted(remaining)} are not connected to the scope root {root}")
            pending = remaining
        self.audit = audit
        self.accessed: set[tuple[int, int]] = set()

    @classmethod
    def for_scope(cls, feeder: Feeder, nodes, root: int, base=None, audit: bool = False) -> PathImpedanceTable:
        """Build the table of `nodes` (which must contain `root`) from the feeder's lines inside the scope."""
        scope = set(int(node) for node in nodes)
        for node in scope:
            feeder.check_node(node, allow_slack=True)
        if root not in scope:
            raise ScopeError(f"Scope root {root} is not in the scope")
        parent, line_z = {root: None}, {}
        for node in sorted(scope - {root}, key=lambda k: (feeder.depth[k], k)):
            up = feeder.parent[node]
            if up not in scope:
                raise ScopeError(f"Node {node} hangs below {up}, which is outside the scope")
            parent[node] = up
            line_z[node] = feeder.line_into[node].full_matrix()
        return cls(root, parent, line_z, base=base, audit=audit)

    @property
    def scope(self) -> frozenset:
        return frozenset(self._cum)

    def _lca(self, i: int, j: int) -> int:
        depth, parent = self._depth, self._parent
        while depth[i] > depth[j]:
            i = parent[i]
        while depth[j] > depth[i]:
            j = parent[j]
        while i != j:
            i, j = parent[i], parent[j]
        return i

    def get(self, i: int, j: int) -> np.ndarray:
        """Z_ij as a 3x3 matrix (zero rows/columns on absent phases)."""
        if i not in self._cum or j not in self._cum:
            raise ScopeError(f"Pair ({i}, {j}) is outside this table's scope")
        if self.audit:
            self.accessed.add((min(i, j), max(i, j)))
        return self._cum[self._lca(i, j)]


@dataclass
class BlockStructureReport:
    """Outcome of the block-structure check; truthy when no violation was found."""

    ok: bool
    violations: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def _root_map(pack: SensitivityPack, positions, root):
    """For each (i, phi) position, the position of (root, phi), or -1 if the root lacks phi."""
    return np.array([pack.position.get((root, pack.index[k][1]), -1) for k in positions], dtype=np.int64)


def _compare_block(pack, rows, cols, ref_rows, ref_cols, what, violations, limit):
    if not len(rows) or not len(cols):
        return
    if (ref_rows < 0).any() or (ref_cols < 0).any():
        violations.append(f"{what}: a root lacks a phase carried by its members")
        return
    for name, matrix in (("R", pack.R), ("X", pack.X)):
        actual = matrix[np.ix_(rows, cols)]
        expected = matrix[np.ix_(ref_rows, ref_cols)]
        bad = np.argwhere(actual != expected)
        for r, c in bad[: max(limit - len(violations), 0)]:
            violations.append(
                f"{what}: {name}[{pack.index[rows[r]]}, {pack.index[cols[c]]}] = {actual[r, c]!r} "
                f"differs from root-pair entry {expected[r, c]!r}"
            )
        if len(bad) and len(violations) >= limit:
            return


def block_structure_check(pack: SensitivityPack, partition, limit: int = 50) -> BlockStructureReport:
    """
    Check that every cross-subtree entry equals its root-pair entry exactly.

    Pairs between an unclustered node and a subtree member must equal the
    entry between the unclustered node and the subtree root. At most `limit`
    violations are listed.
    """
    by_node: dict[int, list[int]] = {}
    for k, (node, _) in enumerate(pack.index):
        by_node.setdefault(node, []).append(k)

    def positions(nodes):
        return np.array([k for node in sorted(nodes) for k in by_node.get(node, ())], dtype=np.int64)

    subtrees = [(s.root, positions(s.members)) for s in partition.subtrees]
    violations: list[str] = []
    for h, (root_h, rows) in enumerate(subtrees):
        ref_rows = _root_map(pack, rows, root_h)
        for k, (root_k, cols) in enumerate(subtrees):
            if h == k:
                continue
            ref_cols = _root_map(pack, cols, root_k)
            _compare_block(pack, rows, cols, ref_rows, ref_cols, f"subtrees {root_h}/{root_k}", violations, limit)
        for node in partition.unclustered:
            other = positions([node])
            _compare_block(pack, other, rows, other, ref_rows, f"node {node}/subtree {root_h}", violations, limit)
            _compare_block(pack, rows, other, ref_rows, other, f"subtree {root_h}/node {node}", violations, limit)
        if len(violations) >= limit:
            break
    return BlockStructureReport(ok=not violations, violations=violations)
