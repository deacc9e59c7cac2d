"""
Subtree partitions, the reduced network and coupling-operation counts.

A partition splits the non-slack nodes into K subtrees (a root and every node
below it) and a set of unclustered nodes. The slack bus belongs to neither.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import InfeasibleK, ParseError, PartitionError
from .feeder import ClusterDef, Feeder

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Subtree:
    root: int
    members: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class Partition:
    subtrees: tuple[Subtree, ...]
    unclustered: tuple[int, ...] = ()

    @property
    def K(self) -> int:
        return len(self.subtrees)

    @property
    def roots(self) -> tuple[int, ...]:
        return tuple(s.root for s in self.subtrees)

    def subtree_of(self) -> dict[int, int]:
        """Node index -> position of its subtree."""
        return {node: k for k, s in enumerate(self.subtrees) for node in s.members}


@dataclass(frozen=True)
class ReducedNetwork:
    """The tree over the slack, the subtree roots and the unclustered nodes."""

    nodes: tuple[int, ...]
    parent: Mapping[int, Optional[int]]

    @property
    def lines(self) -> tuple[tuple[int, int], ...]:
        return tuple((self.parent[node], node) for node in self.nodes if self.parent[node] is not None)


def make_partition(subtrees: Iterable[tuple[int, Iterable[int]]], unclustered: Iterable[int] = ()) -> Partition:
    return Partition(
        subtrees=tuple(Subtree(root=int(root), members=tuple(sorted(int(m) for m in members))) for root, members in subtrees),
        unclustered=tuple(sorted(int(node) for node in unclustered)),
    )


def validate_partition(feeder: Feeder, partition: Partition) -> list[str]:
    """
    Every problem with the partition, as readable messages. An empty list
    means the partition is valid.
    """
    violations = []
    n = feeder.n_nodes
    seen: dict[int, str] = {}

    def claim(node, owner):
        if node in seen:
            violations.append(f"non-disjoint: node {node} is in {seen[node]} and {owner}")
        else:
            seen[node] = owner

    for k, subtree in enumerate(partition.subtrees):
        owner = f"subtree {k} (root {subtree.root})"
        if not 0 < subtree.root < n:
            violations.append(f"{owner}: root is not a non-slack node")
            continue
        expected = set(feeder.descendants(subtree.root))
        members = set(subtree.members)
        for node in sorted(expected - members):
            violations.append(f"{owner}: missing descendant {node}")
        for node in sorted(members - expected):
            violations.append(f"{owner}: member {node} is not below the root")
        for node in sorted(members):
            claim(node, owner)
    for a, first in enumerate(partition.subtrees):
        for second in partition.subtrees[a + 1 :]:
            if 0 < first.root < n and 0 < second.root < n:
                if first.root != second.root and feeder.is_ancestor(first.root, second.root):
                    violations.append(f"nested: root {second.root} lies inside the subtree of {first.root}")
                elif first.root != second.root and feeder.is_ancestor(second.root, first.root):
                    violations.append(f"nested: root {first.root} lies inside the subtree of {second.root}")
    for node in partition.unclustered:
        if not 0 < node < n:
            violations.append(f"unclustered node {node} is not a non-slack node")
            continue
        claim(node, "the unclustered set")
    for node in range(1, n):
        if node not in seen:
            violations.append(f"node {node} is not covered")
    return violations


def require_valid(feeder: Feeder, partition: Partition) -> Partition:
    violations = validate_partition(feeder, partition)
    if violations:
        raise PartitionError("Invalid partition:\n  " + "\n  ".join(violations))
    return partition


def reduced_network(feeder: Feeder, partition: Partition) -> ReducedNetwork:
    """
    The reduced network of a valid partition. Every reduced node hangs off
    the nearest reduced ancestor, which for a valid partition is its parent
    in the feeder.
    """
    require_valid(feeder, partition)
    kept = {0, *partition.roots, *partition.unclustered}
    parent: dict[int, Optional[int]] = {0: None}
    for node in sorted(kept - {0}):
        up = feeder.parent[node]
        while up not in kept:
            up = feeder.parent[up]
        parent[node] = up
    return ReducedNetwork(nodes=tuple(sorted(kept)), parent=parent)


def partition_from_clusters(feeder: Feeder, clusters: Iterable[ClusterDef]) -> Partition:
    """Subtrees from the feeder file; every other non-slack node is unclustered."""
    subtrees = []
    for cluster in clusters:
        feeder.check_node(cluster.root)
        members = cluster.members if cluster.members is not None else feeder.descendants(cluster.root)
        subtrees.append((cluster.root, members))
    covered = {node for _, members in subtrees for node in members}
    return make_partition(subtrees, [node for node in range(1, feeder.n_nodes) if node not in covered])


def partition_to_dict(feeder: Feeder, partition: Partition) -> dict:
    ids = feeder.node_ids
    return {
        "subtrees": [{"root": ids[s.root], "members": [ids[m] for m in s.members]} for s in partition.subtrees],
        "unclustered": [ids[node] for node in partition.unclustered],
    }


def partition_from_dict(feeder: Feeder, data) -> Partition:
    """Read the partition document written by partition_to_dict; absent members mean every descendant."""
    try:
        subtrees = []
        for entry in data["subtrees"]:
            root = feeder.index_of(entry["root"])
            members = entry.get("members")
            subtrees.append((root, feeder.descendants(root) if members is None else [feeder.index_of(m) for m in members]))
        unclustered = [feeder.index_of(node) for node in data.get("unclustered", [])]
    except (KeyError, TypeError, AttributeError) as e:
        raise ParseError(f"Partition document is malformed: {e!r}") from e
    return make_partition(subtrees, unclustered)


def load_partition(feeder: Feeder, path) -> Partition:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ParseError(f"Cannot read partition file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"Partition file {path} is not valid JSON: {e}") from e
    return partition_from_dict(feeder, data)


########################################
# AUTOMATIC PARTITIONING
########################################


def recommend_k(N: int) -> int:
    """round((N^2 / 2)^(1/3)), clamped to [1, N]."""
    if N < 1:
        raise ValueError(f"N must be at least 1, got {N}")
    return min(max(int(round((N * N / 2.0) ** (1.0 / 3.0))), 1), N)


def auto_partition(feeder: Feeder, K: int) -> Partition:
    """
    Greedy subtree selection: repeatedly choose the free node whose subtree
    size is closest to N/K (smaller index on ties). A node is free when its
    subtree is disjoint from every chosen one. A candidate is admitted only
    if enough leaves stay outside chosen subtrees for the picks still to come,
    so the greedy never runs out of candidates.
    """
    leaves = feeder.leaves
    if K < 1 or K > len(leaves):
        raise InfeasibleK(f"Cannot form {K} disjoint subtrees on a feeder with {len(leaves)} leaves")
    N = feeder.n_nodes - 1
    target = N / K
    sizes = feeder.subtree_size
    leaf_count = [0] * feeder.n_nodes
    for node in reversed(feeder.preorder):
        if node and not feeder.children[node]:
            leaf_count[node] = 1
        if node:
            leaf_count[feeder.parent[node]] += leaf_count[node]

    blocked = {0}
    free_leaves = len(leaves)
    roots = []
    for pick in range(K):
        still_needed = K - pick - 1
        best = None
        for node in range(1, feeder.n_nodes):
            if node in blocked or free_leaves - leaf_count[node] < still_needed:
                continue
            key = (abs(sizes[node] - target), node)
            if best is None or key < best:
                best = key
        if best is None:
            raise InfeasibleK(f"Ran out of disjoint subtrees after {pick} of {K}")
        root = best[1]
        roots.append(root)
        free_leaves -= leaf_count[root]
        blocked.update(feeder.descendants(root))
        up = root
        while up:
            up = feeder.parent[up]
            blocked.add(up)

    roots.sort()
    partition = partition_from_clusters(feeder, [ClusterDef(root) for root in roots])
    require_valid(feeder, partition)
    logger.info(f"Auto partition with K={K}: subtree sizes {[s.size for s in partition.subtrees]}")
    return partition


########################################
# OPERATION COUNTS
########################################


@dataclass
class OpCount:
    """Coupling-term multiplications and additions, with a per-actor breakdown."""

    multiplications: int = 0
    additions: int = 0
    breakdown: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.multiplications + self.additions

    def add(self, actor: str, multiplications: int, additions: int):
        mults, adds = self.breakdown.get(actor, (0, 0))
        self.breakdown[actor] = (mults + multiplications, adds + additions)
        self.multiplications += multiplications
        self.additions += additions

    def to_dict(self) -> dict:
        return {
            "multiplications": self.multiplications,
            "additions": self.additions,
            "total": self.total,
            "breakdown": {actor: list(counts) for actor, counts in sorted(self.breakdown.items())},
        }


def balanced_sizes(N: int, K: int) -> list[int]:
    """N split into K sizes differing by at most one."""
    base, extra = divmod(N, K)
    return [base + 1] * extra + [base] * (K - extra)


def model_op_count(N: int, K: int, sizes: Optional[list[int]] = None) -> OpCount:
    """
    Closed-form coupling counts: each RC does N_k^2 multiplications and
    N_k(N_k - 1) + (N_k - 1) + N_k additions, the CC K^2 multiplications and
    K(K - 1) additions. When K does not divide N the subtree sizes are taken
    as balanced as possible.
    """
    if not 1 <= K <= N:
        raise ValueError(f"Need 1 <= K <= N, got N={N}, K={K}")
    sizes = balanced_sizes(N, K) if sizes is None else list(sizes)
    count = OpCount()
    for k, n_k in enumerate(sizes):
        count.add(f"rc:{k}", n_k * n_k, n_k * (n_k - 1) + (n_k - 1) + n_k)
    count.add("cc", K * K, K * (K - 1))
    return count


def model_total(N: int, K: int) -> float:
    """The leading-order total 2N^2/K + N + 2K^2."""
    return 2.0 * N * N / K + N + 2.0 * K * K


def central_op_count(N: int) -> OpCount:
    """A dense R^T d product: N^2 multiplications and N(N - 1) additions."""
    count = OpCount()
    count.add("central", N * N, N * (N - 1))
    return count


def measured_op_count(actor_ops: Mapping[str, tuple[int, int]], iterations: int = 1) -> OpCount:
    """Per-iteration counts from the counters an engine run accumulated over `iterations`."""
    count = OpCount()
    for actor, (mults, adds) in sorted(actor_ops.items()):
        count.add(actor, mults // max(iterations, 1), adds // max(iterations, 1))
    return count


def fit_exponent(sizes, counts) -> float:
    """Least-squares slope of log(count) against log(N)."""
    slope, _ = np.polyfit(np.log(np.asarray(sizes, dtype=float)), np.log(np.asarray(counts, dtype=float)), 1)
    return float(slope)
