"""Index trees for hierarchical models.

Nodes are stored breadth-first from the root, so node ``0`` is the root,
every parent precedes its children and the nodes of one level form a
contiguous block. All downstream matrices use this order.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence, Union

import numpy as np


class TreeStructureError(ValueError):
    """Raised for malformed trees (cycles, several roots, uneven leaves)."""


Branching = Sequence[Union[int, Sequence[int]]]


@dataclass(frozen=True, eq=False)
class HierarchyTree:
    """A rooted tree whose leaves all sit on the deepest level.

    Parameters
    ----------
    parent
        ``parent[t]`` is the index of the parent of node ``t``; ``-1`` for the
        root. Must already be in breadth-first order.
    labels
        One string label per node, used in files and plots.
    """

    parent: tuple[int, ...]
    labels: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        parent = self.parent
        n = len(parent)
        if n == 0:
            raise TreeStructureError("empty tree")
        if len(self.labels) != n:
            raise TreeStructureError("need exactly one label per node")
        if len(set(self.labels)) != n:
            raise TreeStructureError("node labels must be unique")
        if parent[0] != -1:
            raise TreeStructureError("node 0 must be the root")
        roots = [t for t, p in enumerate(parent) if p == -1]
        if len(roots) != 1:
            raise TreeStructureError(f"expected one root, found {len(roots)}")
        level = [0] * n
        for t in range(1, n):
            p = parent[t]
            if not 0 <= p < t:
                raise TreeStructureError(
                    f"node {self.labels[t]!r}: parent must precede it in breadth-first order"
                )
            level[t] = level[p] + 1
            if level[t] < level[t - 1]:
                raise TreeStructureError("nodes are not in breadth-first order")
        k = max(level) + 1
        has_child = [False] * n
        for t in range(1, n):
            has_child[parent[t]] = True
        for t in range(n):
            if not has_child[t] and level[t] != k - 1:
                raise TreeStructureError(
                    f"leaf {self.labels[t]!r} is at level {level[t]}, expected {k - 1}"
                )
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(self.labels)})

    # -- basic maps -------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    def __len__(self) -> int:
        return len(self.parent)

    @cached_property
    def parent_array(self) -> np.ndarray:
        return np.asarray(self.parent, dtype=np.int64)

    @cached_property
    def level(self) -> np.ndarray:
        lev = np.zeros(self.n_nodes, dtype=np.int64)
        for t in range(1, self.n_nodes):
            lev[t] = lev[self.parent[t]] + 1
        return lev

    @property
    def depth(self) -> int:
        """Number of levels ``k`` (root is level 0, leaves level ``k-1``)."""
        return int(self.level[-1]) + 1

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        ch: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for t in range(1, self.n_nodes):
            ch[self.parent[t]].append(t)
        return tuple(tuple(c) for c in ch)

    @cached_property
    def levels(self) -> tuple[np.ndarray, ...]:
        """Index arrays ``T_0, ..., T_{k-1}``."""
        return tuple(np.flatnonzero(self.level == d) for d in range(self.depth))

    @cached_property
    def leaves(self) -> np.ndarray:
        return self.levels[-1]

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise KeyError(f"unknown node label {label!r}") from None

    def ancestors(self, t: int) -> list[int]:
        """Strict ancestors of ``t``, nearest first."""
        out = []
        p = self.parent[t]
        while p != -1:
            out.append(p)
            p = self.parent[p]
        return out

    @cached_property
    def ancestor_matrix(self) -> np.ndarray:
        """Boolean matrix ``M[t, r] = r ⪯ t`` (``r`` ancestor of ``t`` or equal)."""
        n = self.n_nodes
        M = np.eye(n, dtype=bool)
        for t in range(1, n):
            M[t] |= M[self.parent[t]]
        return M

    @cached_property
    def comparable(self) -> np.ndarray:
        """``C[t, r]`` true when one of ``t``, ``r`` is an ancestor of the other."""
        M = self.ancestor_matrix
        return M | M.T

    @cached_property
    def is_balanced(self) -> bool:
        """Every node of a level has the same number of children."""
        ch = self.children
        for lev in self.levels[:-1]:
            if len({len(ch[t]) for t in lev}) != 1:
                return False
        return True

    @cached_property
    def branching(self) -> tuple[int, ...]:
        """Per-level branching ``(I_1, ..., I_{k-1})`` of a balanced tree."""
        if not self.is_balanced:
            raise TreeStructureError("branching is only defined for balanced trees")
        return tuple(len(self.children[lev[0]]) for lev in self.levels[:-1])


def _path_labels(parent: Sequence[int], children: Sequence[Sequence[int]]) -> list[str]:
    labels = ["root"] * len(parent)
    for t in range(len(parent)):
        for j, c in enumerate(children[t], start=1):
            labels[c] = str(j) if t == 0 else f"{labels[t]}.{j}"
    return labels


def build_tree(
    branching: Branching | None = None,
    *,
    parents: Mapping[str, str] | None = None,
) -> HierarchyTree:
    """Build a tree from per-level branching counts or an explicit parent map.

    ``branching[d]`` gives the number of children of every level-``d`` node,
    either as one integer (balanced) or one integer per level-``d`` node.
    ``parents`` maps each child label to its parent label; the root is the only
    label that appears as a parent but never as a child.

    >>> build_tree([2, 2]).n_nodes
    7
    """
    if (branching is None) == (parents is None):
        raise TypeError("give exactly one of branching or parents")
    if branching is not None:
        return _from_branching(branching)
    return _from_parents(parents)


def _from_branching(branching: Branching) -> HierarchyTree:
    parent = [-1]
    current = [0]
    for d, b in enumerate(branching):
        counts = [b] * len(current) if np.isscalar(b) else list(b)
        if len(counts) != len(current):
            raise TreeStructureError(
                f"level {d}: {len(counts)} branching counts for {len(current)} nodes"
            )
        nxt = []
        for p, c in zip(current, counts):
            if int(c) != c or c < 1:
                raise TreeStructureError(f"level {d}: branching counts must be integers >= 1")
            for _ in range(int(c)):
                parent.append(p)
                nxt.append(len(parent) - 1)
        current = nxt
    children: list[list[int]] = [[] for _ in parent]
    for t in range(1, len(parent)):
        children[parent[t]].append(t)
    return HierarchyTree(tuple(parent), tuple(_path_labels(parent, children)))


def _from_parents(parents: Mapping[str, str]) -> HierarchyTree:
    kids: dict[str, list[str]] = {}
    for child, par in parents.items():
        if child == par:
            raise TreeStructureError(f"node {child!r} is its own parent")
        kids.setdefault(par, []).append(child)
    roots = [p for p in kids if p not in parents]
    if len(roots) != 1:
        raise TreeStructureError(f"expected one root, found {sorted(roots)}")
    order = []
    seen = set()
    queue = deque(roots)
    while queue:
        t = queue.popleft()
        seen.add(t)
        order.append(t)
        queue.extend(kids.get(t, []))
    orphans = set(parents) - seen
    if orphans:
        raise TreeStructureError(f"nodes not reachable from the root: {sorted(orphans)}")
    pos = {lab: i for i, lab in enumerate(order)}
    parent = tuple(-1 if lab == roots[0] else pos[parents[lab]] for lab in order)
    return HierarchyTree(parent, tuple(order))
