"""Multigrid residuals of level-wise states.

For values ``beta_d`` on level ``d`` and a coarser level ``p <= d``,
``phi_p(beta_d)[r]`` is the walk-weighted mean of ``beta_d`` over the subtree
of ``r``. The residual ``delta_p = phi_p - phi_{p-1}[pa]`` (with
``delta_0 = phi_0``) holds the increments at coarseness ``p``. Stacking all
residuals, with one child per parent dropped, gives a square change of basis
``Delta`` under which a symmetric Gibbs sweep is block diagonal, one block per
coarseness level.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .gibbs import GibbsUpdate, Trace, spectral_radius
from .symmetry import AuxWalk
from .tree import HierarchyTree


def _level_of(values_len: int, tree: HierarchyTree, d: int | None) -> int:
    if d is None:
        matches = [i for i, lev in enumerate(tree.levels) if len(lev) == values_len]
        if len(matches) != 1:
            raise ValueError("cannot infer the level of the values; pass d explicitly")
        return matches[0]
    if len(tree.levels[d]) != values_len:
        raise ValueError(f"level {d} has {len(tree.levels[d])} nodes, got {values_len} values")
    return d


def phi(p: int, values: np.ndarray, walk: AuxWalk, d: int | None = None) -> np.ndarray:
    """Walk-weighted subtree means of level-``d`` values on level ``p``.

    ``values`` may carry leading batch axes; the last axis runs over ``T_d``.
    """
    tree = walk.tree
    values = np.asarray(values, dtype=float)
    d = _level_of(values.shape[-1], tree, d)
    if not 0 <= p <= d:
        raise ValueError(f"need 0 <= p <= d, got p={p}, d={d}")
    out = values
    for q in range(d, p, -1):
        lev = tree.levels[q]
        up = tree.levels[q - 1]
        agg = np.zeros((len(up), len(lev)))
        agg[tree.parent_array[lev] - up[0], np.arange(len(lev))] = walk.step[lev]
        out = out @ agg.T
    return out


def delta(p: int, values: np.ndarray, walk: AuxWalk, d: int | None = None) -> np.ndarray:
    """Residuals at coarseness ``p`` of level-``d`` values."""
    tree = walk.tree
    values = np.asarray(values, dtype=float)
    d = _level_of(values.shape[-1], tree, d)
    cur = phi(p, values, walk, d)
    if p == 0:
        return cur
    coarse = phi(p - 1, values, walk, d)
    lev = tree.levels[p]
    par = tree.parent_array[lev] - tree.levels[p - 1][0]
    return cur - coarse[..., par]


def reduced_basis(p: int, tree: HierarchyTree) -> np.ndarray:
    """``T'_p``: level-``p`` nodes minus the first child of each parent (root for ``p = 0``)."""
    if p == 0:
        return tree.levels[0].copy()
    if not 1 <= p < tree.depth:
        raise ValueError(f"p must be in [0, {tree.depth - 1}]")
    first = {tree.children[r][0] for r in tree.levels[p - 1]}
    return np.array([t for t in tree.levels[p] if t not in first], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class ResidualDecomposition:
    """Square map ``Delta`` from a full state to grouped residual coordinates.

    Rows are ordered by coarseness ``p``, then level ``d >= p``, then node in
    ``T'_p``. ``blocks[p]`` indexes the rows of group ``p``.
    """

    walk: AuxWalk

    @property
    def tree(self) -> HierarchyTree:
        return self.walk.tree

    @cached_property
    def bases(self) -> tuple[np.ndarray, ...]:
        return tuple(reduced_basis(p, self.tree) for p in range(self.tree.depth))

    @cached_property
    def row_keys(self) -> list[tuple[int, int, int]]:
        """``(p, d, node)`` for every row of ``Delta``."""
        keys = []
        for p, base in enumerate(self.bases):
            for d in range(p, self.tree.depth):
                keys.extend((p, d, int(r)) for r in base)
        return keys

    @cached_property
    def blocks(self) -> tuple[np.ndarray, ...]:
        ps = np.array([k[0] for k in self.row_keys])
        return tuple(np.flatnonzero(ps == p) for p in range(self.tree.depth))

    @cached_property
    def matrix(self) -> np.ndarray:
        tree = self.tree
        n = tree.n_nodes
        D = np.zeros((n, n))
        row = 0
        for p, base in enumerate(self.bases):
            pos = base - tree.levels[p][0]
            for d in range(p, tree.depth):
                lev = tree.levels[d]
                res = delta(p, np.eye(len(lev)), self.walk, d)  # column j = residuals of e_j
                D[row : row + len(base), lev] = res[:, pos].T
                row += len(base)
        return D

    @cached_property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.matrix)

    def apply(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states) @ self.matrix.T

    def reconstruct(self, residuals: np.ndarray) -> np.ndarray:
        return np.asarray(residuals) @ self.inverse.T

    def split(self, residuals: np.ndarray) -> list[np.ndarray]:
        return [residuals[..., b] for b in self.blocks]


def decompose_trace(trace: Trace | np.ndarray, walk: AuxWalk) -> list[np.ndarray]:
    """Per-coarseness subchains of a trace.

    Subchain ``p`` has columns ``delta_p(beta_d)`` restricted to ``T'_p`` for
    ``d = p..k-1``; subchain 0 is the ``k``-dimensional skeleton of global means.
    """
    states = trace.states if isinstance(trace, Trace) else np.asarray(trace)
    dec = ResidualDecomposition(walk)
    return dec.split(dec.apply(states))


def skeleton(trace: Trace | np.ndarray, walk: AuxWalk) -> np.ndarray:
    """The coarsest subchain: walk-weighted global mean of every level."""
    states = trace.states if isinstance(trace, Trace) else np.asarray(trace)
    tree = walk.tree
    return np.stack([phi(0, states[..., lev], walk, d) for d, lev in enumerate(tree.levels)], axis=-1)[..., 0, :]


@dataclass(frozen=True, eq=False)
class FactorizationReport:
    """Block structure of ``Delta B Delta^-1``."""

    transformed: np.ndarray
    blocks: tuple[np.ndarray, ...]
    max_off_block: float
    scale: float

    @cached_property
    def block_matrices(self) -> list[np.ndarray]:
        return [self.transformed[np.ix_(b, b)] for b in self.blocks]

    @cached_property
    def block_rates(self) -> list[float]:
        return [spectral_radius(M) for M in self.block_matrices]

    def is_block_diagonal(self, tol: float = 1e-10) -> bool:
        return self.max_off_block < tol


def verify_factorization(update: GibbsUpdate | np.ndarray, decomposition: ResidualDecomposition) -> FactorizationReport:
    """Measure how far ``Delta B Delta^-1`` is from block diagonal.

    The reported magnitude is the largest off-block entry divided by the
    largest entry overall.
    """
    B = update.B if isinstance(update, GibbsUpdate) else np.asarray(update)
    M = decomposition.matrix @ B @ decomposition.inverse
    mask = np.ones(M.shape, dtype=bool)
    for b in decomposition.blocks:
        mask[np.ix_(b, b)] = False
    scale = float(np.max(np.abs(M))) if M.size else 0.0
    off = float(np.max(np.abs(M[mask]))) if mask.any() else 0.0
    rel = off / scale if scale > 0 else 0.0
    return FactorizationReport(M, decomposition.blocks, rel, scale)
