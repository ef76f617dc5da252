"""Partial correlations, the auxiliary walk and symmetry certification.

The auxiliary walk starts at the root and moves to child ``t`` of ``r`` with
probability proportional to the squared partial correlation ``rho_tr**2``.
A precision is *symmetric* when every partial correlation between a node and
one of its ancestors equals ``c[l(r), l(t)] * sqrt(P(t | r))`` for a fixed
level matrix ``C`` and incomparable pairs are uncorrelated.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .params import satisfies_t
from .tree import HierarchyTree

DEFAULT_TOL = 1e-9


class DegenerateWalkError(ValueError):
    """A non-leaf node whose children all have zero partial correlation with it."""


def partial_correlations(Q: np.ndarray) -> np.ndarray:
    """``rho[t, r] = -Q[t, r] / sqrt(Q[t, t] Q[r, r])`` with unit diagonal."""
    Q = np.asarray(Q, dtype=float)
    d = np.diag(Q)
    if np.any(d <= 0):
        raise ValueError("precision matrix needs a strictly positive diagonal")
    s = np.sqrt(d)
    rho = -Q / np.outer(s, s) + 0.0
    np.fill_diagonal(rho, 1.0)
    return rho


@dataclass(frozen=True, eq=False)
class AuxWalk:
    """Root-to-leaf Markov chain on a tree.

    Attributes
    ----------
    step : ndarray
        ``step[t] = P(t | pa(t))``; ``step[0] = 1``.
    """

    tree: HierarchyTree
    step: np.ndarray

    @cached_property
    def marginal(self) -> np.ndarray:
        """``P(t)``: probability that the walk visits ``t``."""
        p = self.step.copy()
        for t in range(1, self.tree.n_nodes):
            p[t] *= p[self.tree.parent[t]]
        return p

    @cached_property
    def conditional(self) -> np.ndarray:
        """``M[t, r] = P(t | r)`` for ``r`` an ancestor of ``t`` (or ``t`` itself), else 0."""
        P = self.marginal
        M = np.where(self.tree.ancestor_matrix, P[:, None] / P[None, :], 0.0)
        return M

    def joint(self, t: int, r: int) -> float:
        """``P(t and r)`` for comparable nodes."""
        M = self.tree.ancestor_matrix
        if M[t, r]:
            return float(self.marginal[t])
        if M[r, t]:
            return float(self.marginal[r])
        raise ValueError("joint visit probability is only defined for comparable nodes")

    @classmethod
    def uniform(cls, tree: HierarchyTree) -> "AuxWalk":
        step = np.ones(tree.n_nodes)
        for t in range(1, tree.n_nodes):
            step[t] = 1.0 / len(tree.children[tree.parent[t]])
        return cls(tree, step)


def aux_walk(Q: np.ndarray, tree: HierarchyTree) -> AuxWalk:
    """Walk with ``P(t | pa(t)) ∝ rho[t, pa(t)]**2`` over the children of ``pa(t)``."""
    rho = partial_correlations(Q)
    t = np.arange(1, tree.n_nodes)
    w = np.ones(tree.n_nodes)
    w[1:] = rho[t, tree.parent_array[1:]] ** 2
    step = w.copy()
    for r, kids in enumerate(tree.children):
        if not kids:
            continue
        total = w[list(kids)].sum()
        if total <= 0:
            raise DegenerateWalkError(
                f"children of node {tree.labels[r]!r} are uncorrelated with it; the walk is undefined"
            )
        step[list(kids)] = w[list(kids)] / total
    return AuxWalk(tree, step)


@dataclass(frozen=True, eq=False)
class SymmetryCertificate:
    """Outcome of a symmetry check.

    ``C`` is the ``k x k`` level matrix (unit diagonal). When ``certified`` is
    false, ``worst_pair`` names the node pair (labels) with the largest
    deviation and ``C`` holds the first-seen values.
    """

    C: np.ndarray
    condition: str
    tol: float
    max_deviation: float
    certified: bool
    worst_pair: tuple[str, str] | None = None

    def __bool__(self):
        return self.certified

    @property
    def c_vector(self) -> np.ndarray:
        """``c_l = C[l, l+1]**2``, the per-level child sums of squared correlations."""
        return np.diag(self.C, 1) ** 2


def check_symmetry(
    Q: np.ndarray,
    tree: HierarchyTree,
    tol: float = DEFAULT_TOL,
    condition: str = "auto",
    walk: AuxWalk | None = None,
) -> SymmetryCertificate:
    """Certify that ``Q`` is symmetric in the sense of the module docstring.

    Parameters
    ----------
    condition : {"auto", "S*", "S", "S~"}
        ``S*`` checks that ``sum_{r in ch(t)} rho_tr**2`` depends only on the
        level of ``t`` and needs a tree-structured ``Q``. ``S`` checks every
        ancestor pair against ``c * sqrt(P(t | r))``. ``S~`` checks the
        rescaled form ``Q_tt = P(t)``, ``-Q_tr = c P(t and r)``. ``auto`` picks
        ``S*`` for tree-structured input and ``S`` otherwise.
    walk : AuxWalk, optional
        Walk used by ``S`` and ``S~``; by default derived from ``Q`` itself.
    """
    Q = np.asarray(Q, dtype=float)
    k = tree.depth
    if tree.n_nodes == 1:
        return SymmetryCertificate(np.ones((1, 1)), "S*", tol, 0.0, True)
    if condition == "auto":
        condition = "S*" if satisfies_t(Q, tree) else "S"
    if condition == "S*":
        if not satisfies_t(Q, tree):
            raise ValueError("the S* check needs a tree-structured precision")
        return _check_s_star(Q, tree, tol)
    if condition not in ("S", "S~"):
        raise ValueError(f"unknown symmetry condition {condition!r}")
    if walk is None:
        walk = aux_walk(Q, tree)
    rho = partial_correlations(Q)
    if condition == "S":
        value = rho / np.sqrt(np.where(walk.conditional > 0, walk.conditional, 1.0))
        worst = (0.0, None)
        diag_dev = 0.0
    else:
        P = walk.marginal
        diag_dev = np.max(np.abs(np.diag(Q) - P) / P)
        Pj = np.where(tree.ancestor_matrix, P[:, None], 0.0)
        Pj = np.maximum(Pj, Pj.T)
        value = -Q / np.where(Pj > 0, Pj, 1.0)
        worst = (diag_dev, None)
    C = np.eye(k)
    seen = np.eye(k, dtype=bool)
    lev = tree.level
    anc = tree.ancestor_matrix
    for t in range(tree.n_nodes):
        for r in tree.ancestors(t):
            a, b = lev[r], lev[t]
            v = value[t, r]
            if not seen[a, b]:
                C[a, b] = C[b, a] = v + 0.0
                seen[a, b] = seen[b, a] = True
                continue
            dev = abs(v - C[a, b]) / max(1.0, abs(C[a, b]))
            if dev > worst[0]:
                worst = (dev, (tree.labels[t], tree.labels[r]))
    inc = ~(anc | anc.T)
    if inc.any():
        off = np.abs(rho) * inc
        i, j = np.unravel_index(np.argmax(off), off.shape)
        if off[i, j] > worst[0]:
            worst = (off[i, j], (tree.labels[i], tree.labels[j]))
    dev = float(worst[0])
    return SymmetryCertificate(C, condition, tol, dev, dev <= tol, worst[1] if dev > tol else None)


def _check_s_star(Q: np.ndarray, tree: HierarchyTree, tol: float) -> SymmetryCertificate:
    rho = partial_correlations(Q)
    k = tree.depth
    c = np.full(k - 1, np.nan)
    worst = (0.0, None)
    for t, kids in enumerate(tree.children):
        if not kids:
            continue
        s = float(np.sum(rho[list(kids), t] ** 2))
        lv = tree.level[t]
        if np.isnan(c[lv]):
            c[lv] = s
            continue
        dev = abs(s - c[lv]) / max(1.0, abs(c[lv]))
        if dev > worst[0]:
            worst = (dev, (tree.labels[t], tree.labels[kids[0]]))
    C = np.eye(k)
    for lv in range(k - 1):
        C[lv, lv + 1] = C[lv + 1, lv] = np.sqrt(c[lv])
    dev = float(worst[0])
    return SymmetryCertificate(C, "S*", tol, dev, dev <= tol, worst[1] if dev > tol else None)


def rescale(Q: np.ndarray, walk: AuxWalk) -> tuple[np.ndarray, np.ndarray]:
    """Rescale coordinates so that ``Q~[t, t] = P(t)``.

    Returns ``(Q~, s)`` with ``beta~ = s * beta``; partial correlations are
    unchanged.
    """
    Q = np.asarray(Q, dtype=float)
    s = np.sqrt(np.diag(Q) / walk.marginal)
    return Q / np.outer(s, s), s
