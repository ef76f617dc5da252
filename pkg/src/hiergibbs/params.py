"""Hierarchical reparametrizations and the rules that choose them.

A reparametrization maps the centred vector ``gamma`` to ``beta = Lam @ gamma``
where ``Lam[t, r]`` may be non-zero only when ``r`` is ``t`` or one of its
ancestors. Centring indicators use 0 for centred and 1 for non-centred.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .model import ModelInstance, NormalizedVariances, information_vector, posterior_precision
from .tree import HierarchyTree

_LETTER = {"c": 0, "n": 1}


class ParametrizationError(ValueError):
    """Invalid centring code, coefficient map or decision-rule input."""


@dataclass(frozen=True)
class CenteringAssignment:
    """0/1 centring indicators, either one per non-root level or one per node.

    With ``per_level=True``, ``values[d - 1]`` applies to every level-``d`` node.
    Otherwise ``values`` has one entry per node (the root entry is ignored).
    """

    values: tuple[int, ...]
    per_level: bool = True

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        if any(v not in (0, 1) for v in vals):
            raise ParametrizationError(f"centring indicators must be 0 or 1, got {self.values}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_code(cls, code: str) -> "CenteringAssignment":
        """Parse per-level shorthand such as ``"cn"`` (level 1 centred, level 2 not)."""
        try:
            return cls(tuple(_LETTER[c] for c in code.lower()))
        except KeyError:
            raise ParametrizationError(
                f"bad parametrization code {code!r}: use letters 'c' (centred) and 'n' (non-centred)"
            ) from None

    @classmethod
    def centred(cls, k: int) -> "CenteringAssignment":
        return cls((0,) * (k - 1))

    @classmethod
    def non_centred(cls, k: int) -> "CenteringAssignment":
        return cls((1,) * (k - 1))

    @property
    def code(self) -> str:
        if not self.per_level:
            raise ParametrizationError("only per-level assignments have a short code")
        return "".join("cn"[v] for v in self.values)

    def resolve(self, tree: HierarchyTree) -> np.ndarray:
        """Per-node indicator array (root entry 0)."""
        if self.per_level:
            if len(self.values) != tree.depth - 1:
                raise ParametrizationError(
                    f"assignment {self.values} has {len(self.values)} levels, tree has {tree.depth - 1}"
                )
            out = np.zeros(tree.n_nodes, dtype=np.int64)
            out[1:] = np.asarray(self.values)[tree.level[1:] - 1]
            return out
        if len(self.values) != tree.n_nodes:
            raise ParametrizationError("per-node assignment must have one value per node")
        out = np.asarray(self.values, dtype=np.int64)
        out[0] = 0
        return out

    def to_reparam(self, tree: HierarchyTree) -> "Reparametrization":
        return centering_to_reparam(self, tree)


@dataclass(frozen=True, eq=False)
class Reparametrization:
    """Ancestor-sparse linear map ``beta = lam @ gamma`` on a tree."""

    tree: HierarchyTree
    lam: np.ndarray
    name: str = "custom"
    _inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.tree.n_nodes
        lam = np.array(self.lam, dtype=float)
        if lam.shape != (n, n):
            raise ParametrizationError(f"coefficient matrix must be {n}x{n}")
        if np.any(lam[~self.tree.ancestor_matrix] != 0):
            raise ParametrizationError("coefficients allowed only from a node to itself or its ancestors")
        if np.any(np.diag(lam) == 0):
            raise ParametrizationError("diagonal coefficients must be non-zero")
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)
        # breadth-first order makes lam lower triangular
        inv = solve_triangular(lam, np.eye(n), lower=True)
        inv[~self.tree.ancestor_matrix] = 0.0
        inv.setflags(write=False)
        object.__setattr__(self, "_inv", inv)

    @classmethod
    def identity(cls, tree: HierarchyTree) -> "Reparametrization":
        return cls(tree, np.eye(tree.n_nodes), name="identity")

    @property
    def lam_inv(self) -> np.ndarray:
        return self._inv

    def apply(self, gamma: np.ndarray) -> np.ndarray:
        """``beta = lam @ gamma``; also accepts a stack of states (last axis = nodes)."""
        return np.asarray(gamma) @ self.lam.T

    def unapply(self, beta: np.ndarray) -> np.ndarray:
        return np.asarray(beta) @ self._inv.T

    def apply_to_precision(self, Q: np.ndarray) -> np.ndarray:
        """Precision of ``beta``: ``lam^-T Q lam^-1``."""
        return self._inv.T @ Q @ self._inv

    def apply_to_information(self, h: np.ndarray) -> np.ndarray:
        return self._inv.T @ h

    def inverse(self) -> "Reparametrization":
        return Reparametrization(self.tree, self._inv, name=f"inverse({self.name})")

    def compose(self, other: "Reparametrization") -> "Reparametrization":
        """The map ``gamma -> self(other(gamma))``."""
        return Reparametrization(self.tree, self.lam @ other.lam, name=f"{self.name}*{other.name}")


def centering_to_reparam(assign: CenteringAssignment, tree: HierarchyTree) -> Reparametrization:
    """Map centring indicators to ``beta_t = gamma_t - lambda_t gamma_pa(t)``."""
    ind = assign.resolve(tree)
    lam = np.eye(tree.n_nodes)
    t = np.arange(1, tree.n_nodes)
    lam[t, tree.parent_array[1:]] = -ind[1:]
    name = assign.code if assign.per_level else "bespoke"
    return Reparametrization(tree, lam, name=name)


def as_reparam(param, tree: HierarchyTree) -> Reparametrization:
    """Accept a Reparametrization, CenteringAssignment or short code.

    A one-letter code applies to every non-root level.
    """
    if isinstance(param, Reparametrization):
        if param.tree is not tree and param.tree.parent != tree.parent:
            raise ParametrizationError("reparametrization belongs to a different tree")
        return param
    if isinstance(param, str):
        if len(param) == 1 and tree.depth > 2:
            param = param * (tree.depth - 1)
        param = CenteringAssignment.from_code(param)
    if isinstance(param, CenteringAssignment):
        return centering_to_reparam(param, tree)
    raise TypeError(f"cannot interpret {param!r} as a parametrization")


def satisfies_h(Q: np.ndarray, tree: HierarchyTree, tol: float = 1e-10) -> bool:
    """Whether ``Q[t, r]`` vanishes for every pair of incomparable nodes."""
    Q = np.asarray(Q)
    scale = np.sqrt(np.outer(np.abs(np.diag(Q)), np.abs(np.diag(Q))))
    scale[scale == 0] = 1.0
    off = np.abs(Q)[~tree.comparable] / scale[~tree.comparable]
    return bool(off.size == 0 or off.max() <= tol)


def satisfies_t(Q: np.ndarray, tree: HierarchyTree) -> bool:
    """Whether ``Q`` is zero except on the diagonal and parent-child pairs."""
    mask = np.eye(tree.n_nodes, dtype=bool)
    t = np.arange(1, tree.n_nodes)
    mask[t, tree.parent_array[1:]] = True
    mask[tree.parent_array[1:], t] = True
    return bool(np.all(np.asarray(Q)[~mask] == 0))


# -- optimal partial non-centring ---------------------------------------------


@dataclass(frozen=True, eq=False)
class PncpResult:
    """Exact decorrelating reparametrization and the precisions it produces."""

    reparam: Reparametrization
    D: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        """``w_t`` in ``beta_t = gamma_t - w_t gamma_pa(t)`` (``w_0 = 0``)."""
        tree = self.reparam.tree
        w = np.zeros(tree.n_nodes)
        t = np.arange(1, tree.n_nodes)
        w[1:] = -self.reparam.lam[t, tree.parent_array[1:]]
        return w


def optimal_pncp(Q: np.ndarray, tree: HierarchyTree, eps: float = 1e-14) -> PncpResult:
    """Partial non-centring that makes the posterior coordinates independent.

    Processes nodes from the leaves up: ``D_tt = Q_tt - sum_c lam_ct**2 D_cc``
    and ``lam_t,pa(t) = Q_t,pa(t) / D_tt``. Then ``lam.T @ diag(D) @ lam == Q``.
    """
    Q = np.asarray(Q, dtype=float)
    if not satisfies_t(Q, tree):
        raise ParametrizationError("optimal PNCP needs a tree-structured (centred) precision")
    n = tree.n_nodes
    D = np.diag(Q).copy()
    lam = np.eye(n)
    for t in range(n - 1, -1, -1):
        for c in tree.children[t]:
            D[t] -= lam[c, t] ** 2 * D[c]
        assert D[t] > eps, f"non-positive conditional precision at node {tree.labels[t]!r}"
        if t > 0:
            p = tree.parent[t]
            lam[t, p] = Q[t, p] / D[t]
    return PncpResult(Reparametrization(tree, lam, name="pncp"), D)


# -- decision rules -----------------------------------------------------------


def recommend_parametrization_3(tv: NormalizedVariances | Sequence[float]) -> CenteringAssignment:
    """Rate-optimal per-level centring for three levels.

    Level 2 is centred iff ``s_b >= s_e``; level 1 is centred iff
    ``s_a >= s_b + s_e``. Ties go to centring.
    """
    if not isinstance(tv, NormalizedVariances):
        tv = NormalizedVariances(tuple(tv))
    if len(tv) != 3:
        raise ParametrizationError("recommend_parametrization_3 needs three normalised variances")
    a, b, e = tv.values
    return CenteringAssignment((int(not a >= b + e), int(not b >= e)))


def bespoke_recommend_2(model: ModelInstance) -> CenteringAssignment:
    """Optimal per-group centring for a two-level model: non-centre group ``i`` iff ``tau_a > J_i tau_e_i``."""
    tree = model.tree
    if tree.depth != 2:
        raise ParametrizationError("bespoke_recommend_2 needs a two-level model")
    vals = np.zeros(tree.n_nodes, dtype=int)
    vals[tree.leaves] = model.tau[tree.leaves] > model.leaf_precision
    return CenteringAssignment(tuple(vals), per_level=False)


def bespoke_recommend_3(model: ModelInstance) -> CenteringAssignment:
    """Heuristic per-node centring for a three-level model.

    Cell ``ij`` is non-centred iff ``s2_b_i < s2_e_ij / K_ij``; group ``i`` is
    non-centred iff ``1 / s2_a > sum_j 1 / (s2_b_i + s2_e_ij / K_ij)``.
    """
    tree = model.tree
    if tree.depth != 3:
        raise ParametrizationError("bespoke_recommend_3 needs a three-level model")
    vals = np.zeros(tree.n_nodes, dtype=int)
    leaves = tree.leaves
    var_b = 1.0 / model.tau[leaves]
    var_e = 1.0 / model.leaf_precision
    vals[leaves] = var_b < var_e
    marg = 1.0 / (var_b + var_e)
    for i in tree.levels[1]:
        kids = np.asarray(tree.children[i])
        vals[i] = model.tau[i] > marg[kids - leaves[0]].sum()
    return CenteringAssignment(tuple(vals), per_level=False)


def transformed_target(model: ModelInstance, param) -> tuple[np.ndarray, np.ndarray | None, Reparametrization]:
    """Precision and information vector of the coordinates ``beta``."""
    rep = as_reparam(param, model.tree)
    Q = rep.apply_to_precision(posterior_precision(model))
    h = rep.apply_to_information(information_vector(model)) if model.has_data else None
    return Q, h, rep


__all__ = [
    "CenteringAssignment",
    "ParametrizationError",
    "PncpResult",
    "Reparametrization",
    "as_reparam",
    "bespoke_recommend_2",
    "bespoke_recommend_3",
    "centering_to_reparam",
    "optimal_pncp",
    "recommend_parametrization_3",
    "satisfies_h",
    "satisfies_t",
    "transformed_target",
]
