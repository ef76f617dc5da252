"""Gaussian hierarchical models on trees and their posterior precision.

Each non-root node ``t`` carries ``gamma_t ~ N(gamma_pa(t), 1/tau_t)``; the
root has a flat prior. Leaf ``t`` holds ``n_t`` observations drawn from
``N(gamma_t, 1/tau_e_t)``, summarised by their mean and within-leaf sum of
squares. Per-leaf arrays follow the order of ``tree.leaves``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .rng import stream
from .tree import HierarchyTree, build_tree


class ModelError(ValueError):
    """Invalid model: non-positive precision, missing data, non-PD posterior."""


@dataclass(frozen=True, eq=False)
class ModelInstance:
    """A tree with per-node precisions and per-leaf data summaries.

    Parameters
    ----------
    tree : HierarchyTree
    tau : ndarray, shape (n_nodes,)
        Prior precision of each node around its parent; ``tau[0]`` is the
        (flat) root prior and must be 0.
    tau_e : ndarray, shape (n_leaves,)
        Observation precision at each leaf.
    n_obs : ndarray of int, shape (n_leaves,)
        Replicates per leaf.
    ybar : ndarray, shape (n_leaves,), optional
        Leaf sample means. ``None`` until data are attached.
    ss_within : ndarray, shape (n_leaves,), optional
        Within-leaf sums of squares ``sum_k (y_tk - ybar_t)**2``. Only the
        variance-augmented sampler needs them.
    true_latent : ndarray, shape (n_nodes,), optional
        Centred latent values used to simulate the data, if known.
    """

    tree: HierarchyTree
    tau: np.ndarray
    tau_e: np.ndarray
    n_obs: np.ndarray
    ybar: np.ndarray | None = None
    ss_within: np.ndarray | None = None
    true_latent: np.ndarray | None = None

    def __post_init__(self):
        n, m = self.tree.n_nodes, len(self.tree.leaves)
        tau = np.array(self.tau, dtype=float)
        tau_e = np.array(self.tau_e, dtype=float)
        n_obs = np.array(self.n_obs, dtype=np.int64)
        if tau.shape != (n,):
            raise ModelError(f"tau must have one entry per node ({n}), got shape {tau.shape}")
        if tau_e.shape != (m,) or n_obs.shape != (m,):
            raise ModelError(f"tau_e and n_obs must have one entry per leaf ({m})")
        if tau[0] != 0:
            raise ModelError("root prior precision must be 0 (flat prior)")
        if n > 1 and not np.all(tau[1:] > 0):
            raise ModelError("node precisions must be strictly positive")
        if not np.all(tau_e > 0):
            raise ModelError("observation precisions must be strictly positive")
        if not np.all(n_obs >= 1):
            raise ModelError("every leaf needs at least one observation")
        if not (np.all(np.isfinite(tau)) and np.all(np.isfinite(tau_e))):
            raise ModelError("precisions must be finite")
        for name, arr in (("tau", tau), ("tau_e", tau_e), ("n_obs", n_obs)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name, size in (("ybar", m), ("ss_within", m), ("true_latent", n)):
            val = getattr(self, name)
            if val is not None:
                val = np.array(val, dtype=float)
                if val.shape != (size,):
                    raise ModelError(f"{name} must have shape ({size},)")
                val.setflags(write=False)
                object.__setattr__(self, name, val)

    @property
    def n_total(self) -> int:
        return int(self.n_obs.sum())

    @property
    def has_data(self) -> bool:
        return self.ybar is not None

    @property
    def leaf_precision(self) -> np.ndarray:
        """Data precision ``n_t * tau_e_t`` of each leaf mean."""
        return self.n_obs * self.tau_e

    def with_data(self, ybar, ss_within=None, true_latent=None) -> "ModelInstance":
        return replace(self, ybar=ybar, ss_within=ss_within, true_latent=true_latent)

    def with_precisions(self, tau, tau_e) -> "ModelInstance":
        return replace(self, tau=tau, tau_e=tau_e)

    def level_homogeneous(self, rtol: float = 1e-12) -> bool:
        """True when every level shares one precision and all leaves one ``tau_e`` and ``n``."""
        for lev in self.tree.levels[1:]:
            if not np.allclose(self.tau[lev], self.tau[lev[0]], rtol=rtol, atol=0):
                return False
        return bool(
            np.allclose(self.tau_e, self.tau_e[0], rtol=rtol, atol=0)
            and np.all(self.n_obs == self.n_obs[0])
        )


# -- constructors -------------------------------------------------------------


def symmetric_model(
    branching: Sequence[int],
    level_variances: Sequence[float],
    sigma2_e: float,
    n_per_leaf: int,
) -> ModelInstance:
    """Balanced model with one prior variance per level.

    ``level_variances[d]`` is the variance of level ``d + 1`` nodes around their
    parents, so its length equals ``len(branching)``.
    """
    if len(level_variances) != len(branching):
        raise ModelError("need one variance per non-root level")
    tree = build_tree(list(branching))
    tau = np.zeros(tree.n_nodes)
    for d, v in enumerate(level_variances, start=1):
        tau[tree.levels[d]] = 1.0 / _positive(v, f"level {d} variance")
    m = len(tree.leaves)
    return ModelInstance(
        tree,
        tau,
        np.full(m, 1.0 / _positive(sigma2_e, "sigma2_e")),
        np.full(m, int(n_per_leaf)),
    )


def s3(I: int, J: int, K: int, sigma2_a: float, sigma2_b: float, sigma2_e: float) -> ModelInstance:
    """Symmetric three-level model ``y_ijk = mu + a_i + b_ij + e_ijk``."""
    return symmetric_model((I, J), (sigma2_a, sigma2_b), sigma2_e, K)


def ns3(
    sigma2_a: float,
    sigma2_b: Sequence[float],
    sigma2_e: Sequence[Sequence[float]],
    K: Sequence[Sequence[int]],
) -> ModelInstance:
    """Three-level model with group-specific variances and replicate counts.

    ``sigma2_b[i]`` is the variance of the ``b_ij`` in group ``i``; ``sigma2_e[i][j]``
    and ``K[i][j]`` give the noise variance and replicate count of cell ``ij``.
    The number of cells in group ``i`` is ``len(K[i])``.
    """
    I = len(sigma2_b)
    if len(sigma2_e) != I or len(K) != I:
        raise ModelError("sigma2_b, sigma2_e and K must all have one entry per group")
    J = [len(k) for k in K]
    if any(len(s) != j for s, j in zip(sigma2_e, J)):
        raise ModelError("sigma2_e[i] must match K[i] in length")
    tree = build_tree([I, J])
    tau = np.zeros(tree.n_nodes)
    tau[tree.levels[1]] = 1.0 / _positive(sigma2_a, "sigma2_a")
    for i, lev1 in enumerate(tree.levels[1]):
        tau[list(tree.children[lev1])] = 1.0 / _positive(sigma2_b[i], "sigma2_b")
    tau_e = 1.0 / np.array([_positive(v, "sigma2_e") for row in sigma2_e for v in row])
    n_obs = np.array([k for row in K for k in row])
    return ModelInstance(tree, tau, tau_e, n_obs)


def ns2(tau_a: float, tau_e: Sequence[float], J: Sequence[int]) -> ModelInstance:
    """Two-level model: ``gamma_i ~ N(mu, 1/tau_a)``, ``J_i`` draws ``N(gamma_i, 1/tau_e_i)``."""
    if len(tau_e) != len(J):
        raise ModelError("tau_e and J must have one entry per group")
    tree = build_tree([len(J)])
    tau = np.zeros(tree.n_nodes)
    tau[1:] = _positive(tau_a, "tau_a")
    return ModelInstance(tree, tau, np.asarray(tau_e, dtype=float), np.asarray(J))


def weakly_symmetric(
    tree: HierarchyTree,
    level_precisions: Sequence[float],
    tau_e: float,
    n_obs: Sequence[int] | int = 1,
) -> ModelInstance:
    """Model on an arbitrary tree whose precisions offset the uneven branching.

    Node ``t`` gets ``tau_l(t) / prod_{s < t} |ch(s)|`` and leaf ``t`` gets
    ``tau_e / (n_t prod_{s < t} |ch(s)|)``; the product runs over strict
    ancestors. The resulting posterior has a uniform auxiliary walk.
    """
    if len(level_precisions) != tree.depth - 1:
        raise ModelError("need one precision per non-root level")
    fan = np.ones(tree.n_nodes)
    for t in range(1, tree.n_nodes):
        p = tree.parent[t]
        fan[t] = fan[p] * len(tree.children[p])
    tau = np.zeros(tree.n_nodes)
    for t in range(1, tree.n_nodes):
        tau[t] = _positive(level_precisions[tree.level[t] - 1], "level precision") / fan[t]
    m = len(tree.leaves)
    n_obs = np.broadcast_to(np.asarray(n_obs, dtype=np.int64), (m,)).copy()
    tau_leaf = _positive(tau_e, "tau_e") / (n_obs * fan[tree.leaves])
    return ModelInstance(tree, tau, tau_leaf, n_obs)


def _positive(x, what: str) -> float:
    x = float(x)
    if not (x > 0 and np.isfinite(x)):
        raise ModelError(f"{what} must be positive and finite, got {x}")
    return x


# -- data ---------------------------------------------------------------------


def simulate_data(model: ModelInstance, true_root: float, seed: int) -> ModelInstance:
    """Draw latent values top-down and raw observations, keep their summaries.

    The root is fixed at ``true_root``. Draws come from the ``"data"`` stream,
    so the result depends only on ``seed``.
    """
    rng = stream(seed, "data")
    tree = model.tree
    gamma = np.empty(tree.n_nodes)
    gamma[0] = true_root
    for lev in tree.levels[1:]:
        gamma[lev] = gamma[tree.parent_array[lev]] + rng.standard_normal(len(lev)) / np.sqrt(
            model.tau[lev]
        )
    leaves = tree.leaves
    sd = 1.0 / np.sqrt(model.tau_e)
    ybar = np.empty(len(leaves))
    ss = np.empty(len(leaves))
    for j, (t, n) in enumerate(zip(leaves, model.n_obs)):
        y = gamma[t] + sd[j] * rng.standard_normal(n)
        ybar[j] = y.mean()
        ss[j] = np.sum((y - ybar[j]) ** 2)
    return model.with_data(ybar, ss, gamma)


# -- posterior ----------------------------------------------------------------


def posterior_precision_sparse(model: ModelInstance) -> sp.csr_matrix:
    """Posterior precision of the centred vector as a sparse matrix."""
    tree = model.tree
    n = tree.n_nodes
    child = np.arange(1, n)
    par = tree.parent_array[1:]
    w = model.tau[1:]
    diag = model.tau.copy()
    np.add.at(diag, par, w)
    diag[tree.leaves] += model.leaf_precision
    rows = np.concatenate([np.arange(n), child, par])
    cols = np.concatenate([np.arange(n), par, child])
    vals = np.concatenate([diag, -w, -w])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def posterior_precision(model: ModelInstance, check: bool = True) -> np.ndarray:
    """Dense posterior precision ``Q`` of the centred vector given the data.

    Off-diagonal ``Q[t, pa(t)] = -tau_t``; internal diagonals are
    ``tau_t + sum_children tau_s`` and leaf diagonals ``tau_t + n_t tau_e_t``.
    With ``check`` the matrix is verified positive definite.
    """
    Q = posterior_precision_sparse(model).toarray()
    if check:
        try:
            np.linalg.cholesky(Q)
        except np.linalg.LinAlgError:
            raise ModelError("posterior precision is not positive definite") from None
    return Q


def information_vector(model: ModelInstance) -> np.ndarray:
    """Linear term ``h`` of the posterior, non-zero only at leaves."""
    if model.ybar is None:
        raise ModelError("model has no data attached")
    h = np.zeros(model.tree.n_nodes)
    h[model.tree.leaves] = model.leaf_precision * model.ybar
    return h


def posterior_mean(model: ModelInstance) -> np.ndarray:
    return np.linalg.solve(posterior_precision(model), information_vector(model))


def a_matrix(Q: np.ndarray) -> np.ndarray:
    """Full-conditional regression coefficients ``A[t, r] = -Q[t, r] / Q[t, t]``."""
    Q = np.asarray(Q, dtype=float)
    d = np.diag(Q)
    if np.any(d == 0):
        raise ModelError("precision matrix has a zero diagonal entry")
    A = -Q / d[:, None] + 0.0
    np.fill_diagonal(A, 0.0)
    return A


# -- normalised variances -----------------------------------------------------


@dataclass(frozen=True)
class NormalizedVariances:
    """Per-level variances divided by the number of lowest-level units they govern.

    For three levels these are ``(s2_a / I, s2_b / (I J), s2_e / (I J K))``.
    """

    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals or not all(v > 0 and np.isfinite(v) for v in vals):
            raise ModelError("normalised variances must be positive and finite")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def __iter__(self):
        return iter(self.values)

    @classmethod
    def from_levels(
        cls, branching: Sequence[int], level_variances: Sequence[float], sigma2_e: float, n_per_leaf: int
    ) -> "NormalizedVariances":
        counts = np.cumprod(list(branching) + [n_per_leaf])
        return cls(tuple(np.append(level_variances, sigma2_e) / counts))

    @classmethod
    def from_model(cls, model: ModelInstance) -> "NormalizedVariances":
        """Normalised variances of a balanced, level-homogeneous model."""
        if not (model.tree.is_balanced and model.level_homogeneous()):
            raise ModelError("normalised variances need a balanced level-homogeneous model")
        tree = model.tree
        var = [1.0 / model.tau[lev[0]] for lev in tree.levels[1:]]
        return cls.from_levels(tree.branching, var, 1.0 / model.tau_e[0], int(model.n_obs[0]))

    def to_model(self, branching: Sequence[int], n_per_leaf: int) -> ModelInstance:
        """A balanced model with these normalised variances."""
        if len(branching) != len(self.values) - 1:
            raise ModelError("branching must have one entry per latent level")
        counts = np.cumprod(list(branching) + [n_per_leaf])
        raw = np.asarray(self.values) * counts
        return symmetric_model(branching, raw[:-1], raw[-1], n_per_leaf)
