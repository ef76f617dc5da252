"""Deterministic-scan Gibbs samplers for hierarchical parametrizations.

One sweep updates the levels from the root down. Under a hierarchical
parametrization the nodes of one level are conditionally independent, so a
whole level is drawn at once from the same conditioning state. The normal
deviate used for sweep ``s`` and node ``i`` is element ``(s, i)`` of the
``"state"`` stream, whichever code path runs the sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.linalg import solve_triangular

from .model import (
    ModelError,
    ModelInstance,
    NormalizedVariances,
    a_matrix,
    information_vector,
    posterior_precision,
    posterior_precision_sparse,
)
from .params import (
    CenteringAssignment,
    Reparametrization,
    as_reparam,
    centering_to_reparam,
    recommend_parametrization_3,
    satisfies_h,
)
from .rng import NoiseBlocks, stream
from .tree import HierarchyTree

DENSE_LIMIT = 200


def spectral_radius(M: np.ndarray) -> float:
    """Largest eigenvalue modulus of ``M``, robust to defective eigenvalues.

    A Jordan block of size ``m`` is computed as a ring of ``m`` eigenvalues
    of radius about ``(eps |M|) ** (1 / m)``. Eigenvalues whose first-order
    perturbation radii (``eps |M|`` times the condition number, capped at
    the ring radius for ``m = 3``) overlap are grouped, members are dropped
    from a group until its spread fits the ring radius, and each group is
    replaced by its mean, which is accurate to about ``eps``.
    """
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    w, vl, vr = sla.eig(M, left=True, right=True)
    scale = max(np.linalg.norm(M, 1), 1.0)
    unit = 100.0 * np.finfo(float).eps * scale
    overlap = np.abs(np.sum(vl.conj() * vr, axis=0))
    cap = unit ** (1.0 / 3.0) * scale ** (2.0 / 3.0)
    tol = np.minimum(unit / np.maximum(overlap, 1e-300), cap)
    close = np.abs(w[:, None] - w[None, :]) <= tol[:, None] + tol[None, :]
    n, labels = connected_components(sp.csr_matrix(close), directed=False)
    best = 0.0
    for g in range(n):
        members = list(w[labels == g])
        while len(members) > 1:
            mu = np.mean(members)
            dist = np.abs(np.array(members) - mu)
            if dist.max() <= (unit ** (1.0 / len(members))) * scale ** (1.0 - 1.0 / len(members)):
                break
            best = max(best, abs(members.pop(int(np.argmax(dist)))))
        best = max(best, abs(np.mean(members)))
    return float(best)


class SamplerError(ValueError):
    """Sampler configuration that cannot produce a valid Gibbs chain."""


# -- exact one-sweep representation -------------------------------------------


@dataclass(frozen=True, eq=False)
class GibbsUpdate:
    """One sweep as ``beta' = B @ beta + offset + F @ z`` with ``z ~ N(0, I)``.

    Attributes
    ----------
    B : ndarray
        ``(I - L)^-1 U`` for the A-matrix split in sweep order.
    offset : ndarray or None
        Deterministic part; ``None`` when the model carries no data.
    F : ndarray
        Noise factor ``(I - L)^-1 diag(Q_ii^-1/2)``, columns in node order.
    order : ndarray
        Sweep order (node indices); breadth-first for every sampler here.
    """

    B: np.ndarray
    offset: np.ndarray | None
    F: np.ndarray
    order: np.ndarray
    precision: np.ndarray
    reparam: Reparametrization | None = None

    @property
    def noise_cov(self) -> np.ndarray:
        return self.F @ self.F.T

    @property
    def spectral_radius(self) -> float:
        return spectral_radius(self.B)

    def step(self, beta: np.ndarray, z: np.ndarray | None = None) -> np.ndarray:
        out = self.B @ beta
        if self.offset is not None:
            out = out + self.offset
        if z is not None:
            out = out + self.F @ z
        return out

    def stationarity_residual(self) -> float:
        """Max-abs of ``Sigma - B Sigma B^T - F F^T`` relative to max-abs ``Sigma``."""
        Sigma = np.linalg.inv(self.precision)
        R = Sigma - self.B @ Sigma @ self.B.T - self.noise_cov
        return float(np.max(np.abs(R)) / np.max(np.abs(Sigma)))


def sweep_matrices(Q: np.ndarray, h: np.ndarray | None = None, order: Sequence[int] | None = None):
    """``B``, offset and noise factor of a coordinate sweep over ``Q`` in ``order``.

    Returned matrices are expressed in the original node order.
    """
    Q = np.asarray(Q, dtype=float)
    n = len(Q)
    perm = np.arange(n) if order is None else np.asarray(order)
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError("order must be a permutation of the node indices")
    Qp = Q[np.ix_(perm, perm)]
    A = a_matrix(Qp)
    L = np.tril(A, -1)
    U = np.triu(A, 1)
    ImL = np.eye(n) - L
    B = solve_triangular(ImL, U, lower=True, unit_diagonal=True)
    F = solve_triangular(ImL, np.diag(1.0 / np.sqrt(np.diag(Qp))), lower=True, unit_diagonal=True)
    off = None
    if h is not None:
        off = solve_triangular(ImL, np.asarray(h, dtype=float)[perm] / np.diag(Qp), lower=True, unit_diagonal=True)
    inv = np.argsort(perm)
    B = B[np.ix_(inv, inv)]
    F = F[np.ix_(inv, inv)]
    if off is not None:
        off = off[inv]
    return B, off, F


def update_matrix(model: ModelInstance, param="c") -> GibbsUpdate:
    """Exact linear-Gaussian form of one breadth-first sweep in ``param`` coordinates.

    ``param`` may be a Reparametrization, a CenteringAssignment or a short code
    such as ``"cn"``; a single letter applies to every level.
    """
    rep = as_reparam(param, model.tree)
    Q = rep.apply_to_precision(posterior_precision(model))
    h = rep.apply_to_information(information_vector(model)) if model.has_data else None
    B, off, F = sweep_matrices(Q, h)
    return GibbsUpdate(B, off, F, np.arange(model.tree.n_nodes), Q, rep)


# -- traces -------------------------------------------------------------------


@dataclass(eq=False)
class Trace:
    """Recorded sweeps, one row per kept iteration, columns in node order."""

    states: np.ndarray
    labels: tuple[str, ...]
    seed: int
    param: str
    thin: int = 1
    variances: np.ndarray | None = None
    variance_labels: tuple[str, ...] = ()
    assignments: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.states)

    def column(self, label: str) -> np.ndarray:
        try:
            return self.states[:, self.labels.index(label)]
        except ValueError:
            raise KeyError(f"coordinate {label!r} not in trace") from None


# -- level-wise sparse sweeper ------------------------------------------------


class _TreeGradient:
    """``Q @ gamma - h`` for a centred tree precision without forming ``Q``."""

    def __init__(self, tree: HierarchyTree):
        self.n = tree.n_nodes
        self.par = tree.parent_array[1:]
        self.leaves = tree.leaves

    def __call__(self, gamma, tau, leaf_prec, h_leaf):
        w = tau[1:] * (gamma[1:] - gamma[self.par])
        g = np.bincount(self.par, weights=-w, minlength=self.n)
        g[1:] += w
        g[self.leaves] += leaf_prec * gamma[self.leaves] - h_leaf
        return g


class _LevelSweeper:
    """Gibbs sweep that keeps the centred state and moves along ``Lam^-1`` columns.

    Changing ``beta_t`` with the other ``beta`` fixed moves ``gamma`` along
    column ``t`` of ``Lam^-1``. For level ``d`` those columns form ``E_d``; the
    conditional precisions are ``diag(E_d^T Q E_d)``, which must be diagonal.
    """

    def __init__(self, tree: HierarchyTree, rep: Reparametrization, components: list[sp.spmatrix]):
        self.tree = tree
        self.rep = rep
        E = sp.csc_matrix(rep.lam_inv)
        self.E = [E[:, lev] for lev in tree.levels]
        self.Et = [e.T.tocsr() for e in self.E]
        self.slices = [slice(int(lev[0]), int(lev[-1]) + 1) for lev in tree.levels]
        # conditional precision of each level = coeffs @ P[d]
        self.P = []
        for d, e in enumerate(self.E):
            rows = []
            for C in components:
                M = (e.T @ C @ e).toarray()
                off = M - np.diag(np.diag(M))
                if np.any(np.abs(off) > 1e-10 * max(1.0, np.abs(M).max())):
                    raise SamplerError(
                        f"parametrization {rep.name!r} couples nodes within level {d}; "
                        "full conditionals would need cross-branch terms"
                    )
                rows.append(np.diag(M))
            self.P.append(np.array(rows))
        self.lam_csr = sp.csr_matrix(rep.lam)

    def sweep(self, gamma, z, coeffs, grad_fn):
        for d in range(len(self.E)):
            p = coeffs @ self.P[d]
            g = grad_fn(gamma)
            u = -(self.Et[d] @ g) / p + z[self.slices[d]] / np.sqrt(p)
            gamma = gamma + self.E[d] @ u
        return gamma

    def beta(self, gamma):
        return self.lam_csr @ gamma


def _precision_components(tree: HierarchyTree) -> list[sp.csr_matrix]:
    """Unit-precision pieces: one per non-root level, then the leaf data term."""
    n = tree.n_nodes
    comps = []
    for lev in tree.levels[1:]:
        par = tree.parent_array[lev]
        rows = np.concatenate([lev, par, lev, par])
        cols = np.concatenate([lev, par, par, lev])
        vals = np.concatenate([np.ones(len(lev)), np.ones(len(lev)), -np.ones(len(lev)), -np.ones(len(lev))])
        comps.append(sp.csr_matrix((vals, (rows, cols)), shape=(n, n)))
    return comps


# -- fixed-variance chains ----------------------------------------------------


def run_chain(
    model: ModelInstance,
    param="c",
    iters: int = 1000,
    seed: int = 0,
    init: np.ndarray | None = None,
    thin: int = 1,
    method: str = "auto",
) -> Trace:
    """Run a Gibbs chain in the coordinates ``beta = Lam gamma`` of ``param``.

    Parameters
    ----------
    init : ndarray, optional
        Starting state in ``param`` coordinates; zeros by default.
    method : {"auto", "dense", "sparse", "s3"}
        ``dense`` iterates the exact affine sweep, ``sparse`` sweeps level by
        level in O(|T|) per level, ``s3`` uses closed-form conditionals of the
        balanced three-level model (codes ``"cc"`` and ``"nn"`` only). All
        paths consume the same noise and agree to rounding error.
    """
    if iters < 1:
        raise SamplerError("iters must be at least 1")
    if thin < 1:
        raise SamplerError("thin must be at least 1")
    if not model.has_data:
        raise ModelError("model has no data attached")
    tree = model.tree
    n = tree.n_nodes
    rep = as_reparam(param, tree)
    beta0 = np.zeros(n) if init is None else np.array(init, dtype=float)
    if beta0.shape != (n,):
        raise SamplerError(f"init must have {n} entries")
    if method == "auto":
        method = "dense" if n <= DENSE_LIMIT else "sparse"

    noise = NoiseBlocks(seed, n)
    if method == "dense":
        upd = update_matrix(model, rep)
        if not satisfies_h(upd.precision, tree):
            raise SamplerError(f"parametrization {rep.name!r} is not hierarchical for this model")
        states = _run_affine(upd, beta0, iters, thin, noise)
    elif method == "sparse":
        Qs = posterior_precision_sparse(model)
        sweeper = _LevelSweeper(tree, rep, [Qs])
        h = information_vector(model)
        grad = lambda g: Qs @ g - h
        gamma = rep.unapply(beta0)
        coeffs = np.ones(1)
        states = np.empty((iters // thin, n))
        s = 0
        while s < iters:
            Z = noise.take(min(noise.chunk, iters - s))
            for z in Z:
                gamma = sweeper.sweep(gamma, z, coeffs, grad)
                s += 1
                if s % thin == 0:
                    states[s // thin - 1] = sweeper.beta(gamma)
    elif method == "s3":
        states = _run_s3(model, rep, beta0, iters, thin, noise)
    else:
        raise SamplerError(f"unknown method {method!r}")
    return Trace(states, tree.labels, seed, rep.name, thin)


def _run_affine(upd: GibbsUpdate, beta, iters, thin, noise: NoiseBlocks) -> np.ndarray:
    B = upd.B
    Ft = upd.F.T
    states = np.empty((iters // thin, len(beta)))
    s = 0
    while s < iters:
        W = noise.take(min(noise.chunk, iters - s)) @ Ft + upd.offset
        for w in W:
            beta = B @ beta + w
            s += 1
            if s % thin == 0:
                states[s // thin - 1] = beta
    return states


def _run_s3(model: ModelInstance, rep: Reparametrization, beta, iters, thin, noise) -> np.ndarray:
    """Closed-form conditionals for the balanced three-level model."""
    tree = model.tree
    if tree.depth != 3 or not tree.is_balanced or not model.level_homogeneous():
        raise SamplerError("the s3 path needs a balanced, level-homogeneous three-level model")
    if rep.name not in ("cc", "nn"):
        raise SamplerError("the s3 path supports the 'cc' and 'nn' parametrizations only")
    I, J = tree.branching
    K = int(model.n_obs[0])
    va = 1.0 / model.tau[1]
    vb = 1.0 / model.tau[-1]
    ve = 1.0 / model.tau_e[0]
    y = model.ybar.reshape(I, J)
    y_i, y_all = y.mean(axis=1), y.mean()
    n = I * J * K
    mu, a, b = beta[0], beta[1 : 1 + I].copy(), beta[1 + I :].reshape(I, J).copy()
    states = np.empty((iters // thin, tree.n_nodes))
    s = 0
    if rep.name == "nn":
        sd_mu = np.sqrt(ve / n)
        va_e = ve / (J * K)
        ka, sd_a = va / (va + va_e), np.sqrt(va * va_e / (va + va_e))
        vb_e = ve / K
        kb, sd_b = vb / (vb + vb_e), np.sqrt(vb * vb_e / (vb + vb_e))
    else:
        sd_mu = np.sqrt(va / I)
        vbj = vb / J
        sd_a = np.sqrt(va * vbj / (va + vbj))
        vb_e = ve / K
        sd_b = np.sqrt(vb * vb_e / (vb + vb_e))
    while s < iters:
        Z = noise.take(min(noise.chunk, iters - s))
        for z in Z:
            za, zb = z[1 : 1 + I], z[1 + I :].reshape(I, J)
            if rep.name == "nn":
                mu = y_all - a.mean() - b.mean() + sd_mu * z[0]
                a = ka * (y_i - mu - b.mean(axis=1)) + sd_a * za
                b = kb * (y - mu - a[:, None]) + sd_b * zb
            else:
                mu = a.mean() + sd_mu * z[0]
                a = (vbj * mu + va * b.mean(axis=1)) / (vbj + va) + sd_a * za
                b = (vb_e * a[:, None] + vb * y) / (vb + vb_e) + sd_b * zb
            s += 1
            if s % thin == 0:
                row = states[s // thin - 1]
                row[0] = mu
                row[1 : 1 + I] = a
                row[1 + I :] = b.ravel()
    return states


# -- unknown variances ---------------------------------------------------------


@dataclass(frozen=True)
class InverseGammaPrior:
    """Conjugate inverse-gamma prior ``IG(shape, rate)`` on a variance."""

    shape: float = 0.01
    rate: float = 0.01

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise SamplerError("inverse-gamma shape and rate must be positive")


def _as_priors(prior, k: int) -> list[InverseGammaPrior]:
    if prior is None:
        return [InverseGammaPrior()] * k
    if isinstance(prior, InverseGammaPrior):
        return [prior] * k
    if isinstance(prior, dict):
        if prior.get("family", "inverse_gamma") != "inverse_gamma":
            raise SamplerError(f"only conjugate inverse-gamma priors are supported, got {prior.get('family')!r}")
        return [InverseGammaPrior(prior.get("shape", 0.01), prior.get("rate", 0.01))] * k
    priors = list(prior)
    if len(priors) != k:
        raise SamplerError(f"need {k} variance priors (one per level plus noise), got {len(priors)}")
    out = []
    for p in priors:
        if isinstance(p, InverseGammaPrior):
            out.append(p)
        elif isinstance(p, dict):
            out.extend(_as_priors(p, 1))
        else:
            out.append(InverseGammaPrior(*p))
    return out


def run_variance_augmented(
    model: ModelInstance,
    prior=None,
    iters: int = 1000,
    seed: int = 0,
    adaptive: bool = False,
    param="c",
    init: np.ndarray | None = None,
    init_variances: Sequence[float] | None = None,
    thin: int = 1,
) -> Trace:
    """Gibbs sampler over latent values and per-level variances.

    Each iteration sweeps the latent levels in the active parametrization, then
    draws every level variance and the noise variance from its conjugate
    inverse-gamma full conditional. With ``adaptive`` the per-level centring is
    re-chosen after every variance draw using the three-level rule; the latent
    state is carried over exactly because it is stored in centred form.

    Parameters
    ----------
    model : ModelInstance
        Level-homogeneous model with data and within-leaf sums of squares. Its
        precisions are the default starting variances.
    prior
        One ``InverseGammaPrior``, a ``{"family", "shape", "rate"}`` dict or a
        list of ``k`` priors (levels ``1..k-1`` then noise). Default IG(0.01, 0.01).
    init : ndarray, optional
        Starting latent state in ``param`` coordinates (centred coordinates
        when ``adaptive``); zeros by default.

    Returns
    -------
    Trace
        States are in ``param`` coordinates, or centred coordinates when
        ``adaptive``; ``assignments`` lists the sampler used at each kept row.
    """
    tree = model.tree
    k = tree.depth
    if not model.has_data or model.ss_within is None:
        raise ModelError("variance updates need leaf means and within-leaf sums of squares")
    for lev in tree.levels[1:]:
        if not np.allclose(model.tau[lev], model.tau[lev[0]], rtol=1e-12, atol=0):
            raise ModelError("variance-augmented sampling needs one precision per level")
    if not np.allclose(model.tau_e, model.tau_e[0], rtol=1e-12, atol=0):
        raise ModelError("variance-augmented sampling needs a common noise precision")
    if adaptive and (k != 3 or not tree.is_balanced or not np.all(model.n_obs == model.n_obs[0])):
        raise SamplerError("adaptive switching needs a balanced three-level model")
    if iters < 1 or thin < 1:
        raise SamplerError("iters and thin must be at least 1")
    priors = _as_priors(prior, k)

    n = tree.n_nodes
    shapes = np.array([p.shape for p in priors])
    rates = np.array([p.rate for p in priors])
    shapes[:-1] += np.array([len(lev) for lev in tree.levels[1:]]) / 2
    shapes[-1] += model.n_total / 2
    if init_variances is None:
        var = np.array([1.0 / model.tau[lev[0]] for lev in tree.levels[1:]] + [1.0 / model.tau_e[0]])
    else:
        var = np.array(init_variances, dtype=float)
        if var.shape != (k,) or not np.all(var > 0):
            raise SamplerError(f"init_variances needs {k} positive values")

    comps = _precision_components(tree)
    leaves = tree.leaves
    N = sp.csr_matrix((model.n_obs.astype(float), (leaves, leaves)), shape=(n, n))
    comps.append(N)
    sweepers: dict[str, _LevelSweeper] = {}

    def sweeper_for(rep: Reparametrization) -> _LevelSweeper:
        if rep.name not in sweepers:
            sweepers[rep.name] = _LevelSweeper(tree, rep, comps)
        return sweepers[rep.name]

    branching = tree.branching if tree.is_balanced else None
    reps: dict[tuple, Reparametrization] = {}

    def choose(var) -> Reparametrization:
        tv = NormalizedVariances.from_levels(branching, var[:-1], var[-1], int(model.n_obs[0]))
        assign = recommend_parametrization_3(tv)
        if assign.values not in reps:
            reps[assign.values] = centering_to_reparam(assign, tree)
        return reps[assign.values]

    rep = choose(var) if adaptive else as_reparam(param, tree)
    beta0 = np.zeros(n) if init is None else np.array(init, dtype=float)
    gamma = beta0 if adaptive else rep.unapply(beta0)

    grad = _TreeGradient(tree)
    level_of = tree.level
    nobs = model.n_obs.astype(float)
    ybar = model.ybar
    ss_w = float(np.sum(model.ss_within))
    par = tree.parent_array
    level_index = [lev for lev in tree.levels[1:]]

    noise = NoiseBlocks(seed, n)
    vrng = stream(seed, "variance")
    n_keep = iters // thin
    states = np.empty((n_keep, n))
    var_track = np.empty((n_keep, k))
    codes: list[str] = []
    s = 0
    while s < iters:
        Z = noise.take(min(noise.chunk, iters - s))
        for z in Z:
            prec = 1.0 / var
            tau_node = np.concatenate([[0.0], prec[:-1]])[level_of]
            leaf_prec = prec[-1] * nobs
            h_leaf = leaf_prec * ybar
            sw = sweeper_for(rep)
            gamma = sw.sweep(gamma, z, prec, lambda g: grad(g, tau_node, leaf_prec, h_leaf))
            sq = [np.sum((gamma[lev] - gamma[par[lev]]) ** 2) for lev in level_index]
            sq.append(ss_w + np.sum(nobs * (ybar - gamma[leaves]) ** 2))
            var = 1.0 / vrng.gamma(shapes, 1.0 / (rates + 0.5 * np.array(sq)))
            s += 1
            if s % thin == 0:
                states[s // thin - 1] = gamma if adaptive else sw.beta(gamma)
                var_track[s // thin - 1] = var
                codes.append(rep.name)
            if adaptive:
                rep = choose(var)
    var_labels = tuple(f"sigma2_{d}" for d in range(1, k)) + ("sigma2_e",)
    return Trace(
        states,
        tree.labels,
        seed,
        "adaptive" if adaptive else rep.name,
        thin,
        variances=var_track,
        variance_labels=var_labels,
        assignments=codes,
    )
