"""Convergence rates of deterministic-scan Gibbs samplers.

The rate of a Gaussian Gibbs chain is the spectral radius of its one-sweep
update matrix ``B = (I - L)^-1 U``. This module computes it numerically for any
precision, evaluates the closed forms available for symmetric models, bounds
the centred rate of uneven three-level models and estimates rates from traces.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .gibbs import Trace, spectral_radius, sweep_matrices, update_matrix
from .model import ModelError, ModelInstance, NormalizedVariances, posterior_precision
from .multigrid import ResidualDecomposition, skeleton, verify_factorization
from .params import (
    CenteringAssignment,
    as_reparam,
    bespoke_recommend_2,
    bespoke_recommend_3,
    recommend_parametrization_3,
)
from .rng import stream
from .symmetry import SymmetryCertificate, aux_walk, check_symmetry

Assign = tuple[int, ...]


def spectral_rate(Q: np.ndarray, sweep_order: Sequence[int] | None = None) -> float:
    """Spectral radius of the sweep matrix for precision ``Q`` in ``sweep_order``.

    Raises
    ------
    ModelError
        If ``Q`` is not positive definite.
    """
    Q = np.asarray(Q, dtype=float)
    try:
        np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        raise ModelError("precision matrix is not positive definite") from None
    B, _, _ = sweep_matrices(Q, None, sweep_order)
    return spectral_radius(B)


def model_rate(model: ModelInstance, param="c") -> float:
    """Spectral rate of the breadth-first sampler for ``model`` in ``param`` coordinates."""
    rep = as_reparam(param, model.tree)
    return spectral_rate(rep.apply_to_precision(posterior_precision(model)))


# -- three levels -------------------------------------------------------------


@dataclass(frozen=True)
class ClosedForm3:
    """Rates of the four per-level samplers of a symmetric three-level model.

    ``rates[(l1, l2)]`` is the full-chain rate. ``subchains[(l1, l2)]`` holds the
    rates of the three residual subchains, coarsest first.
    """

    rates: dict
    subchains: dict

    def __getitem__(self, key: Assign) -> float:
        return self.rates[tuple(key)]


def closed_form_rates_3(tv: NormalizedVariances | Sequence[float]) -> ClosedForm3:
    """Closed-form rates for ``(s_a, s_b, s_e)`` normalised variances."""
    a, b, e = _tv(tv, 3)
    r_ab, r_be = a / (a + b), b / (b + e)
    r_ae, r_eb = a / (a + e), e / (b + e)
    rates = {
        (0, 0): 1.0 - r_ab * r_be,
        (1, 1): max(r_ae, r_be),
        (0, 1): 1.0 - r_ae * r_eb,
        (1, 0): max(r_ab, r_eb),
    }
    mid = {
        (1, 1): r_ae * r_be,
        (0, 0): r_ab * (1.0 - r_be),
        (0, 1): r_ae * (1.0 - r_eb),
        (1, 0): r_ab * r_eb,
    }
    subchains = {key: (rates[key], mid[key], 0.0) for key in rates}
    return ClosedForm3(rates, subchains)


def _tv(tv, k: int) -> tuple[float, ...]:
    if not isinstance(tv, NormalizedVariances):
        tv = NormalizedVariances(tuple(tv))
    if len(tv) != k:
        raise ValueError(f"expected {k} normalised variances, got {len(tv)}")
    return tv.values


# -- four levels --------------------------------------------------------------


def closed_form_rates_4(tv: NormalizedVariances | Sequence[float]) -> dict[Assign, float]:
    """Closed-form rates of the eight per-level samplers of a symmetric four-level model."""
    s = _tv(tv, 4)

    def r(i, j):
        return s[i - 1] / (s[i - 1] + s[j - 1])

    def root(x, c):
        # largest modulus root of z**2 - x z + c
        disc = x * x - 4.0 * c
        return 0.5 * (x + np.sqrt(disc)) if disc >= 0 else np.sqrt(c)

    out = {
        (1, 1, 1): max(r(1, 4), r(2, 4), r(3, 4)),
        (1, 1, 0): max(r(1, 3), r(2, 3), r(4, 3)),
        (1, 0, 0): max(r(1, 2), 1.0 - r(2, 3) * r(3, 4)),
        (1, 0, 1): max(r(1, 2), 1.0 - r(2, 4) * r(4, 3)),
        (0, 0, 0): root(1.0 + r(2, 3) * (r(4, 3) - r(1, 2)), r(2, 1) * r(2, 3) * r(4, 3)),
        (0, 0, 1): root(1.0 + r(2, 4) * (r(3, 4) - r(1, 2)), r(2, 1) * r(2, 4) * r(3, 4)),
        (0, 1, 1): root(1.0 - r(1, 4) * r(4, 2) * r(4, 3) + r(2, 4) * r(3, 4), r(2, 4) * r(3, 4)),
        (0, 1, 0): root(1.0 - r(1, 3) * r(3, 2) * r(3, 4) + r(2, 3) * r(4, 3), r(2, 3) * r(4, 3)),
    }
    return {key: float(v) for key, v in out.items()}


def ratio_table(tv: NormalizedVariances | Sequence[float]) -> dict[str, float]:
    """All normalised variance ratios ``r_i|j = s_i / (s_i + s_j)``."""
    s = tuple(tv)
    k = len(s)
    return {
        f"r{i}|{j}": s[i - 1] / (s[i - 1] + s[j - 1])
        for i in range(1, k + 1)
        for j in range(1, k + 1)
        if i != j
    }


# -- symmetric centred chains, any depth ---------------------------------------


def symmetric_cp_rate_k(
    taus: Sequence[float], tau_e: float, branchings: Sequence[int], J: int
) -> float:
    """Centred rate of the balanced model with level precisions ``taus``.

    ``branchings[l-1]`` is the number of level-``l`` children per node and ``J``
    the replicates per leaf. The rate is the squared largest eigenvalue of the
    tridiagonal matrix with ``T[d, d+1] = r_{d+1}`` and ``T[d, d-1] = 1 - r_{d+1}``,
    where ``r_l = I_l tau_l / (tau_{l-1} + I_l tau_l)``, ``tau_0 = 0``,
    ``tau_k = tau_e`` and ``I_k = J``.
    """
    if len(taus) != len(branchings):
        raise ValueError("need one branching count per level precision")
    tau = [0.0, *map(float, taus), float(tau_e)]
    I = [1, *map(int, branchings), int(J)]
    k = len(taus) + 1
    r = [None] + [I[l] * tau[l] / (tau[l - 1] + I[l] * tau[l]) for l in range(1, k + 1)]
    T = np.zeros((k, k))
    for d in range(k):
        if d + 1 < k:
            T[d, d + 1] = r[d + 1]
        if d > 0:
            T[d, d - 1] = 1.0 - r[d + 1]
    return spectral_radius(T) ** 2


# -- two-level bespoke ---------------------------------------------------------


def bespoke_rate_2(assign, tau_a: float, tau_tilde: Sequence[float]) -> float:
    """Rate of the two-level sampler where group ``i`` is non-centred iff ``assign[i] == 1``.

    ``tau_tilde[i] = J_i tau_e_i`` is the data precision of group ``i``. ``assign``
    is a 0/1 sequence, or a CenteringAssignment (per node or per level).
    """
    tt = np.asarray(tau_tilde, dtype=float)
    lam = _group_indicators(assign, len(tt))
    w = np.where(lam == 1, tt, tau_a)
    return float(np.sum(w * w / (tt + tau_a)) / np.sum(w))


def _group_indicators(assign, I: int) -> np.ndarray:
    if isinstance(assign, CenteringAssignment):
        if assign.per_level:
            if len(assign.values) != 1:
                raise ValueError("two-level assignment needs a single level indicator")
            return np.full(I, assign.values[0])
        vals = np.asarray(assign.values[1:])
    else:
        vals = np.asarray(assign)
    if vals.shape != (I,) or not np.isin(vals, (0, 1)).all():
        raise ValueError(f"need {I} indicators in {{0, 1}}")
    return vals.astype(int)


# -- uneven three-level centred bound -----------------------------------------


@dataclass(frozen=True)
class CpBound:
    """Upper bound on the centred rate of an uneven three-level model."""

    applicable: bool
    bound: float | None
    r_ab: np.ndarray
    r_eb: np.ndarray


def cp_upper_bound_3(model: ModelInstance) -> CpBound:
    """Bound ``1 - mean_i r_ab[i] + max_i r_ab[i] r_eb[i]`` on the centred rate.

    Here ``r_ab[i] = s2_a / (s2_a + s2_b_i / J_i)`` and ``r_eb[i]`` is the mean
    over cells of ``(s2_e_ij / K_ij) / (s2_b_i + s2_e_ij / K_ij)``. The bound
    holds when ``min_i r_ab[i] >= max_i r_ab[i] r_eb[i]``; otherwise
    ``applicable`` is false and no bound is returned.
    """
    tree = model.tree
    if tree.depth != 3:
        raise ModelError("the bound applies to three-level models")
    groups = tree.levels[1]
    var_a = 1.0 / model.tau[groups]
    if not np.allclose(var_a, var_a[0], rtol=1e-12, atol=0):
        raise ModelError("the bound needs a common group-level variance")
    first_leaf = tree.leaves[0]
    var_e_cell = 1.0 / model.leaf_precision
    r_ab = np.empty(len(groups))
    r_eb = np.empty(len(groups))
    for i, g in enumerate(groups):
        kids = np.asarray(tree.children[g])
        var_b = 1.0 / model.tau[kids]
        if not np.allclose(var_b, var_b[0], rtol=1e-12, atol=0):
            raise ModelError("the bound needs one cell-level variance per group")
        vb = var_b[0]
        ve = var_e_cell[kids - first_leaf]
        r_ab[i] = var_a[0] / (var_a[0] + vb / len(kids))
        r_eb[i] = np.mean(ve / (vb + ve))
    prod = r_ab * r_eb
    ok = bool(r_ab.min() >= prod.max())
    bound = float(1.0 - r_ab.mean() + prod.max()) if ok else None
    return CpBound(ok, bound, r_ab, r_eb)


# -- certificate-based rates ---------------------------------------------------


def subchain_rate(C: SymmetryCertificate | np.ndarray, p: int) -> float:
    """Rate of residual subchain ``p`` from the level matrix ``C``.

    The subchain behaves like a Gibbs sweep whose A-matrix is the off-diagonal
    part of the trailing ``(k - p)`` minor of ``C``.
    """
    C = C.C if isinstance(C, SymmetryCertificate) else np.asarray(C, dtype=float)
    k = len(C)
    if not 0 <= p < k:
        raise ValueError(f"p must be in [0, {k - 1}]")
    M = C[p:, p:]
    A = M - np.diag(np.diag(M))
    L = np.tril(A, -1)
    U = np.triu(A, 1)
    B = np.linalg.solve(np.eye(k - p) - L, U)
    return spectral_radius(B)


def cp_rate_k(C: SymmetryCertificate | np.ndarray) -> float:
    """Centred rate as the squared largest eigenvalue of ``C - I``."""
    C = C.C if isinstance(C, SymmetryCertificate) else np.asarray(C, dtype=float)
    return spectral_radius(C - np.eye(len(C))) ** 2


# -- empirical estimate --------------------------------------------------------


@dataclass(frozen=True)
class EmpiricalRate:
    """Lag-1 autoregression estimate of the rate with a block-bootstrap error."""

    estimate: float
    stderr: float
    n: int
    block_len: int
    widened: bool = False
    matrix: np.ndarray | None = field(default=None, repr=False, compare=False)


def empirical_rate(
    trace: Trace | np.ndarray,
    burn_in: int = 0,
    targets: Sequence[int] | None = None,
    walk=None,
    n_boot: int = 200,
    block_len: int | None = None,
    seed: int = 0,
    cond_limit: float = 1e10,
) -> EmpiricalRate:
    """Fit ``x(s+1) = c + A x(s) + noise`` and report the spectral radius of ``A``.

    Parameters
    ----------
    trace
        A Trace or an ``(iters, dim)`` array.
    targets
        Column indices to keep. Ignored when ``walk`` is given, in which case
        the skeleton (walk-weighted global means of every level) is used.
    n_boot
        Moving-block bootstrap replicates for the standard error.
    cond_limit
        Above this condition number of the lagged covariance the estimate is
        computed with a pseudo-inverse and ``widened`` is set; the reported
        error then includes the gap between the two fits.
    """
    X = trace.states if isinstance(trace, Trace) else np.asarray(trace, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    X = X[burn_in:]
    if walk is not None:
        X = skeleton(X, walk)
    elif targets is not None:
        X = X[:, list(targets)]
    N = len(X) - 1
    if N + 1 < 1000:
        raise ValueError(f"need at least 1000 post-burn-in iterations, got {N + 1}")
    dim = X.shape[1]
    Z = np.hstack([X[:-1], np.ones((N, 1))])
    Y = X[1:]
    Szz = Z.T @ Z
    Syz = Y.T @ Z
    centred = Z[:, :dim] - Z[:, :dim].mean(axis=0)
    cov = centred.T @ centred / N
    cond = np.linalg.cond(cov) if dim else 1.0
    widened = bool(not np.isfinite(cond) or cond > cond_limit)
    A = _fit(Syz, Szz, widened)[:, :dim]
    est = spectral_radius(A)

    if block_len is None:
        block_len = int(np.clip(max(N ** (1 / 3), 5.0 / max(1e-3, 1.0 - min(est, 0.999))), 10, N // 10))
    # per-position outer products; cumulative sums give any block's statistics
    zz = np.einsum("ni,nj->nij", Z, Z)
    yz = np.einsum("ni,nj->nij", Y, Z)
    czz = np.concatenate([np.zeros((1, dim + 1, dim + 1)), np.cumsum(zz, axis=0)])
    cyz = np.concatenate([np.zeros((1, dim, dim + 1)), np.cumsum(yz, axis=0)])
    n_starts = N - block_len + 1
    n_blocks = int(np.ceil(N / block_len))
    rng = stream(seed, "bootstrap")
    boot = np.empty(n_boot)
    for b in range(n_boot):
        starts = rng.integers(0, n_starts, n_blocks)
        Sz = (czz[starts + block_len] - czz[starts]).sum(axis=0)
        Sy = (cyz[starts + block_len] - cyz[starts]).sum(axis=0)
        boot[b] = spectral_radius(_fit(Sy, Sz, widened)[:, :dim])
    se = float(np.std(boot, ddof=1))
    if widened:
        alt = spectral_radius(_fit(Syz, Szz, False)[:, :dim]) if np.isfinite(cond) else est
        se = max(se, abs(alt - est), 1e-3)
    return EmpiricalRate(est, se, N + 1, block_len, widened, A)


def _fit(Syz: np.ndarray, Szz: np.ndarray, pinv: bool) -> np.ndarray:
    if pinv:
        return Syz @ np.linalg.pinv(Szz, rcond=1e-12, hermitian=True)
    return np.linalg.solve(Szz, Syz.T).T


# -- full report ---------------------------------------------------------------


def assignment_codes(k: int) -> list[str]:
    """Per-level codes for a ``k``-level model, centred first: ``cc, cn, nc, nn``."""
    return ["".join(c) for c in itertools.product("cn", repeat=k - 1)]


@dataclass
class RateReport:
    """Rates of one model under every per-level parametrization.

    ``rates`` are spectral rates; ``closed_form`` holds closed-form values when
    the model is symmetric with three or four levels; ``subchains`` holds the
    per-coarseness rates from the multigrid factorization when certified.
    """

    depth: int
    n_nodes: int
    rates: dict[str, float]
    closed_form: dict[str, float] = field(default_factory=dict)
    subchains: dict[str, list[float]] = field(default_factory=dict)
    off_block: dict[str, float] = field(default_factory=dict)
    normalized_variances: list[float] | None = None
    ratios: dict[str, float] = field(default_factory=dict)
    recommended: str | None = None
    bespoke: list[int] | None = None
    bound: dict | None = None
    certificate: dict | None = None
    empirical: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "depth": self.depth,
            "n_nodes": self.n_nodes,
            "rates": self.rates,
            "closed_form": self.closed_form,
            "subchains": self.subchains,
            "off_block": self.off_block,
            "normalized_variances": self.normalized_variances,
            "ratios": self.ratios,
            "recommended": self.recommended,
            "bespoke": self.bespoke,
            "bound": self.bound,
            "certificate": self.certificate,
            "empirical": self.empirical,
        }
        return out


def analyze(model: ModelInstance, tol: float = 1e-9, factorize: bool = True) -> RateReport:
    """Collect every applicable rate for ``model``."""
    tree = model.tree
    k = tree.depth
    Q = posterior_precision(model)
    codes = assignment_codes(k) if k > 1 else []
    rates = {c: model_rate(model, c) for c in codes}
    report = RateReport(k, tree.n_nodes, rates)

    symmetric = k > 1 and tree.is_balanced and model.level_homogeneous()
    if symmetric:
        tv = NormalizedVariances.from_model(model)
        report.normalized_variances = list(tv.values)
        report.ratios = ratio_table(tv)
        if k == 3:
            cf = closed_form_rates_3(tv)
            report.closed_form = {"".join("cn"[v] for v in key): val for key, val in sorted(cf.rates.items())}
            report.recommended = recommend_parametrization_3(tv).code
        elif k == 4:
            cf4 = closed_form_rates_4(tv)
            report.closed_form = {"".join("cn"[v] for v in key): val for key, val in sorted(cf4.items())}
    if report.recommended is None and rates:
        report.recommended = min(rates, key=lambda c: (rates[c], c))

    if k == 2:
        report.bespoke = list(bespoke_recommend_2(model).values[1:])
    elif k == 3:
        report.bespoke = list(bespoke_recommend_3(model).values[1:])
        b = cp_upper_bound_3(model)
        report.bound = {
            "applicable": b.applicable,
            "bound": b.bound,
            "r_ab": b.r_ab.tolist(),
            "r_eb": b.r_eb.tolist(),
        }

    if k > 1:
        cert = check_symmetry(Q, tree, tol)
        report.certificate = {
            "condition": cert.condition,
            "certified": cert.certified,
            "max_deviation": cert.max_deviation,
            "worst_pair": list(cert.worst_pair) if cert.worst_pair else None,
            "C": cert.C.tolist(),
        }
        if factorize:
            dec = ResidualDecomposition(aux_walk(Q, tree))
            for c in codes:
                rep = verify_factorization(update_matrix(model, c), dec)
                report.off_block[c] = rep.max_off_block
                if cert.certified:
                    report.subchains[c] = rep.block_rates
    return report


def rate_grid(
    log_tvar_a: Sequence[float],
    log_tvar_b: Sequence[float],
    tvar_e: float = 1.0,
    workers: int | None = None,
) -> list[tuple[float, float, str, float]]:
    """``log(1 - rho)`` for every per-level three-level sampler on a grid.

    Axes are natural logs of ``s_a`` and ``s_b``; ``s_e`` is fixed. Rows come
    out in grid order whatever the number of worker threads.
    """
    from concurrent.futures import ThreadPoolExecutor

    points = [(la, lb) for la in log_tvar_a for lb in log_tvar_b]

    def one(pt):
        la, lb = pt
        cf = closed_form_rates_3((np.exp(la), np.exp(lb), tvar_e))
        return [
            (float(la), float(lb), "".join("cn"[v] for v in key), float(np.log1p(-cf.rates[key])))
            for key in sorted(cf.rates)
        ]

    if workers is None or workers <= 1:
        chunks = [one(p) for p in points]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(one, points))
    return [row for chunk in chunks for row in chunk]


def argmin_assignment(rates: Mapping[Assign, float]) -> Assign:
    return min(rates, key=lambda key: (rates[key], key))
