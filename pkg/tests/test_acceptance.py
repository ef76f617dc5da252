"""Acceptance criteria, one test each.

Every test records a one-line PASS/FAIL verdict with its key numbers. The
lines are printed in the pytest terminal summary (see ``conftest.py``) and
also when this file is run as a script.
"""

import functools
import itertools
import time
from collections import Counter

import numpy as np

from conftest import log_uniform, random_tree
from hiergibbs.gibbs import run_chain, run_variance_augmented, update_matrix
from hiergibbs.model import (
    ModelInstance,
    NormalizedVariances,
    ns2,
    ns3,
    posterior_precision,
    s3,
    simulate_data,
    weakly_symmetric,
)
from hiergibbs.multigrid import ResidualDecomposition, verify_factorization
from hiergibbs.params import as_reparam, bespoke_recommend_2, optimal_pncp, recommend_parametrization_3
from hiergibbs.rates import (
    assignment_codes,
    bespoke_rate_2,
    closed_form_rates_3,
    closed_form_rates_4,
    cp_upper_bound_3,
    empirical_rate,
    model_rate,
    spectral_rate,
)
from hiergibbs.symmetry import aux_walk, check_symmetry

RESULTS: dict[int, str] = {}

# exact rational values of the three-level formulas at (1, 1e-5, 0.002),
# evaluated by hand
ORACLE_ILLUSTRATIVE = {
    (0, 0): 20000201 / 20100201,
    (1, 1): 500 / 501,
    (0, 1): 701 / 100701,
    (1, 0): 100000 / 100001,
}


def criterion(number: int, title: str):
    """Record a PASS/FAIL line for the wrapped test.

    The test returns a short detail string when it passes; a failed
    assertion message becomes the detail when it fails.
    """

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except Exception as exc:
                msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
                RESULTS[number] = f"criterion {number:2d} FAIL  {title}: {msg}"
                print(RESULTS[number])
                raise
            RESULTS[number] = f"criterion {number:2d} PASS  {title}: {detail}"
            print(RESULTS[number])

        return run

    return wrap


def code(assign) -> str:
    return "".join("cn"[v] for v in assign)


@criterion(1, "three-level closed forms vs spectral rate")
def test_criterion_01_three_level_closed_forms():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    n = 500
    for _ in range(n):
        I, J, K = (int(v) for v in rng.integers(1, 5, 3))
        m = s3(I, J, K, *log_uniform(rng, size=3))
        cf = closed_form_rates_3(NormalizedVariances.from_model(m))
        for key, val in cf.rates.items():
            worst = max(worst, abs(model_rate(m, code(key)) - val))
    elapsed = time.perf_counter() - start
    assert worst < 1e-10, f"max error {worst:.3e}"
    assert elapsed < 30, f"runtime {elapsed:.1f} s"
    return f"{n} models, max error {worst:.2e}, {elapsed:.1f} s"


@criterion(2, "four-level closed forms vs spectral rate")
def test_criterion_02_four_level_closed_forms():
    rng = np.random.default_rng(102)
    worst = 0.0
    n = 100
    for _ in range(n):
        branching = [int(v) for v in rng.integers(1, 4, 3)]
        tv = NormalizedVariances(tuple(log_uniform(rng, size=4)))
        m = tv.to_model(branching, int(rng.integers(1, 4)))
        for key, val in closed_form_rates_4(tv).items():
            worst = max(worst, abs(model_rate(m, code(key)) - val))
    assert worst < 1e-10, f"max error {worst:.3e}"
    return f"{n} models x 8 assignments, max error {worst:.2e}"


def random_weakly_symmetric(rng, depth):
    tree = random_tree(rng, depth)
    prec = log_uniform(rng, -2, 2, depth - 1)
    return weakly_symmetric(tree, prec, float(log_uniform(rng, -2, 2)), int(rng.integers(1, 4)))


@criterion(3, "multigrid factorization is block diagonal")
def test_criterion_03_factorization():
    rng = np.random.default_rng(103)
    worst = 0.0
    count = 0
    for _ in range(50):
        I, J, K = (int(v) for v in rng.integers(1, 5, 3))
        m = s3(I, J, K, *log_uniform(rng, size=3))
        dec = ResidualDecomposition(aux_walk(posterior_precision(m), m.tree))
        for c in assignment_codes(3):
            worst = max(worst, verify_factorization(update_matrix(m, c), dec).max_off_block)
            count += 1
    for _ in range(50):
        m = random_weakly_symmetric(rng, 4)
        Q = posterior_precision(m)
        assert check_symmetry(Q, m.tree).certified, "weakly symmetric instance not certified"
        dec = ResidualDecomposition(aux_walk(Q, m.tree))
        for c in assignment_codes(4):
            worst = max(worst, verify_factorization(update_matrix(m, c), dec).max_off_block)
            count += 1
    assert worst < 1e-10, f"max off-block entry {worst:.3e}"
    return f"{count} update matrices, max off-block entry {worst:.2e}"


@criterion(4, "hierarchical ordering of subchain rates")
def test_criterion_04_ordering():
    rng = np.random.default_rng(104)
    worst_order = 0.0
    worst_last = 0.0
    worst_full = 0.0
    count = 0
    empty = 0
    models = []
    for _ in range(50):
        I, J, K = (int(v) for v in rng.integers(1, 5, 3))
        models.append(s3(I, J, K, *log_uniform(rng, size=3)))
    for depth in (4, 5):
        models.extend(random_weakly_symmetric(rng, depth) for _ in range(25))
    for m in models:
        Q = posterior_precision(m)
        assert check_symmetry(Q, m.tree).certified, "instance not certified"
        dec = ResidualDecomposition(aux_walk(Q, m.tree))
        upd = update_matrix(m, "c" * (m.tree.depth - 1))
        all_rho = verify_factorization(upd, dec).block_rates
        # a level whose nodes are all only children has no residual chain
        rho = [r for r, b in zip(all_rho, dec.blocks) if len(b)]
        empty += len(all_rho) - len(rho)
        worst_order = max([worst_order] + [b - a for a, b in zip(rho, rho[1:])])
        worst_last = max(worst_last, all_rho[-1])
        if m.tree.depth == 3:
            worst_full = max(worst_full, abs(upd.spectral_radius - rho[0]))
        count += 1
    assert worst_order <= 1e-12, f"ordering violated by {worst_order:.3e}"
    assert worst_last <= 1e-12, f"last block rate {worst_last:.3e}"
    assert worst_full < 1e-10, f"full rate differs from skeleton rate by {worst_full:.3e}"
    return (
        f"{count} certified centred instances ({empty} empty blocks skipped), max increase {worst_order:.1e}, "
        f"max last-block rate {worst_last:.1e}, full vs skeleton {worst_full:.1e}"
    )


def random_nsk(rng, depth):
    tree = random_tree(rng, depth)
    tau = np.zeros(tree.n_nodes)
    tau[1:] = log_uniform(rng, -2, 2, tree.n_nodes - 1)
    m = len(tree.leaves)
    return ModelInstance(tree, tau, log_uniform(rng, -2, 2, m), rng.integers(1, 5, m))


def random_ns3_model(rng):
    I = int(rng.integers(1, 5))
    J = rng.integers(1, 5, I)
    return ns3(
        log_uniform(rng),
        log_uniform(rng, size=I),
        [log_uniform(rng, size=j) for j in J],
        [rng.integers(1, 7, j) for j in J],
    )


@criterion(5, "optimal partially non-centred parametrization")
def test_criterion_05_pncp():
    rng = np.random.default_rng(105)
    worst = 0.0
    models = [random_ns3_model(rng) for _ in range(50)]
    models += [random_nsk(rng, depth) for depth in (3, 4, 5) for _ in range(20)]
    for m in models:
        Q = posterior_precision(m)
        lam = optimal_pncp(Q, m.tree).reparam.lam
        cov = lam @ np.linalg.solve(Q, lam.T)
        d = np.sqrt(np.diag(cov))
        corr = cov / np.outer(d, d)
        worst = max(worst, np.max(np.abs(corr - np.eye(len(corr)))))
    assert worst < 1e-10, f"max off-diagonal correlation {worst:.3e}"

    N = 100_000
    limit = 4 / np.sqrt(N)
    worst_r1 = 0.0
    for m in (random_ns3_model(rng), random_nsk(rng, 4)):
        m = simulate_data(m, 0.0, 5)
        res = optimal_pncp(posterior_precision(m), m.tree)
        x = run_chain(m, res.reparam, N, seed=5).states
        x = x - x.mean(axis=0)
        r1 = np.sum(x[1:] * x[:-1], axis=0) / np.sum(x * x, axis=0)
        worst_r1 = max(worst_r1, np.max(np.abs(r1)))
    assert worst_r1 < limit, f"lag-1 autocorrelation {worst_r1:.4f} >= {limit:.4f}"
    return (
        f"{len(models)} instances, max off-diagonal correlation {worst:.1e}; "
        f"max |r1| {worst_r1:.4f} < {limit:.4f} at N = {N}"
    )


@criterion(6, "bespoke two-level assignment is optimal")
def test_criterion_06_bespoke():
    rng = np.random.default_rng(106)
    start = time.perf_counter()
    worst = 0.0
    n = 200
    for _ in range(n):
        I = int(rng.integers(1, 9))
        tau_a = float(log_uniform(rng))
        tau_e = log_uniform(rng, size=I)
        J = rng.integers(1, 6, I)
        tau_tilde = tau_e * J
        chosen = bespoke_recommend_2(ns2(tau_a, tau_e, J)).values[1:]
        assert list(chosen) == [int(tau_a > t) for t in tau_tilde], "assignment differs from the indicator rule"
        best = min(bespoke_rate_2(lam, tau_a, tau_tilde) for lam in itertools.product((0, 1), repeat=I))
        worst = max(worst, bespoke_rate_2(chosen, tau_a, tau_tilde) - best)
    elapsed = time.perf_counter() - start
    assert worst <= 1e-12, f"chosen rate exceeds exhaustive minimum by {worst:.3e}"
    assert elapsed < 10, f"runtime {elapsed:.1f} s"
    return f"{n} draws with I <= 8, max excess {worst:.1e}, {elapsed:.1f} s"


@criterion(7, "centred upper bound for unbalanced three-level models")
def test_criterion_07_cp_bound():
    rng = np.random.default_rng(107)
    applicable = 0
    tries = 0
    min_gap = np.inf
    while applicable < 500 and tries < 20_000:
        tries += 1
        m = random_ns3_model(rng)
        b = cp_upper_bound_3(m)
        if not b.applicable:
            continue
        applicable += 1
        min_gap = min(min_gap, b.bound - spectral_rate(posterior_precision(m)))
    assert applicable == 500, f"only {applicable} applicable instances in {tries} draws"
    # the two sides agree exactly in exact arithmetic on symmetric sub-cases
    assert min_gap >= -1e-12, f"bound below exact rate by {-min_gap:.3e}"
    worst_eq = 0.0
    for _ in range(100):
        I, J, K = (int(v) for v in rng.integers(1, 5, 3))
        m = s3(I, J, K, *log_uniform(rng, size=3))
        b = cp_upper_bound_3(m)
        assert b.applicable, "bound not applicable on a symmetric instance"
        worst_eq = max(worst_eq, abs(b.bound - spectral_rate(posterior_precision(m))))
    assert worst_eq < 1e-10, f"symmetric instances differ by {worst_eq:.3e}"
    return (
        f"500 applicable instances ({tries} draws), min bound - rate {min_gap:.2e}; "
        f"symmetric equality within {worst_eq:.1e}"
    )


@criterion(8, "illustrative configuration at reduced scale")
def test_criterion_08_illustrative():
    start = time.perf_counter()
    cf = closed_form_rates_3((1, 1e-5, 0.002))
    oracle_err = max(abs(cf[k] - v) for k, v in ORACLE_ILLUSTRATIVE.items())
    assert oracle_err < 1e-12, f"closed forms differ from hand values by {oracle_err:.3e}"

    var = (100.0, 0.1, 100.0)
    model = simulate_data(s3(20, 20, 5, *var), 0.0, 0)
    recommended = recommend_parametrization_3(NormalizedVariances.from_model(model)).values
    assert recommended == (0, 1), f"recommended {recommended}"

    iters, burn_in = 20_000, 1000
    truth = model.true_latent
    adaptive = run_variance_augmented(model, iters=iters, seed=0, adaptive=True, init=truth, init_variances=var)
    modal = Counter(adaptive.assignments[burn_in:]).most_common(1)[0][0]
    assert modal == "cn", f"adaptive sampler mostly used {modal}"

    walk = aux_walk(posterior_precision(model), model.tree)
    rates = {}
    for c in ("cn", "nc"):
        rep = as_reparam(c, model.tree)
        tr = run_variance_augmented(
            model, iters=iters, seed=0, param=c, init=rep.apply(truth), init_variances=var
        )
        rates[c] = empirical_rate(tr, burn_in=burn_in, walk=walk).estimate
    elapsed = time.perf_counter() - start
    detail = (
        f"recommended cn, adaptive modal {modal}, skeleton rate cn {rates['cn']:.3f}, "
        f"nc {rates['nc']:.3f}, oracle error {oracle_err:.1e}, {elapsed:.0f} s"
    )
    assert rates["cn"] < 0.1, f"cn skeleton rate {rates['cn']:.3f} >= 0.1 ({detail})"
    assert rates["nc"] > 0.9, f"nc skeleton rate {rates['nc']:.3f} <= 0.9 ({detail})"
    assert elapsed < 120, f"runtime {elapsed:.0f} s"
    return detail


@criterion(9, "empirical rates match closed forms")
def test_criterion_09_empirical():
    start = time.perf_counter()
    worst = 0.0
    cells = 0
    for a, b in itertools.product((0.5, 1.0, 2.0), repeat=2):
        tv = NormalizedVariances((a, b, 1.0))
        cf = closed_form_rates_3(tv)
        assert max(cf.rates.values()) <= 0.9, f"analytic rate above 0.9 at {tv.values}"
        m = simulate_data(tv.to_model((2, 2), 2), 0.0, 11)
        walk = aux_walk(posterior_precision(m), m.tree)
        for key, val in cf.rates.items():
            tr = run_chain(m, code(key), 100_000, seed=5)
            est = empirical_rate(tr, burn_in=100, walk=walk).estimate
            worst = max(worst, abs(est - val))
            cells += 1
    elapsed = time.perf_counter() - start
    assert worst <= 0.05, f"max deviation {worst:.3f}"
    assert elapsed < 300, f"runtime {elapsed:.0f} s"
    return f"{cells} chains of 1e5 iterations, max deviation {worst:.3f}, {elapsed:.0f} s"


@criterion(10, "recommended rate never exceeds two thirds")
def test_criterion_10_recommendation_bound():
    grid = 2.0 ** (np.arange(-24, 25) / 4)
    worst = -np.inf
    at_bound = []
    for a, b, e in itertools.product(grid, repeat=3):
        rate = closed_form_rates_3((a, b, e))[recommend_parametrization_3((a, b, e)).values]
        worst = max(worst, rate)
        if abs(rate - 2 / 3) <= 1e-12:
            at_bound.append((a, b, e))
    boundary = [(a, b, e) for a, b, e in itertools.product(grid, repeat=3) if a == b + e and b == e]
    assert worst <= 2 / 3 + 1e-12, f"max recommended rate {worst!r}"
    assert boundary and sorted(at_bound) == sorted(boundary), "equality set differs from the boundary"
    return f"{len(grid) ** 3} grid points, max rate {worst:.15f}, equality at {len(at_bound)} boundary points only"


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_criterion_"):
            try:
                fn()
            except Exception:
                pass
