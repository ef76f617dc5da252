import numpy as np
import pytest

from conftest import random_ns3, random_node_model, random_s3, random_weakly_symmetric
from hiergibbs.gibbs import run_chain, update_matrix
from hiergibbs.model import ns3, posterior_precision, s3, simulate_data
from hiergibbs.multigrid import (
    ResidualDecomposition,
    decompose_trace,
    delta,
    phi,
    reduced_basis,
    skeleton,
    verify_factorization,
)
from hiergibbs.params import as_reparam
from hiergibbs.rates import assignment_codes
from hiergibbs.symmetry import (
    AuxWalk,
    DegenerateWalkError,
    aux_walk,
    check_symmetry,
    partial_correlations,
    rescale,
)
from hiergibbs.tree import build_tree


class TestWalk:
    def test_partial_correlations(self):
        Q = np.array([[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]])
        rho = partial_correlations(Q)
        assert rho[0, 1] == pytest.approx(1 / np.sqrt(2))
        assert rho[1, 2] == pytest.approx(0.5)
        assert rho[0, 2] == 0.0

    def test_s3_walk_is_uniform(self):
        m = s3(3, 2, 2, 1.0, 2.0, 0.5)
        w = aux_walk(posterior_precision(m), m.tree)
        np.testing.assert_allclose(w.step, AuxWalk.uniform(m.tree).step)
        np.testing.assert_allclose(w.marginal[m.tree.leaves], 1 / 6)

    def test_weakly_symmetric_walk_is_uniform(self, rng):
        for _ in range(10):
            m = random_weakly_symmetric(rng)
            w = aux_walk(posterior_precision(m), m.tree)
            np.testing.assert_allclose(w.step, AuxWalk.uniform(m.tree).step, rtol=1e-12)

    def test_walk_probabilities_sum_to_one(self, rng):
        m = random_node_model(rng, depth=4)
        w = aux_walk(posterior_precision(m), m.tree)
        for d, lev in enumerate(m.tree.levels):
            assert w.marginal[lev].sum() == pytest.approx(1.0)

    def test_conditional_and_joint(self):
        tree = build_tree([2, 2])
        w = AuxWalk.uniform(tree)
        assert w.conditional[3, 1] == pytest.approx(0.5)
        assert w.conditional[3, 0] == pytest.approx(0.25)
        assert w.conditional[3, 2] == 0.0
        assert w.joint(3, 1) == w.joint(1, 3) == pytest.approx(0.25)
        with pytest.raises(ValueError):
            w.joint(3, 2)

    def test_degenerate_walk(self):
        tree = build_tree([2])
        with pytest.raises(DegenerateWalkError):
            aux_walk(np.eye(3), tree)


class TestSymmetry:
    def test_s3_certified_with_expected_levels(self, rng):
        for _ in range(20):
            m = random_s3(rng, data=False)
            I, J = m.tree.branching
            K = m.n_obs[0]
            a, b, e = 1 / (I * m.tau[1]), 1 / (I * J * m.tau[-1]), 1 / (I * J * K * m.tau_e[0])
            r_ab, r_eb = a / (a + b), e / (b + e)
            cert = check_symmetry(posterior_precision(m), m.tree)
            assert cert.certified
            np.testing.assert_allclose(cert.c_vector, [1 - r_ab, r_ab * r_eb], rtol=1e-10)

    def test_group_sums_match_bound_identity(self):
        m = s3(3, 4, 2, 2.0, 0.7, 1.3)
        Q = posterior_precision(m)
        rho = partial_correlations(Q)
        a, b, e = 2.0 / 3, 0.7 / 12, 1.3 / 24
        for i in m.tree.levels[1]:
            kids = list(m.tree.children[i])
            assert np.sum(rho[kids, i] ** 2) == pytest.approx(a / (a + b) * e / (b + e))

    def test_weakly_symmetric_certified(self, rng):
        for _ in range(20):
            m = random_weakly_symmetric(rng)
            Q = posterior_precision(m)
            assert check_symmetry(Q, m.tree, condition="S*").certified
            assert check_symmetry(Q, m.tree, condition="S").certified

    def test_heterogeneous_replicates_rejected(self):
        m = ns3(1.0, [1.0, 1.0], [[1.0, 1.0], [1.0, 1.0]], [[1, 3], [2, 5]])
        cert = check_symmetry(posterior_precision(m), m.tree)
        assert not cert.certified
        assert cert.worst_pair is not None
        assert cert.max_deviation > 1e-3

    def test_star_and_full_conditions_agree(self, rng):
        for maker in (random_s3, random_ns3, random_weakly_symmetric, random_node_model):
            for _ in range(10):
                m = maker(rng)
                Q = posterior_precision(m)
                s_star = check_symmetry(Q, m.tree, condition="S*").certified
                s_full = check_symmetry(Q, m.tree, condition="S").certified
                assert s_star == s_full

    @pytest.mark.parametrize("code", ["cc", "cn", "nc", "nn"])
    def test_reparametrized_s3_certified_with_centred_walk(self, code):
        m = s3(2, 3, 2, 1.5, 0.5, 1.0)
        Q = posterior_precision(m)
        walk = aux_walk(Q, m.tree)
        Qb = as_reparam(code, m.tree).apply_to_precision(Q)
        assert check_symmetry(Qb, m.tree, condition="S", walk=walk).certified

    def test_rescaled_diagonal(self):
        I, J = 3, 2
        m = s3(I, J, 2, 1.0, 1.0, 1.0)
        Q = posterior_precision(m)
        walk = aux_walk(Q, m.tree)
        Qt, s = rescale(Q, walk)
        expected = np.concatenate([[1.0], np.full(I, 1 / I), np.full(I * J, 1 / (I * J))])
        np.testing.assert_allclose(np.diag(Qt), expected)
        np.testing.assert_allclose(partial_correlations(Qt), partial_correlations(Q), atol=1e-14)
        assert check_symmetry(Qt, m.tree, condition="S~", walk=walk).certified

    def test_unknown_condition(self):
        m = s3(2, 2, 1, 1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            check_symmetry(posterior_precision(m), m.tree, condition="X")


class TestResiduals:
    def test_reduced_bases(self):
        tree = build_tree([3, [1, 2, 2]])
        assert reduced_basis(0, tree).tolist() == [0]
        for p in range(1, tree.depth):
            assert len(reduced_basis(p, tree)) == len(tree.levels[p]) - len(tree.levels[p - 1])

    def test_phi_delta_on_uniform_walk(self):
        tree = build_tree([2, 2])
        w = AuxWalk.uniform(tree)
        x = np.array([1.0, 2.0, 3.0, 4.0])
        assert phi(0, x, w).tolist() == [2.5]
        np.testing.assert_allclose(phi(1, x, w), [1.5, 3.5])
        np.testing.assert_allclose(delta(1, x, w), [-1.0, 1.0])
        np.testing.assert_allclose(delta(2, x, w), [-0.5, 0.5, -0.5, 0.5])
        with pytest.raises(ValueError):
            phi(2, np.ones(2), w)

    def test_reconstruction_identity(self, rng):
        for maker in (random_s3, random_node_model):
            m = maker(rng)
            dec = ResidualDecomposition(aux_walk(posterior_precision(m), m.tree))
            x = rng.normal(size=(5, m.tree.n_nodes))
            assert np.max(np.abs(dec.reconstruct(dec.apply(x)) - x)) < 1e-12

    def test_k_subchains_and_skeleton(self):
        m = simulate_data(s3(2, 3, 2, 1.0, 1.0, 1.0), 0.0, 1)
        walk = aux_walk(posterior_precision(m), m.tree)
        tr = run_chain(m, "nn", 50, seed=1)
        groups = decompose_trace(tr, walk)
        assert len(groups) == 3
        assert groups[0].shape == (50, 3)
        x = tr.states
        manual = np.column_stack([x[:, 0], x[:, 1:3].mean(axis=1), x[:, 3:].mean(axis=1)])
        np.testing.assert_allclose(groups[0], manual, atol=1e-12)
        np.testing.assert_allclose(skeleton(tr, walk), manual, atol=1e-12)
        assert sum(g.shape[1] for g in groups) == m.tree.n_nodes

    def test_residual_covariance_positive_definite(self, rng):
        for _ in range(10):
            m = random_weakly_symmetric(rng)
            Q = posterior_precision(m)
            dec = ResidualDecomposition(aux_walk(Q, m.tree))
            S = dec.matrix @ np.linalg.inv(Q) @ dec.matrix.T
            for b in dec.blocks:
                if len(b) == 0:
                    continue
                assert np.linalg.eigvalsh(S[np.ix_(b, b)]).min() > 0

    def test_skeleton_marginal_covariance(self):
        I, J, K = 3, 4, 2
        sa, sb, se = 2.0, 0.5, 1.5
        m = s3(I, J, K, sa, sb, se)
        a, b, e = sa / I, sb / (I * J), se / (I * J * K)
        Qb = as_reparam("nn", m.tree).apply_to_precision(posterior_precision(m))
        dec = ResidualDecomposition(aux_walk(posterior_precision(m), m.tree))
        S = dec.matrix @ np.linalg.inv(Qb) @ dec.matrix.T
        P3 = np.diag([0.0, 1 / a, 1 / b]) + np.ones((3, 3)) / e
        np.testing.assert_allclose(S[np.ix_(dec.blocks[0], dec.blocks[0])], np.linalg.inv(P3), rtol=1e-10, atol=1e-14)


class TestFactorization:
    @pytest.mark.parametrize("code", ["cc", "cn", "nc", "nn"])
    def test_s3_block_diagonal(self, rng, code):
        for _ in range(10):
            m = random_s3(rng)
            dec = ResidualDecomposition(aux_walk(posterior_precision(m), m.tree))
            rep = verify_factorization(update_matrix(m, code), dec)
            assert rep.max_off_block < 1e-10
            assert rep.block_rates[-1] < 1e-12

    def test_weakly_symmetric_four_levels(self, rng):
        for _ in range(5):
            m = random_weakly_symmetric(rng, depth=4)
            dec = ResidualDecomposition(aux_walk(posterior_precision(m), m.tree))
            for code in assignment_codes(4):
                assert verify_factorization(update_matrix(m, code), dec).is_block_diagonal(1e-10)

    def test_uneven_replicates_not_block_diagonal(self):
        m = ns3(1.0, [1.0, 1.0], [[1.0, 1.0], [1.0, 1.0]], [[1, 3], [2, 5]])
        dec = ResidualDecomposition(aux_walk(posterior_precision(m), m.tree))
        rep = verify_factorization(update_matrix(m, "cc"), dec)
        assert rep.max_off_block > 1e-6
        assert not rep.is_block_diagonal()
