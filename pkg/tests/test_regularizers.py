import numpy as np
import pytest

from conftest import make_params
from oracles import central_diff
from plrnn_lab.core import VanillaRnnWeights
from plrnn_lab.regularizers import (RegSpec, init_params, init_vanilla, penalty,
                                    penalty_grad)


def brute_force_penalty(spec, p):
    """Scalar index-loop oracle for every penalty kind."""
    M, r = p.M, spec.m_reg
    if spec.kind == "none":
        return 0.0
    if spec.kind in ("manifold_attractor", "l2_partial"):
        target = 1.0 if spec.kind == "manifold_attractor" else 0.0
        total = 0.0
        for i in range(r):
            total += spec.tau_a * (p.a_diag[i] - target) ** 2
            for j in range(M):
                if j != i:
                    total += spec.tau_w * p.w_offdiag[i, j] ** 2
            total += spec.tau_h * p.h_bias[i] ** 2
        return total
    if spec.kind == "l2_full":
        total = 0.0
        for i in range(M):
            total += spec.tau_a * p.a_diag[i] ** 2
            total += spec.tau_a * p.h_bias[i] ** 2
            for j in range(M):
                total += spec.tau_a * p.w_offdiag[i, j] ** 2
        return total
    aw = np.diag(p.a_diag) + p.w_offdiag
    gram = aw @ aw.T - np.eye(M)
    return spec.tau_a * sum(gram[i, j] ** 2 for i in range(M) for j in range(M))


def fig_s2_params(M=4, m_reg=2, seed=0):
    p = make_params(M=M, seed=seed, m_reg=m_reg)
    a = p.a_diag.copy(); a[:m_reg] = 1.0
    w = p.w_offdiag.copy(); w[:m_reg, :] = 0.0
    h = p.h_bias.copy(); h[:m_reg] = 0.0
    return p.replace(a_diag=a, w_offdiag=w, h_bias=h)


class TestPenalty:
    def test_zero_at_manifold_configuration(self):
        spec = RegSpec.common_tau("manifold_attractor", 5.0, m_reg=2)
        assert penalty(spec, fig_s2_params()) == 0.0

    def test_single_term(self):
        p = make_params(M=3, seed=1)
        a = p.a_diag.copy(); a[0] = 0.0
        w = p.w_offdiag.copy(); w[0, :] = 0.0
        h = p.h_bias.copy(); h[0] = 0.0
        p = p.replace(a_diag=a, w_offdiag=w, h_bias=h)
        spec = RegSpec.common_tau("manifold_attractor", 1.0, m_reg=1)
        assert penalty(spec, p) == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("kind", ["manifold_attractor", "l2_partial",
                                      "l2_full", "orthogonal"])
    def test_matches_index_loop_oracle(self, kind):
        for seed in range(5):
            p = make_params(M=4, seed=seed)
            spec = RegSpec(kind=kind, tau_a=0.7, tau_w=1.3, tau_h=0.2, m_reg=2)
            assert penalty(spec, p) == pytest.approx(
                brute_force_penalty(spec, p), rel=1e-12)

    def test_nonnegative_and_invariant_to_free_rows(self):
        spec = RegSpec.common_tau("manifold_attractor", 2.0, m_reg=1)
        p = make_params(M=3, seed=2)
        val = penalty(spec, p)
        assert val >= 0.0
        a = p.a_diag.copy(); a[2] = 9.9
        w = p.w_offdiag.copy(); w[2, 0] = -7.0
        h = p.h_bias.copy(); h[2] = 3.3
        assert penalty(spec, p.replace(a_diag=a, w_offdiag=w, h_bias=h)) == val

    def test_vanilla_variants(self):
        rng = np.random.Generator(np.random.Philox(5))
        w = VanillaRnnWeights(w_full=rng.normal(size=(3, 3)),
                              c_input=rng.normal(size=(3, 1)),
                              h_bias=rng.normal(size=3),
                              b_loading=rng.normal(size=(1, 3)))
        full = penalty(RegSpec.common_tau("l2_full", 2.0), w)
        assert full == pytest.approx(
            2.0 * (np.sum(w.w_full ** 2) + np.sum(w.h_bias ** 2)), rel=1e-12)
        ident = VanillaRnnWeights(w_full=np.eye(3), c_input=w.c_input,
                                  h_bias=np.zeros(3), b_loading=w.b_loading)
        assert penalty(RegSpec.common_tau("orthogonal", 1.0), ident) == 0.0
        with pytest.raises(ValueError):
            penalty(RegSpec.common_tau("manifold_attractor", 1.0, m_reg=1), w)


class TestPenaltyGrad:
    def test_zero_at_minimum(self):
        spec = RegSpec.common_tau("manifold_attractor", 5.0, m_reg=2)
        g = penalty_grad(spec, fig_s2_params())
        assert all(np.all(v == 0.0) for v in g.values())

    def test_da_at_zero(self):
        p = make_params(M=2, seed=3)
        a = p.a_diag.copy(); a[0] = 0.0
        p = p.replace(a_diag=a)
        spec = RegSpec(kind="manifold_attractor", tau_a=1.0, m_reg=1)
        assert penalty_grad(spec, p)["a_diag"][0] == pytest.approx(-2.0)

    @pytest.mark.parametrize("kind", ["manifold_attractor", "l2_partial",
                                      "l2_full", "orthogonal"])
    def test_finite_difference_agreement(self, kind):
        p = make_params(M=3, seed=7)
        spec = RegSpec(kind=kind, tau_a=0.9, tau_w=0.4, tau_h=1.1, m_reg=2)
        grads = penalty_grad(spec, p)

        def f_a(a):
            return penalty(spec, p.replace(a_diag=a))
        np.testing.assert_allclose(grads["a_diag"],
                                   central_diff(f_a, p.a_diag), atol=1e-6)

        def f_h(h):
            return penalty(spec, p.replace(h_bias=h))
        np.testing.assert_allclose(grads["h_bias"],
                                   central_diff(f_h, p.h_bias), atol=1e-6)

        mask = 1.0 - np.eye(3)

        def f_w(flat):
            return penalty(spec, p.replace(w_offdiag=flat.reshape(3, 3) * mask))
        fd_w = central_diff(f_w, p.w_offdiag.ravel()).reshape(3, 3) * mask
        np.testing.assert_allclose(grads["w_offdiag"], fd_w, atol=1e-6)

    def test_vanilla_grads_fd(self):
        rng = np.random.Generator(np.random.Philox(6))
        w = VanillaRnnWeights(w_full=rng.normal(size=(3, 3)),
                              c_input=rng.normal(size=(3, 1)),
                              h_bias=rng.normal(size=3),
                              b_loading=rng.normal(size=(1, 3)))
        for kind in ("l2_full", "orthogonal"):
            spec = RegSpec.common_tau(kind, 1.7)
            grads = penalty_grad(spec, w)

            def f_w(flat):
                return penalty(spec, VanillaRnnWeights(
                    w_full=flat.reshape(3, 3), c_input=w.c_input,
                    h_bias=w.h_bias, b_loading=w.b_loading))
            np.testing.assert_allclose(
                grads["w_full"], central_diff(f_w, w.w_full.ravel()).reshape(3, 3),
                atol=1e-6)


class TestInit:
    def test_regularized_scheme_zero_penalty(self):
        p = init_params("regularized", M=6, K=2, N=1, m_reg=6, seed=0)
        spec = RegSpec.common_tau("manifold_attractor", 1.0, m_reg=6)
        assert penalty(spec, p) == 0.0

    def test_regularized_partition_rows(self):
        p = init_params("regularized", M=6, K=2, N=1, m_reg=3, seed=1)
        assert np.all(p.a_diag[:3] == 1.0)
        assert np.all(p.w_offdiag[:3, :] == 0.0)
        assert np.all(p.h_bias[:3] == 0.0)
        assert np.any(p.w_offdiag[3:, :] != 0.0)

    def test_identity_rnn(self):
        w = init_vanilla("identity_rnn", M=5, K=2, N=1, seed=0)
        assert np.array_equal(w.w_full, np.eye(5))
        assert np.all(w.h_bias == 0.0)

    def test_identity_plrnn(self):
        p = init_params("identity_plrnn", M=4, K=1, N=1, seed=0)
        assert np.all(p.a_diag == 1.0)
        assert np.all(p.w_offdiag == 0.0)
        assert np.all(p.h_bias == 0.0)

    def test_seed_determinism_bit_identical(self):
        a = init_params("random", M=5, K=2, N=3, seed=42)
        b = init_params("random", M=5, K=2, N=3, seed=42)
        assert np.array_equal(a.w_offdiag, b.w_offdiag)
        assert np.array_equal(a.c_input, b.c_input)
        assert np.array_equal(a.b_loading, b.b_loading)

    def test_np_spectral_is_stub(self):
        with pytest.raises(NotImplementedError):
            init_params("np_spectral", M=3, K=1, N=1)
