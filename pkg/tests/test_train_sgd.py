import numpy as np
import pytest

from conftest import make_params
from oracles import central_diff
from plrnn_lab.core import VanillaRnnWeights
from plrnn_lab.regularizers import RegSpec, init_params, init_vanilla
from plrnn_lab.tasks_data import TrialSet, gen_addition
from plrnn_lab.train_sgd import (NonFiniteLossError, SgdConfig, TrainTestSplit,
                                 bptt_grads, forward_latents, p_correct,
                                 predict, train)


def param_vector(p):
    return np.concatenate([p.a_diag, p.w_offdiag.ravel(), p.c_input.ravel(),
                           p.h_bias, p.b_loading.ravel()])


def param_unvector(p, vec):
    M, K, N = p.M, p.K, p.N
    idx = 0
    a = vec[idx:idx + M]; idx += M
    w = vec[idx:idx + M * M].reshape(M, M).copy(); idx += M * M
    np.fill_diagonal(w, 0.0)
    c = vec[idx:idx + M * K].reshape(M, K); idx += M * K
    h = vec[idx:idx + M]; idx += M
    b = vec[idx:].reshape(N, M)
    return p.replace(a_diag=a, w_offdiag=w, c_input=c, h_bias=h, b_loading=b)


def grads_vector(p, grads):
    return np.concatenate([grads["a_diag"], grads["w_offdiag"].ravel(),
                           grads["c_input"].ravel(), grads["h_bias"],
                           grads["b_loading"].ravel()])


class TestBpttGrads:
    def test_exact_solution_has_zero_loss(self, addition_network):
        trials = gen_addition(200, 50, seed=0)
        loss, grads = bptt_grads(addition_network, trials.inputs,
                                 trials.targets, "mse_final_step")
        assert loss < 1e-20
        assert all(np.max(np.abs(g)) < 1e-10 for g in grads.values())

    def test_single_step_closed_form(self):
        # T=1: z_1 = C s_1 + h, so the readout gradient is plain least squares
        rng = np.random.Generator(np.random.Philox(7))
        p = make_params(M=3, K=2, N=1, seed=7)
        inputs = rng.normal(size=(8, 1, 2))
        targets = rng.normal(size=(8, 1))
        loss, grads = bptt_grads(p, inputs, targets, "mse_final_step")
        z1 = inputs[:, 0, :] @ p.c_input.T + p.h_bias
        y = z1 @ p.b_loading.T
        expected_db = 2.0 * (y - targets).T @ z1 / 8
        np.testing.assert_allclose(grads["b_loading"], expected_db, atol=1e-12)
        assert loss == pytest.approx(float(np.mean((y - targets) ** 2)), rel=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_finite_differences(self, seed):
        rng = np.random.Generator(np.random.Philox(seed))
        p = make_params(M=4, K=2, N=1, seed=seed, a_range=(-0.6, 0.6),
                        w_scale=0.7)
        inputs = rng.normal(size=(3, 12, 2))
        targets = rng.normal(size=(3, 1))
        _, grads = bptt_grads(p, inputs, targets, "mse_final_step")

        def f(vec):
            loss, _ = bptt_grads(param_unvector(p, vec), inputs, targets,
                                 "mse_final_step")
            return loss
        fd = central_diff(f, param_vector(p))
        an = grads_vector(p, grads)
        scale = np.maximum(np.abs(fd), 1e-3)
        assert np.max(np.abs(an - fd) / scale) < 1e-4

    def test_cross_entropy_matches_finite_differences(self):
        rng = np.random.Generator(np.random.Philox(3))
        p = make_params(M=3, K=2, N=4, seed=3, a_range=(-0.5, 0.5), w_scale=0.6)
        inputs = rng.normal(size=(5, 7, 2))
        targets = rng.integers(0, 4, size=5)
        _, grads = bptt_grads(p, inputs, targets, "cross_entropy_final_step")

        def f(vec):
            loss, _ = bptt_grads(param_unvector(p, vec), inputs, targets,
                                 "cross_entropy_final_step")
            return loss
        fd = central_diff(f, param_vector(p))
        an = grads_vector(p, grads)
        scale = np.maximum(np.abs(fd), 1e-3)
        assert np.max(np.abs(an - fd) / scale) < 1e-4

    def test_vanilla_matches_finite_differences(self):
        rng = np.random.Generator(np.random.Philox(9))
        w = init_vanilla("random", M=4, K=2, N=1, seed=9)
        inputs = rng.normal(size=(3, 10, 2))
        targets = rng.normal(size=(3, 1))
        _, grads = bptt_grads(w, inputs, targets, "mse_final_step")

        def vec_of(weights):
            return np.concatenate([weights.w_full.ravel(),
                                   weights.c_input.ravel(), weights.h_bias,
                                   weights.b_loading.ravel()])

        def unvec(vec):
            idx = 0
            wf = vec[idx:idx + 16].reshape(4, 4); idx += 16
            c = vec[idx:idx + 8].reshape(4, 2); idx += 8
            h = vec[idx:idx + 4]; idx += 4
            b = vec[idx:].reshape(1, 4)
            return VanillaRnnWeights(w_full=wf, c_input=c, h_bias=h, b_loading=b)

        def f(vec):
            loss, _ = bptt_grads(unvec(vec), inputs, targets, "mse_final_step")
            return loss
        fd = central_diff(f, vec_of(w))
        an = np.concatenate([grads["w_full"].ravel(), grads["c_input"].ravel(),
                             grads["h_bias"], grads["b_loading"].ravel()])
        scale = np.maximum(np.abs(fd), 1e-3)
        assert np.max(np.abs(an - fd) / scale) < 1e-4

    def test_nonfinite_reports_sample(self):
        # only the driven sample can grow: h = 0 keeps undriven runs at zero
        p = make_params(M=2, K=1, N=1, seed=1).replace(
            a_diag=np.array([40.0, 40.0]), h_bias=np.zeros(2),
            c_input=np.ones((2, 1)))
        inputs = np.zeros((3, 400, 1))
        inputs[1] = 1.0  # this sample blows up
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NonFiniteLossError) as err:
                bptt_grads(p, inputs, np.zeros((3, 1)), "mse_final_step")
        assert err.value.sample_index == 1


def tiny_split(R=64, T=25, seed=0):
    trials = gen_addition(R, T, seed=seed)
    test = gen_addition(32, T, seed=seed + 1)
    return TrainTestSplit(train=trials, test=test)


class TestTrain:
    def test_lr_zero_keeps_parameters(self):
        data = tiny_split()
        config = SgdConfig(lr=0.0, epochs=2, batch_size=16, M=4, seed=0)
        init = init_params("random", 4, 2, 1, seed=0)
        result = train(config, data, init_model=init)
        assert np.array_equal(result.best_params.w_offdiag, init.w_offdiag)
        assert np.array_equal(result.best_params.a_diag, init.a_diag)

    def test_seed_determinism(self):
        data = tiny_split()
        config = SgdConfig(lr=1e-3, epochs=3, batch_size=16, M=4, seed=5)
        r1 = train(config, data)
        r2 = train(config, data)
        assert [h["train_loss"] for h in r1.history] == \
            [h["train_loss"] for h in r2.history]

    def test_penalty_only_training_reaches_manifold(self):
        data = tiny_split(R=32)
        reg = RegSpec.common_tau("manifold_attractor", 10.0, m_reg=2)
        config = SgdConfig(lr=0.02, epochs=400, batch_size=32, M=4, seed=2,
                           reg=reg, task_weight=0.0, init_scheme="random")
        result = train(config, data)
        p = result.best_params
        assert np.max(np.abs(p.a_diag[:2] - 1.0)) < 1e-3
        assert np.max(np.abs(p.w_offdiag[:2, :])) < 1e-3
        assert np.max(np.abs(p.h_bias[:2])) < 1e-3

    def test_zero_tau_matches_unregularized_bitwise(self):
        data = tiny_split()
        base = SgdConfig(lr=1e-3, epochs=2, batch_size=16, M=4, seed=3)
        reg0 = SgdConfig(lr=1e-3, epochs=2, batch_size=16, M=4, seed=3,
                         reg=RegSpec.common_tau("manifold_attractor", 0.0,
                                                m_reg=2))
        r1 = train(base, data)
        r2 = train(reg0, data)
        assert np.array_equal(r1.best_params.w_offdiag, r2.best_params.w_offdiag)
        assert [h["train_loss"] for h in r1.history] == \
            [h["train_loss"] for h in r2.history]

    def test_clipping_bounds_update(self):
        # gradients above the clip get rescaled to global norm <= clip
        from plrnn_lab.train_sgd import _clip_global
        grads = {"a": np.full(4, 100.0), "b": np.full((2, 2), -50.0)}
        clipped = _clip_global(grads, clip=10.0)
        total = np.sqrt(sum(np.sum(g ** 2) for g in clipped.values()))
        assert total <= 10.0 + 1e-9
        small = {"a": np.array([0.1])}
        assert _clip_global(small, 10.0)["a"] is small["a"]

    def test_divergent_training_aborts_with_partial_trace(self):
        data = tiny_split(R=32)
        config = SgdConfig(lr=1e6, epochs=50, batch_size=32, M=4, seed=0,
                           init_scale=3.0)
        result = train(config, data)
        assert result.aborted
        assert len(result.history) < 50

    def test_checkpoint_resume_continues_identically(self, tmp_path):
        data = tiny_split()
        config = SgdConfig(lr=1e-3, epochs=6, batch_size=16, M=4, seed=8)
        full = train(config, data)
        train(config, data, checkpoint_path=tmp_path / "ck", checkpoint_every=3)
        resumed = train(config, data, resume_from=tmp_path / "ck")
        losses_full = [h["train_loss"] for h in full.history]
        losses_res = [h["train_loss"] for h in resumed.history]
        assert len(losses_full) == len(losses_res) == 6
        np.testing.assert_allclose(losses_res, losses_full, atol=1e-9)

    def test_vanilla_rnn_trains(self):
        data = tiny_split(R=32)
        config = SgdConfig(lr=1e-3, epochs=2, batch_size=16, M=4, seed=1,
                           model_kind="vanilla_rnn")
        result = train(config, data)
        assert isinstance(result.best_params, VanillaRnnWeights)
        assert len(result.history) == 2


class TestPCorrect:
    def test_perfect_network_scores_one(self, addition_network):
        trials = gen_addition(500, 40, seed=4)
        assert p_correct(addition_network, trials, "mse_final_step") == 1.0

    def test_constant_predictor_matches_triangular_integral(self):
        # predicting 1.0 for the sum of two uniforms: P(|1-S|<=c) = c(2-c)
        trials = gen_addition(100_000, 30, seed=5)
        p = make_params(M=2, K=2, N=1, seed=0).replace(
            a_diag=np.zeros(2), w_offdiag=np.zeros((2, 2)),
            c_input=np.zeros((2, 2)), h_bias=np.array([1.0, 0.0]),
            b_loading=np.array([[1.0, 0.0]]))
        pc = p_correct(p, trials, "mse_final_step", threshold=0.04)
        analytic = 0.04 * (2 - 0.04)
        assert pc == pytest.approx(analytic, abs=0.004)

    def test_random_classifier_is_at_chance(self):
        rng = np.random.Generator(np.random.Philox(11))
        p = make_params(M=3, K=1, N=10, seed=11,
                        obs_kind="softmax_categorical")
        trials = TrialSet(inputs=rng.normal(size=(10_000, 5, 1)),
                          targets=rng.integers(0, 10, size=10_000),
                          task_kind="sequential_mnist")
        pc = p_correct(p, trials, "cross_entropy_final_step")
        assert pc == pytest.approx(0.1, abs=0.01)

    def test_empty_test_set_rejected(self, addition_network):
        trials = TrialSet(inputs=np.zeros((0, 30, 2)), targets=np.zeros(0),
                          task_kind="addition")
        with pytest.raises(ValueError):
            p_correct(addition_network, trials, "mse_final_step")
