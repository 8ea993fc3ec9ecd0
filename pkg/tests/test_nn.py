"""Network core: forward oracle, gradient checks, SGD, checkpoints."""

import numpy as np
import pytest
from helpers import (
    TOY_DIMS,
    finite_difference_grads,
    gradient_check_suite,
    max_relative_error,
    random_bank,
    random_params,
    scalar_forward_oracle,
)

from fucrt.errors import ConfigurationError, FormatError, NumericError
from fucrt.losses import LossConfig
from fucrt.nn import (
    Gradients,
    ModelDims,
    ModelParams,
    backward,
    deserialize_params,
    forward,
    init_params,
    load_params,
    save_params,
    serialize_params,
    sgd_step,
)


class TestForward:
    def test_zero_params_give_uniform_probabilities(self):
        dims = ModelDims(input_dim=5, hidden=(6,), rep_dim=4, class_count=10)
        params = init_params(dims, 0)
        params = ModelParams(
            layers=[(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers],
            encoder_depth=params.encoder_depth,
            dims=dims,
        )
        res = forward(params, np.random.default_rng(1).normal(size=(7, 5)))
        assert np.allclose(res.probabilities, 0.1, atol=1e-15)

    def test_equal_logits_give_symmetric_probabilities(self):
        dims = ModelDims(input_dim=2, hidden=(), rep_dim=2, class_count=4)
        params = init_params(dims, 3)
        # Zero the head so logits are the (zero) bias: all equal.
        w, b = params.layers[-1]
        params.layers[-1] = (np.zeros_like(w), np.zeros_like(b))
        res = forward(params, np.array([[0.3, -1.2]]))
        assert np.allclose(res.logits, 0.0)
        assert np.allclose(res.probabilities, 0.25, atol=1e-15)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(42)
        dims = ModelDims(input_dim=5, hidden=(6, 5), rep_dim=4, class_count=3)
        params = init_params(dims, 11)
        batch = rng.normal(size=(4, 5))
        res = forward(params, batch)
        expected = scalar_forward_oracle(params, batch)
        assert np.max(np.abs(res.probabilities - expected)) < 1e-12

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(7)
        params = init_params(TOY_DIMS, 5)
        for _ in range(20):
            res = forward(params, rng.normal(size=(8, 3), scale=5.0))
            assert np.allclose(res.probabilities.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(res.probabilities >= 0.0)

    def test_dimension_mismatch_raises(self):
        params = init_params(TOY_DIMS, 5)
        with pytest.raises(ConfigurationError):
            forward(params, np.zeros((2, 4)))

    def test_softmax_stable_on_large_logits(self):
        dims = ModelDims(input_dim=2, hidden=(), rep_dim=2, class_count=2)
        params = init_params(dims, 0)
        w, b = params.layers[-1]
        params.layers[-1] = (np.zeros_like(w), np.array([2000.0, -2000.0]))
        res = forward(params, np.zeros((1, 2)))
        assert np.all(np.isfinite(res.probabilities))
        assert res.probabilities[0, 0] == pytest.approx(1.0)


class TestBackward:
    def test_pure_ce_at_one_hot_optimum_has_zero_gradients(self):
        dims = ModelDims(input_dim=2, hidden=(), rep_dim=2, class_count=3)
        params = init_params(dims, 0)
        w, b = params.layers[-1]
        # exp(-2000) underflows to exactly zero, so probabilities are one-hot.
        params.layers[-1] = (np.zeros_like(w), np.array([0.0, -2000.0, -2000.0]))
        loss, grads = backward(
            params, np.array([[0.5, -0.5]]), np.array([0]), LossConfig(0.0, 0.0, 1.0)
        )
        assert loss == pytest.approx(0.0, abs=1e-12)
        for gw, gb in grads.layers:
            assert np.max(np.abs(gw)) < 1e-12
            assert np.max(np.abs(gb)) < 1e-12

    def test_full_loss_matches_finite_differences(self):
        rng = np.random.default_rng(2024)
        config = LossConfig(lambda1=1.0, lambda2=1.0, tau_t=0.5)
        params = random_params(rng)
        batch = rng.normal(size=(6, 3))
        labels = np.array([0, 1, 2, 0, 1, 2])
        bank = random_bank(rng, 3, 4)
        _, analytic = backward(params, batch, labels, config, bank)
        numeric = finite_difference_grads(params, batch, labels, config, bank)
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_gradient_check_suite_100_random_instances(self):
        assert gradient_check_suite(90125, trials=100) < 1e-4

    def test_duplicated_batch_leaves_ce_gradient_unchanged(self):
        rng = np.random.default_rng(4)
        params = init_params(TOY_DIMS, 17)
        batch = rng.normal(size=(5, 3))
        labels = rng.integers(0, 3, size=5)
        config = LossConfig(0.0, 0.0, 1.0)
        _, single = backward(params, batch, labels, config)
        _, doubled = backward(
            params, np.vstack([batch, batch]), np.concatenate([labels, labels]), config
        )
        for (gw, gb), (hw, hb) in zip(single.layers, doubled.layers):
            assert np.max(np.abs(gw - hw)) < 1e-10
            assert np.max(np.abs(gb - hb)) < 1e-10

    def test_global_term_without_bank_raises(self):
        params = init_params(TOY_DIMS, 1)
        with pytest.raises(ConfigurationError):
            backward(
                params, np.zeros((2, 3)), np.array([0, 1]), LossConfig(0.0, 1.0, 1.0), None
            )


class TestSgdStep:
    def test_zero_learning_rate_is_identity(self):
        params = init_params(TOY_DIMS, 8)
        grads = Gradients(layers=[(np.ones_like(w), np.ones_like(b)) for w, b in params.layers])
        updated = sgd_step(params, grads, 0.0)
        for (w0, b0), (w1, b1) in zip(params.layers, updated.layers):
            assert np.array_equal(w0, w1)
            assert np.array_equal(b0, b1)

    def test_scalar_arithmetic(self):
        dims = ModelDims(input_dim=1, hidden=(), rep_dim=1, class_count=1)
        params = ModelParams(
            layers=[(np.array([[1.0]]), np.array([0.0])), (np.array([[1.0]]), np.array([0.0]))],
            encoder_depth=1,
            dims=dims,
        )
        grads = Gradients(
            layers=[(np.array([[2.0]]), np.array([0.0])), (np.array([[0.0]]), np.array([0.0]))]
        )
        updated = sgd_step(params, grads, 0.01)
        assert updated.layers[0][0][0, 0] == pytest.approx(0.98, abs=1e-15)

    def test_two_steps_equal_one_step_with_summed_gradients(self):
        params = init_params(TOY_DIMS, 3)
        rng = np.random.default_rng(5)
        g1 = Gradients(
            layers=[(rng.normal(size=w.shape), rng.normal(size=b.shape)) for w, b in params.layers]
        )
        g2 = Gradients(
            layers=[(rng.normal(size=w.shape), rng.normal(size=b.shape)) for w, b in params.layers]
        )
        summed = Gradients(
            layers=[(a + c, b + d) for (a, b), (c, d) in zip(g1.layers, g2.layers)]
        )
        via_two = sgd_step(sgd_step(params, g1, 0.1), g2, 0.1)
        via_one = sgd_step(params, summed, 0.1)
        for (w0, b0), (w1, b1) in zip(via_two.layers, via_one.layers):
            assert np.allclose(w0, w1, atol=1e-15)
            assert np.allclose(b0, b1, atol=1e-15)

    def test_nonfinite_gradient_raises_with_layer_index(self):
        params = init_params(TOY_DIMS, 3)
        layers = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
        layers[1] = (layers[1][0].copy(), layers[1][1].copy())
        layers[1][0][0, 0] = np.nan
        with pytest.raises(NumericError, match="layer 1"):
            sgd_step(params, Gradients(layers=layers), 0.1)


class TestInitParams:
    def test_same_seed_is_bitwise_identical(self):
        a = init_params(TOY_DIMS, 12345)
        b = init_params(TOY_DIMS, 12345)
        for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
            assert wa.tobytes() == wb.tobytes()
            assert ba.tobytes() == bb.tobytes()

    def test_different_seeds_differ(self):
        a = init_params(TOY_DIMS, 1)
        b = init_params(TOY_DIMS, 2)
        assert any(
            not np.array_equal(wa, wb) for (wa, _), (wb, _) in zip(a.layers, b.layers)
        )

    def test_weights_within_fan_in_bound_and_biases_zero(self):
        dims = ModelDims(input_dim=3, hidden=(), rep_dim=4, class_count=2)
        params = init_params(dims, 7)
        for w, b in params.layers:
            bound = np.sqrt(6.0 / w.shape[1])
            assert np.all(np.abs(w) <= bound)
            assert np.all(b == 0.0)


class TestTrainingSanity:
    def test_loss_non_increasing_on_separable_logistic_problem(self):
        rng = np.random.default_rng(33)
        n = 60
        x0 = rng.normal(loc=(-2.0, 0.0), scale=0.5, size=(n, 2))
        x1 = rng.normal(loc=(2.0, 0.0), scale=0.5, size=(n, 2))
        batch = np.vstack([x0, x1])
        labels = np.array([0] * n + [1] * n)
        dims = ModelDims(input_dim=2, hidden=(), rep_dim=2, class_count=2)
        params = init_params(dims, 0)
        config = LossConfig(0.0, 0.0, 1.0)
        losses = []
        for _ in range(50):
            loss, grads = backward(params, batch, labels, config)
            losses.append(loss)
            params = sgd_step(params, grads, 0.01)
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        params = init_params(ModelDims(input_dim=5, hidden=(7, 6), rep_dim=4, class_count=3), 21)
        path = tmp_path / "model.bin"
        save_params(params, path)
        loaded = load_params(path)
        assert loaded.encoder_depth == params.encoder_depth
        assert loaded.dims == params.dims
        for (w0, b0), (w1, b1) in zip(params.layers, loaded.layers):
            assert w0.tobytes() == w1.tobytes()
            assert b0.tobytes() == b1.tobytes()
        assert serialize_params(loaded) == serialize_params(params)

    def test_magic_header(self):
        params = init_params(TOY_DIMS, 3)
        data = serialize_params(params)
        assert data.startswith(b"FUCRT1\n")

    def test_bad_magic_raises(self):
        with pytest.raises(FormatError, match="offset 0"):
            deserialize_params(b"NOPE!!\n123")

    def test_truncated_raises(self):
        params = init_params(TOY_DIMS, 3)
        data = serialize_params(params)
        with pytest.raises(FormatError, match="truncated"):
            deserialize_params(data[:-8])
