"""Network stack: forward/backward correctness, training behavior,
persistence round trips."""

import json

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdecast.neural import (
    Mlp,
    MlpFormatError,
    NormStats,
    TrainConfig,
    TrainingError,
    mlp_forward,
    mlp_gradients,
    mlp_load,
    mlp_load_file,
    mlp_save,
    mlp_save_file,
    mlp_train,
    new_mlp,
    softplus,
    softplus_prime,
)


class TestSoftplus:
    def test_at_zero(self):
        assert float(softplus(0.0)) == pytest.approx(np.log(2.0), rel=1e-15)

    def test_large_positive(self):
        mpmath.mp.dps = 50
        ref = float(mpmath.log(1 + mpmath.e**100))
        assert float(softplus(100.0)) == pytest.approx(ref, rel=1e-12)

    def test_large_negative(self):
        mpmath.mp.dps = 50
        ref = float(mpmath.log(1 + mpmath.e**-100))
        assert float(softplus(-100.0)) == pytest.approx(ref, rel=1e-12)

    @given(st.floats(-500, 500))
    @settings(max_examples=100, deadline=None)
    def test_finite_and_monotone_derivative(self, x):
        y = float(softplus(x))
        assert np.isfinite(y) and y >= 0.0
        d = float(softplus_prime(x))
        assert 0.0 <= d <= 1.0


class TestForward:
    def test_zero_network_zero_output(self):
        net = new_mlp((3, 8, 8, 2), 0)
        for w in net.weights:
            w[:] = 0.0
        out = mlp_forward(net, np.ones(3))
        np.testing.assert_array_equal(out, [0.0, 0.0])

    def test_single_linear_layer_identity(self):
        net = Mlp((2, 2), [np.eye(2)], [np.zeros(2)], NormStats(np.zeros(2), np.ones(2)))
        x = np.array([0.3, -1.2])
        np.testing.assert_array_equal(mlp_forward(net, x), x)

    def test_width_mismatch(self):
        net = new_mlp((4, 8, 1), 0)
        with pytest.raises(ValueError, match="width"):
            mlp_forward(net, np.ones(3))

    def test_matches_handrolled_reference(self):
        # Independent forward pass written out longhand.
        rng = np.random.default_rng(123)
        net = new_mlp((5, 16, 16, 2), rng)
        net.norm = NormStats(rng.normal(size=5), rng.uniform(0.5, 2.0, size=5))
        x = rng.normal(size=(7, 5))
        h = (x - net.norm.mean) / net.norm.scale
        h = np.log1p(np.exp(-np.abs(h @ net.weights[0] + net.biases[0]))) + np.maximum(
            h @ net.weights[0] + net.biases[0], 0.0
        )
        h = np.log1p(np.exp(-np.abs(h @ net.weights[1] + net.biases[1]))) + np.maximum(
            h @ net.weights[1] + net.biases[1], 0.0
        )
        ref = h @ net.weights[2] + net.biases[2]
        np.testing.assert_allclose(mlp_forward(net, x), ref, atol=1e-12)

    def test_continuity_with_lipschitz_bound(self):
        rng = np.random.default_rng(5)
        net = new_mlp((4, 24, 24, 1), rng)
        bound = net.lipschitz_bound()
        assert np.isfinite(bound)
        x = rng.normal(size=4)
        for scale in (1e-3, 1e-5, 1e-7):
            delta = rng.normal(size=4)
            delta *= scale / np.linalg.norm(delta)
            diff = abs(float(mlp_forward(net, x + delta) - mlp_forward(net, x)))
            assert diff <= bound * scale * (1 + 1e-9)


class TestGradients:
    def test_zero_residual_zero_gradient(self):
        net = new_mlp((2, 6, 1), 3)
        x = np.random.default_rng(0).normal(size=(10, 2))
        y = mlp_forward(net, x)
        gw, gb, loss = mlp_gradients(net, x, y)
        assert loss == 0.0
        for g in gw + gb:
            np.testing.assert_array_equal(g, 0.0)

    def test_single_parameter_analytic(self):
        # One linear weight, MSE = mean (w x - y)^2; d/dw = mean 2 x (w x - y).
        net = Mlp((1, 1), [np.array([[0.7]])], [np.zeros(1)], NormStats.identity(1))
        x = np.array([[1.0], [2.0], [-1.5]])
        y = np.array([[2.0], [3.0], [0.5]])
        gw, gb, _ = mlp_gradients(net, x, y)
        resid = 0.7 * x - y
        assert gw[0][0, 0] == pytest.approx(float(np.mean(2 * x * resid)), rel=1e-12)
        assert gb[0][0] == pytest.approx(float(np.mean(2 * resid)), rel=1e-12)

    def _finite_difference_check(self, net, x, y, weights=None, n_probe=60, seed=0):
        rng = np.random.default_rng(seed)
        gw, gb, _ = mlp_gradients(net, x, y, weights)
        worst = 0.0
        h = 1e-5
        params = [(li, w) for li, w in enumerate(net.weights)] + [
            (li, b) for li, b in enumerate(net.biases)
        ]
        grads = gw + gb
        for _ in range(n_probe):
            pi = rng.integers(len(params))
            _, arr = params[pi]
            flat = arr.reshape(-1)
            j = rng.integers(flat.size)
            orig = flat[j]
            flat[j] = orig + h
            _, _, lp = mlp_gradients(net, x, y, weights)
            flat[j] = orig - h
            _, _, lm = mlp_gradients(net, x, y, weights)
            flat[j] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[pi].reshape(-1)[j]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
        return worst

    def test_paper_architecture_finite_difference(self):
        rng = np.random.default_rng(42)
        net = new_mlp((6, 48, 48, 1), rng)
        x = rng.normal(size=(32, 6))
        y = rng.normal(size=(32, 1))
        assert self._finite_difference_check(net, x, y) < 1e-4

    def test_weighted_loss_finite_difference(self):
        rng = np.random.default_rng(9)
        net = new_mlp((4, 12, 12, 1), rng)
        x = rng.normal(size=(24, 4))
        y = rng.normal(size=(24, 1))
        w = rng.uniform(0.1, 10.0, size=24)
        assert self._finite_difference_check(net, x, y, weights=w) < 1e-4

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=12, deadline=None)
    def test_gradient_property_random_nets(self, seed):
        rng = np.random.default_rng(seed)
        sizes = (3, int(rng.integers(4, 20)), int(rng.integers(4, 20)), 2)
        net = new_mlp(sizes, rng)
        x = rng.normal(size=(8, 3))
        y = rng.normal(size=(8, 2))
        assert self._finite_difference_check(net, x, y, n_probe=20, seed=seed) < 1e-4

    def test_empty_batch_rejected(self):
        net = new_mlp((2, 4, 1), 0)
        with pytest.raises(TrainingError):
            mlp_gradients(net, np.empty((0, 2)), np.empty((0, 1)))


class TestTraining:
    def test_learns_affine_function(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1.0, 1.0, size=(1000, 1))
        y = 2.0 * x + 1.0
        cfg = TrainConfig(learning_rate=5e-3, batch_size=32, epochs=200, seed=3, patience=200)
        result = mlp_train(new_mlp((1, 48, 1), 3), x, y, cfg)
        assert np.sqrt(min(result.val_losses)) < 1e-3

    def test_deterministic_histories(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(300, 2))
        y = x @ np.array([[1.0], [-0.5]])
        cfg = TrainConfig(epochs=20, seed=11)
        r1 = mlp_train(new_mlp((2, 8, 1), 11), x, y, cfg)
        r2 = mlp_train(new_mlp((2, 8, 1), 11), x, y, cfg)
        assert r1.train_losses == r2.train_losses
        assert r1.val_losses == r2.val_losses

    def test_zero_epochs_returns_net_unchanged(self):
        net = new_mlp((2, 8, 1), 7)
        x = np.zeros((10, 2))
        y = np.zeros((10, 1))
        result = mlp_train(net, x, y, TrainConfig(epochs=0))
        for w0, w1 in zip(net.weights, result.net.weights):
            np.testing.assert_array_equal(w0, w1)
        assert result.train_losses == []

    def test_normalization_invariance_power_of_two_scale(self):
        # A power-of-two input scaling is exact in floating point, so the
        # recomputed z-scores and hence the whole optimization are bitwise
        # identical.
        rng = np.random.default_rng(4)
        x = rng.normal(size=(400, 3))
        y = (x @ np.array([[0.5], [1.5], [-1.0]])) + 0.2
        cfg = TrainConfig(epochs=15, seed=2)
        r1 = mlp_train(new_mlp((3, 10, 1), 2), x, y, cfg)
        r2 = mlp_train(new_mlp((3, 10, 1), 2), 4.0 * x, y, cfg)
        assert r1.train_losses == r2.train_losses

    def test_divergence_reported(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(64, 1))
        y = rng.normal(size=(64, 1)) * 1e160
        cfg = TrainConfig(learning_rate=1e30, epochs=10, seed=0)
        with pytest.raises(TrainingError):
            mlp_train(new_mlp((1, 8, 1), 0), x, y, cfg)


class TestPersistence:
    def test_roundtrip_bitwise(self):
        net = new_mlp((3, 5, 2), 8)
        net.norm = NormStats(np.array([0.1, -0.2, 0.3]), np.array([1.0, 2.0, 0.5]))
        doc = json.loads(json.dumps(mlp_save(net)))
        loaded = mlp_load(doc)
        for a, b in zip(net.weights, loaded.weights):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(net.biases, loaded.biases):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(net.norm.mean, loaded.norm.mean)

    def test_forward_equality_after_roundtrip(self, tmp_path):
        rng = np.random.default_rng(17)
        net = new_mlp((4, 12, 12, 1), rng)
        net.norm = NormStats(rng.normal(size=4), rng.uniform(0.5, 2.0, 4))
        path = tmp_path / "net.json"
        mlp_save_file(net, path)
        loaded = mlp_load_file(path)
        x = rng.normal(size=(100, 4))
        np.testing.assert_array_equal(mlp_forward(net, x), mlp_forward(loaded, x))

    def test_truncated_file_rejected(self, tmp_path):
        net = new_mlp((2, 4, 1), 0)
        path = tmp_path / "net.json"
        mlp_save_file(net, path)
        path.write_text(path.read_text()[:40])
        with pytest.raises(MlpFormatError):
            mlp_load_file(path)

    def test_missing_field_named(self):
        doc = mlp_save(new_mlp((2, 4, 1), 0))
        del doc["biases"]
        with pytest.raises(MlpFormatError, match="biases"):
            mlp_load(doc)
        bad_norm = mlp_save(new_mlp((2, 4, 1), 0))
        del bad_norm["norm"]["scale"]
        with pytest.raises(MlpFormatError, match="norm.scale"):
            mlp_load(bad_norm)

    def test_shape_mismatch_rejected(self):
        doc = mlp_save(new_mlp((2, 4, 1), 0))
        doc["layer_sizes"] = [2, 5, 1]
        with pytest.raises(MlpFormatError):
            mlp_load(doc)
