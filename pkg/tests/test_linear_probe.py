import math

import numpy as np
import pytest

from affpipe import linear_probe as lp


def reference_adam_trajectory(p0, grads, lr, beta1, beta2, eps):
    """Direct elementwise evaluation of the Adam recurrence, kept independent
    of the implementation under test."""
    p = np.array(p0, dtype=np.float64)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    out = []
    for t, g in enumerate(grads, start=1):
        g = np.asarray(g, dtype=np.float64)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g ** 2
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        out.append(p.copy())
    return out


def reference_cross_entropy(logits, labels):
    """Direct per-sample formula: -log(e^{z_y} / sum e^{z_j})."""
    total = 0.0
    for row, y in zip(logits, labels):
        denom = sum(math.exp(z) for z in row)
        total += -math.log(math.exp(row[y]) / denom)
    return total / len(labels)


def separable_gaussians(rng, n_train, n_val, dim=384, margin=4.0):
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    # each class mean sits `margin` sigmas from the separating hyperplane
    offset = margin * direction

    def sample(n):
        y = rng.integers(0, 2, size=n)
        x = rng.normal(size=(n, dim))
        x += np.where(y[:, None] == 1, offset, -offset)
        return x, y

    return sample(n_train), sample(n_val)


def lda_oracle_accuracy(train, val):
    """Closed-form linear discriminant as an independent separability check."""
    (x, y), (vx, vy) = train, val
    mu0 = x[y == 0].mean(axis=0)
    mu1 = x[y == 1].mean(axis=0)
    centered = np.concatenate([x[y == 0] - mu0, x[y == 1] - mu1])
    cov = centered.T @ centered / len(x) + 1e-3 * np.eye(x.shape[1])
    w = np.linalg.solve(cov, mu1 - mu0)
    b = -0.5 * (mu0 + mu1) @ w
    pred = (vx @ w + b > 0).astype(int)
    return float(np.mean(pred == vy))


class TestInitProbe:
    def test_seed_determinism(self):
        a = lp.init_probe(384, np.random.default_rng(1))
        b = lp.init_probe(384, np.random.default_rng(1))
        np.testing.assert_array_equal(a.weights, b.weights)

    def test_bias_zero_and_weight_bound(self):
        probe = lp.init_probe(384, np.random.default_rng(2))
        np.testing.assert_array_equal(probe.bias, np.zeros(2))
        assert np.all(np.abs(probe.weights) < 1 / np.sqrt(384))


class TestForward:
    def test_zero_features_give_bias(self):
        probe = lp.init_probe(8, np.random.default_rng(0))
        probe.bias = np.array([0.3, -0.7])
        logits = lp.forward(probe, np.zeros((1, 8)))
        np.testing.assert_allclose(logits[0], probe.bias)

    def test_basis_selection(self):
        probe = lp.ProbeModel(weights=np.eye(2, 5), bias=np.zeros(2), feature_dim=5)
        logits = lp.forward(probe, np.array([[3.0, 5.0, 0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(logits[0], [3.0, 5.0])

    def test_linearity(self):
        rng = np.random.default_rng(3)
        probe = lp.init_probe(6, rng)
        probe.bias = rng.normal(size=2)
        x = rng.normal(size=(4, 6))
        l1 = lp.forward(probe, x) - probe.bias
        l2 = lp.forward(probe, 2 * x) - probe.bias
        np.testing.assert_allclose(l2, 2 * l1)

    def test_shape_mismatch(self):
        probe = lp.init_probe(6, np.random.default_rng(0))
        with pytest.raises(lp.ShapeError):
            lp.forward(probe, np.zeros((2, 7)))


class TestLoss:
    def test_uniform_logits(self):
        assert lp.loss(np.zeros((1, 2)), np.array([0])) == pytest.approx(math.log(2))
        assert lp.loss(np.zeros((1, 2)), np.array([1])) == pytest.approx(math.log(2))

    def test_saturated_correct(self):
        assert lp.loss(np.array([[20.0, -20.0]]), np.array([0])) < 1e-8

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(16, 2)) * 3
        labels = rng.integers(0, 2, size=16)
        assert lp.loss(logits, labels) == pytest.approx(
            reference_cross_entropy(logits, labels), abs=1e-10)

    def test_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            logits = rng.normal(size=(8, 2)) * 10
            labels = rng.integers(0, 2, size=8)
            assert lp.loss(logits, labels) >= 0.0


class TestAdamStep:
    CFG = lp.OptimizerConfig(learning_rate=1e-4, beta1=0.0, beta2=0.999, epsilon=1e-8)

    def test_zero_gradient_no_move(self):
        params = {"w": np.array([1.0, 2.0])}
        state = lp.AdamState.zeros_like(params)
        new_params, new_state = lp.adam_step(params, {"w": np.zeros(2)}, state, self.CFG)
        np.testing.assert_array_equal(new_params["w"], params["w"])
        assert new_state.t == 1

    def test_hand_computed_single_step(self):
        # g=1 from zero state: m_hat = 1, v_hat = 1, so dp = -lr / (1 + eps)
        params = {"p": np.array([0.5])}
        state = lp.AdamState.zeros_like(params)
        new_params, _ = lp.adam_step(params, {"p": np.array([1.0])}, state, self.CFG)
        expected_delta = -1e-4 * 1.0 / (1.0 + 1e-8)
        assert new_params["p"][0] - 0.5 == pytest.approx(expected_delta, abs=1e-12)

    def test_two_steps_constant_gradient_vs_reference(self):
        params = {"p": np.array([0.3, -0.2])}
        state = lp.AdamState.zeros_like(params)
        g = np.array([0.7, -1.3])
        for _ in range(2):
            params, state = lp.adam_step(params, {"p": g}, state, self.CFG)
        ref = reference_adam_trajectory(np.array([0.3, -0.2]), [g, g],
                                        1e-4, 0.0, 0.999, 1e-8)[-1]
        np.testing.assert_allclose(params["p"], ref, atol=1e-12)

    def test_random_trajectories_vs_reference(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            p0 = rng.normal(size=5)
            grads = [rng.normal(size=5) for _ in range(10)]
            params = {"p": p0.copy()}
            state = lp.AdamState.zeros_like(params)
            for g in grads:
                params, state = lp.adam_step(params, {"p": g}, state, self.CFG)
            ref = reference_adam_trajectory(p0, grads, 1e-4, 0.0, 0.999, 1e-8)[-1]
            np.testing.assert_allclose(params["p"], ref, atol=1e-10)

    def test_nonfinite_gradient_rejected(self):
        params = {"p": np.zeros(2)}
        state = lp.AdamState.zeros_like(params)
        with pytest.raises(lp.NonFiniteGradientError):
            lp.adam_step(params, {"p": np.array([np.nan, 0.0])}, state, self.CFG)


class TestGradients:
    def test_analytic_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        h = 1e-5
        for _ in range(20):
            dim = int(rng.integers(3, 10))
            n = int(rng.integers(2, 8))
            probe = lp.init_probe(dim, rng)
            probe.bias = rng.normal(size=2) * 0.1
            x = rng.normal(size=(n, dim))
            y = rng.integers(0, 2, size=n)
            _, grads = lp.loss_and_grad(probe, x, y)

            for pname, arr in (("weights", probe.weights), ("bias", probe.bias)):
                flat = arr.ravel()
                num = np.zeros_like(flat)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    up = lp.loss(lp.forward(probe, x), y)
                    flat[i] = orig - h
                    down = lp.loss(lp.forward(probe, x), y)
                    flat[i] = orig
                    num[i] = (up - down) / (2 * h)
                analytic = grads[pname].ravel()
                denom = np.maximum(np.abs(num), 1e-8)
                rel = np.abs(analytic - num) / denom
                assert rel.max() <= 1e-4


class TestPredict:
    def test_softmax_confidence(self):
        probe = lp.ProbeModel(weights=np.eye(2), bias=np.zeros(2), feature_dim=2)
        labels, conf = lp.predict(probe, np.array([[2.0, -1.0]]))
        assert labels[0] == 0
        assert conf[0] == pytest.approx(1 / (1 + math.exp(-3)), abs=1e-9)

    def test_tie_break_to_class_zero(self):
        probe = lp.ProbeModel(weights=np.eye(2), bias=np.zeros(2), feature_dim=2)
        labels, _ = lp.predict(probe, np.array([[1.5, 1.5]]))
        assert labels[0] == 0

    def test_shift_invariance(self):
        probe = lp.ProbeModel(weights=np.eye(2), bias=np.zeros(2), feature_dim=2)
        a, ca = lp.predict(probe, np.array([[0.4, -0.2]]))
        b, cb = lp.predict(probe, np.array([[0.4 + 7.0, -0.2 + 7.0]]))
        assert a[0] == b[0]
        assert ca[0] == pytest.approx(cb[0], abs=1e-9)


class TestTraining:
    def test_separable_synthetic_reaches_099_in_5_epochs(self):
        rng = np.random.default_rng(8)
        train, val = separable_gaussians(rng, 1000, 500)
        assert lda_oracle_accuracy(train, val) >= 0.99  # oracle: data is separable
        probe = lp.init_probe(384, np.random.default_rng(0))
        cfg = lp.OptimizerConfig(learning_rate=1e-2, epochs=5, batch_size=64)
        _, curve = lp.train_on_features(probe, train[0], train[1], val[0], val[1],
                                        cfg, np.random.default_rng(1))
        assert curve[-1].val_accuracy >= 0.99

    def test_zero_learning_rate_is_identity(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(40, 16))
        y = rng.integers(0, 2, size=40)
        probe = lp.init_probe(16, np.random.default_rng(0))
        cfg = lp.OptimizerConfig(learning_rate=0.0, epochs=4, batch_size=8)
        trained, curve = lp.train_on_features(probe, x, y, x, y, cfg,
                                              np.random.default_rng(1))
        np.testing.assert_array_equal(trained.weights, probe.weights)
        np.testing.assert_array_equal(trained.bias, probe.bias)
        assert len({e.train_loss for e in curve}) == 1  # flat curve

    def test_same_seed_identical_curves(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(60, 8))
        y = rng.integers(0, 2, size=60)
        probe = lp.init_probe(8, np.random.default_rng(0))
        cfg = lp.OptimizerConfig(learning_rate=1e-3, epochs=6, batch_size=16)
        _, c1 = lp.train_on_features(probe, x, y, x, y, cfg, np.random.default_rng(5))
        _, c2 = lp.train_on_features(probe, x, y, x, y, cfg, np.random.default_rng(5))
        assert c1 == c2

    def test_epochs_contiguous(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(20, 4))
        y = rng.integers(0, 2, size=20)
        probe = lp.init_probe(4, np.random.default_rng(0))
        cfg = lp.OptimizerConfig(learning_rate=1e-3, epochs=30, batch_size=8)
        _, curve = lp.train_on_features(probe, x, y, x, y, cfg, np.random.default_rng(1))
        assert [e.epoch for e in curve] == list(range(1, 31))

    def test_smoothed_loss_monotone_on_separable_task(self):
        rng = np.random.default_rng(12)
        train, val = separable_gaussians(rng, 400, 200, dim=64)
        probe = lp.init_probe(64, np.random.default_rng(0))
        cfg = lp.OptimizerConfig(learning_rate=1e-2, epochs=30, batch_size=64)
        _, curve = lp.train_on_features(probe, train[0], train[1], val[0], val[1],
                                        cfg, np.random.default_rng(1))
        losses = np.array([e.train_loss for e in curve])
        assert np.all(np.isfinite(losses))
        smoothed = np.convolve(losses, np.ones(3) / 3, mode="valid")
        assert np.all(np.diff(smoothed) <= 1e-4)

    def test_class_weighting_flag(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(50, 6))
        y = (rng.random(50) < 0.2).astype(int)
        probe = lp.init_probe(6, np.random.default_rng(0))
        cfg = lp.OptimizerConfig(learning_rate=1e-3, epochs=2, batch_size=10,
                                 class_weighting=True)
        trained, _ = lp.train_on_features(probe, x, y, x, y, cfg,
                                          np.random.default_rng(1))
        assert np.all(np.isfinite(trained.weights))
