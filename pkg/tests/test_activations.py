import numpy as np
import pytest

from capsconv.activations import (
    MarginLossConfig,
    class_scores,
    class_scores_backward,
    leaky_relu,
    leaky_relu_backward,
    margin_loss,
    margin_loss_backward,
    one_hot,
    predict,
    squash,
    squash_backward,
)
from capsconv.tensor_core import frobenius_norm
from numgrad import fd_grad, rel_err


class TestLeakyRelu:
    """Pointwise max(x, 0.1 x) and its subgradient."""

    def test_values(self):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        np.testing.assert_allclose(leaky_relu(x), [-0.2, -0.05, 0.0, 0.5, 2.0])

    def test_grad_at_zero_is_one(self):
        g = leaky_relu_backward(np.array([0.0]), np.array([1.0]))
        np.testing.assert_array_equal(g, [1.0])

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 4)) + 0.01  # keep away from the kink
        co = rng.normal(size=(3, 4))
        got = leaky_relu_backward(x, co)
        want = fd_grad(lambda z: float((leaky_relu(z) * co).sum()), x)
        assert rel_err(got, want) < 1e-6


class TestSquash:
    """Norm law, direction preservation, and the analytic Jacobian."""

    def test_output_norm_law(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            shape = (1, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
            v = rng.normal(scale=float(rng.uniform(0.01, 10.0)), size=shape)
            out = squash(v)
            r = frobenius_norm(v)
            np.testing.assert_allclose(frobenius_norm(out), -np.expm1(-r), atol=1e-9)
            assert frobenius_norm(out) < 1.0

    def test_direction_preserved(self):
        rng = np.random.default_rng(6)
        v = rng.normal(size=(16, 1, 4, 4))
        out = squash(v)
        cos = np.sum(v * out, axis=(-3, -2, -1)) / (
            frobenius_norm(v) * frobenius_norm(out))
        assert np.all(cos >= 1.0 - 1e-9)

    def test_zero_maps_to_zero(self):
        v = np.zeros((2, 1, 3, 3))
        np.testing.assert_array_equal(squash(v), v)
        np.testing.assert_array_equal(squash_backward(v, np.ones_like(v)), v)

    def test_small_capsules_pass_through_nearly_unchanged(self):
        v = np.full((1, 1, 1, 1), 1e-6)
        np.testing.assert_allclose(squash(v), v, rtol=1e-5)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            v = rng.normal(size=(2, 1, 3, 2)) * float(rng.uniform(0.1, 3.0))
            co = rng.normal(size=v.shape)
            got = squash_backward(v, co)
            want = fd_grad(lambda z: float((squash(z) * co).sum()), v)
            assert rel_err(got, want) < 1e-6

    def test_jacobian_is_symmetric(self):
        rng = np.random.default_rng(8)
        v = rng.normal(size=(1, 2, 2))
        n = v.size
        jac = np.zeros((n, n))
        for i in range(n):
            co = np.zeros(n)
            co[i] = 1.0
            jac[i] = squash_backward(v, co.reshape(v.shape)).ravel()
        np.testing.assert_allclose(jac, jac.T, atol=1e-12)


class TestMarginLoss:
    """Two-sided margin penalty, mean-reduced over the batch."""

    def test_hand_computed_example(self):
        scores = np.array([[0.9, 0.2], [0.3, 0.05]])
        labels = np.array([0, 1])
        # sample 0: present hit (no cost) + absent 0.5*(0.2-0.1)^2
        # sample 1: present (0.5-0.05)^2 + absent 0.5*(0.3-0.1)^2
        want = (0.005 + 0.2025 + 0.02) / 2.0
        np.testing.assert_allclose(margin_loss(scores, labels), want, rtol=1e-12)

    def test_confident_correct_scores_cost_nothing(self):
        scores = np.array([[0.95, 0.02, 0.01], [0.0, 0.9, 0.1]])
        labels = np.array([0, 1])
        assert margin_loss(scores, labels) == 0.0

    def test_cifar_preset_widens_positive_margin(self):
        cfg = MarginLossConfig.cifar()
        assert (cfg.m_pos, cfg.m_neg, cfg.lam) == (0.6, 0.1, 0.5)
        scores = np.array([[0.55]])
        labels = np.array([0])
        assert margin_loss(scores, labels) == 0.0
        np.testing.assert_allclose(margin_loss(scores, labels, cfg), 0.05 ** 2)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(9)
        scores = rng.uniform(0.0, 1.0, size=(5, 10))
        labels = rng.integers(0, 10, size=5)
        got = margin_loss_backward(scores, labels)
        want = fd_grad(lambda s: margin_loss(s, labels), scores)
        assert rel_err(got, want) < 1e-6

    def test_one_hot_rejects_bad_labels(self):
        with pytest.raises(ValueError):
            one_hot(np.array([0, 3]), 3)
        with pytest.raises(ValueError):
            one_hot(np.array([-1]), 3)


class TestClassScores:
    """Capsule norms per class channel and the prediction rule."""

    def test_matches_manual_norms(self):
        rng = np.random.default_rng(10)
        fmap = rng.normal(size=(2, 3, 1, 1, 1, 4, 4))
        got = class_scores(fmap)
        for b in range(2):
            for k in range(3):
                np.testing.assert_allclose(
                    got[b, k], np.linalg.norm(fmap[b, k].ravel()), rtol=1e-13)

    def test_rejects_unreduced_spatial(self):
        with pytest.raises(ValueError):
            class_scores(np.zeros((1, 3, 2, 2, 1, 4, 4)))

    def test_predict_breaks_ties_low(self):
        scores = np.array([[0.5, 0.5, 0.2], [0.1, 0.3, 0.3]])
        np.testing.assert_array_equal(predict(scores), [0, 1])

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(12)
        fmap = rng.normal(size=(2, 3, 1, 1, 1, 2, 2))
        co = rng.normal(size=(2, 3))
        got = class_scores_backward(fmap, co)
        want = fd_grad(lambda z: float((class_scores(z) * co).sum()), fmap)
        assert rel_err(got, want) < 1e-6
