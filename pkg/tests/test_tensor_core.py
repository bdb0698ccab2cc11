import numpy as np
import pytest

from capsconv.tensor_core import (
    CapsuleShape,
    FeatureMapShape,
    KernelShape,
    ShapeError,
    capsule_matmul,
    frobenius_norm,
    reshape_capsules,
)


def loop_capsule_matmul(u, w):
    # independent per-g matrix product, written for clarity not speed
    g, m, n = u.shape[-3:]
    p = w.shape[-1]
    lead = u.shape[:-3]
    out = np.zeros(lead + (g, m, p), dtype=np.result_type(u, w))
    for idx in np.ndindex(lead):
        for gi in range(g):
            out[idx + (gi,)] = u[idx + (gi,)] @ w[gi]
    return out


class TestShapes:
    """Constructor validation and size accounting."""

    def test_capsule_size(self):
        assert CapsuleShape(2, 3, 4).size == 24
        assert CapsuleShape(1, 1, 1).size == 1

    def test_rejects_nonpositive(self):
        with pytest.raises(ShapeError):
            CapsuleShape(0, 3, 4)
        with pytest.raises(ShapeError):
            FeatureMapShape(1, 1, 0, 5, CapsuleShape(1, 1, 1))
        with pytest.raises(ShapeError):
            KernelShape(3, 3, 1, 1, 1, -2, 4)

    def test_tuples_round_trip(self):
        fm = FeatureMapShape(2, 3, 5, 7, CapsuleShape(1, 4, 8))
        assert fm.as_tuple() == (2, 3, 5, 7, 1, 4, 8)
        assert fm.size == 2 * 3 * 5 * 7 * 32
        k = KernelShape(3, 3, 2, 4, 1, 8, 4)
        assert k.as_tuple() == (3, 3, 2, 4, 1, 8, 4)
        assert k.size == 9 * 2 * 4 * 32


class TestReshapeCapsules:
    """Capsule reinterpretation is a pure row-major relabeling."""

    def test_preserves_flat_order(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 1, 4, 6))
        y = reshape_capsules(x, CapsuleShape(1, 6, 4))
        assert y.shape == (2, 3, 1, 6, 4)
        np.testing.assert_array_equal(x.ravel(), y.ravel())

    def test_identity(self):
        x = np.arange(24.0).reshape(1, 2, 3, 4)
        y = reshape_capsules(x, CapsuleShape(2, 3, 4))
        assert y is x or np.shares_memory(x, y)

    def test_rejects_size_change(self):
        x = np.zeros((5, 1, 4, 6))
        with pytest.raises(ShapeError):
            reshape_capsules(x, CapsuleShape(1, 5, 5))

    def test_rejects_low_rank(self):
        with pytest.raises(ShapeError):
            reshape_capsules(np.zeros((3, 4)), CapsuleShape(1, 4, 3))


class TestCapsuleMatmul:
    """Stacked (m,n)@(n,p) per g against a nested-loop reference."""

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            g = int(rng.integers(1, 4))
            m = int(rng.integers(1, 6))
            n = int(rng.integers(1, 6))
            p = int(rng.integers(1, 6))
            lead = tuple(rng.integers(1, 4, size=int(rng.integers(0, 3))))
            u = rng.normal(size=lead + (g, m, n))
            w = rng.normal(size=(g, n, p))
            got = capsule_matmul(u, w)
            np.testing.assert_allclose(got, loop_capsule_matmul(u, w), rtol=1e-13)

    def test_g1_is_plain_matmul(self):
        rng = np.random.default_rng(1)
        u = rng.normal(size=(1, 4, 8))
        w = rng.normal(size=(1, 8, 4))
        np.testing.assert_allclose(capsule_matmul(u, w)[0], u[0] @ w[0])

    def test_rejects_mismatch(self):
        with pytest.raises(ShapeError):
            capsule_matmul(np.zeros((1, 4, 8)), np.zeros((1, 4, 8)))
        with pytest.raises(ShapeError):
            capsule_matmul(np.zeros((2, 4, 8)), np.zeros((1, 8, 4)))
        with pytest.raises(ShapeError):
            capsule_matmul(np.zeros((4, 8)), np.zeros((1, 8, 4)))


class TestFrobeniusNorm:
    """Norm over the trailing rank-3 block only."""

    def test_matches_flat_norm(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 2, 3, 5))
        got = frobenius_norm(x)
        want = np.linalg.norm(x.reshape(4, -1), axis=1)
        np.testing.assert_allclose(got, want, rtol=1e-13)
        assert got.shape == (4,)

    def test_keepdims(self):
        x = np.ones((2, 2, 1, 1, 1))
        got = frobenius_norm(x, keepdims=True)
        assert got.shape == (2, 2, 1, 1, 1)
        np.testing.assert_allclose(got, 1.0)

    def test_scalar_capsule_is_abs(self):
        x = np.array([[[-3.0]]])
        np.testing.assert_allclose(frobenius_norm(x), 3.0)

    def test_zero_is_zero(self):
        assert frobenius_norm(np.zeros((1, 2, 2))) == 0.0
