import mpmath
import numpy as np
import pytest

from qbnn.tensor import (
    DimensionError,
    SeededRng,
    bernoulli_mask,
    gaussian_sample,
    matmul,
    relu,
    softmax_rows,
)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += float(a[i, k]) * float(b[k, j])
    return out


class TestMatmul:
    def test_identity(self, np_rng):
        b = np_rng.standard_normal((2, 2)).astype(np.float32)
        np.testing.assert_array_equal(matmul(np.eye(2, dtype=np.float32), b), b)
        np.testing.assert_array_equal(matmul(b, np.eye(2, dtype=np.float32)), b)

    def test_hand_arithmetic(self):
        assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]

    def test_matches_naive_loops(self, np_rng):
        a = np_rng.standard_normal((5, 7)).astype(np.float32)
        b = np_rng.standard_normal((7, 3)).astype(np.float32)
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-6, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity(self, np_rng):
        a, b, c = (np_rng.standard_normal((10, 10)).astype(np.float32) for _ in range(3))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert np.linalg.norm(left - right) / np.linalg.norm(left) < 1e-4


class TestRelu:
    def test_example(self):
        assert relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]

    def test_all_negative(self):
        assert not relu(-np.arange(1, 6, dtype=np.float32)).any()

    def test_nonnegative_unchanged(self, np_rng):
        t = np.abs(np_rng.standard_normal(20)).astype(np.float32)
        np.testing.assert_array_equal(relu(t), t)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_rows(np.zeros((1, 3))), [[1 / 3] * 3], atol=1e-12)

    def test_no_overflow(self):
        p = softmax_rows(np.array([[1000.0, 0.0]], dtype=np.float32))
        assert np.all(np.isfinite(p))
        assert p[0, 0] == pytest.approx(1.0) and p[0, 1] == pytest.approx(0.0, abs=1e-30)

    def test_against_extended_precision(self, np_rng):
        mpmath.mp.dps = 50
        row = np_rng.standard_normal(7) * 5
        exps = [mpmath.e ** mpmath.mpf(float(v)) for v in row]
        total = mpmath.fsum(exps)
        oracle = np.array([float(e / total) for e in exps])
        got = softmax_rows(row.astype(np.float32)[None, :])[0]
        np.testing.assert_allclose(got, oracle, atol=1e-6)
        assert abs(got.sum() - 1) < 1e-6


class TestRandom:
    def test_mask_p_zero(self):
        assert bernoulli_mask(SeededRng(0), (4, 5), 0.0).all()

    def test_mask_rate(self):
        m = bernoulli_mask(SeededRng(1), (100_000,), 0.5)
        assert set(np.unique(m)) <= {0.0, 1.0}
        assert 0.495 <= 1 - m.mean() <= 0.505

    def test_mask_deterministic(self):
        a = bernoulli_mask(SeededRng(9), (30, 30), 0.3)
        b = bernoulli_mask(SeededRng(9), (30, 30), 0.3)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("p", [1.0, 1.5, -0.1])
    def test_mask_bad_p(self, p):
        with pytest.raises(ValueError):
            bernoulli_mask(SeededRng(0), (2,), p)

    def test_gaussian_moments(self):
        g = gaussian_sample(SeededRng(2), (100_000,)).astype(np.float64)
        assert -0.02 <= g.mean() <= 0.02
        assert 0.98 <= g.var() <= 1.02

    def test_gaussian_deterministic(self):
        a = gaussian_sample(SeededRng(5), (3, 4))
        b = gaussian_sample(SeededRng(5), (3, 4))
        assert a.tobytes() == b.tobytes()

    def test_gaussian_shape(self):
        assert gaussian_sample(SeededRng(0), (2, 3)).size == 6

    def test_child_streams_are_keyed(self):
        root = SeededRng(3)
        a = gaussian_sample(root.child(4), (5,))
        gaussian_sample(root, (100,))  # consuming the parent does not move children
        b = gaussian_sample(root.child(4), (5,))
        c = gaussian_sample(root.child(5), (5,))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
