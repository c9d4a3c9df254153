import math

import numpy as np
import pytest

from qbnn.metrics import (
    avg_predictive_entropy,
    calibration_bins,
    classification_error,
    classification_report,
    ece,
    labels_from_onehot,
    nll_classification,
    nll_regression,
    regression_report,
    rmse,
)

LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


def random_probs(rng, n, k):
    z = rng.normal(size=(n, k)) * 2
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def loop_ece(probs, labels, bins):
    """Brute-force binning oracle, one sample at a time."""
    members = [[] for _ in range(bins)]
    for p, y in zip(probs, labels):
        c = max(p)
        b = max(1, math.ceil(c * bins)) - 1
        members[min(b, bins - 1)].append((c, int(np.argmax(p)) == y))
    n = len(probs)
    total = 0.0
    for m in members:
        if m:
            acc = sum(ok for _, ok in m) / len(m)
            conf = sum(c for c, _ in m) / len(m)
            total += len(m) / n * abs(acc - conf)
    return total


class TestRegression:
    def test_rmse_examples(self):
        assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(math.sqrt(12.5))

    def test_rmse_oracle(self, np_rng):
        p, t = np_rng.normal(size=50), np_rng.normal(size=50)
        assert rmse(p, t) == pytest.approx(math.sqrt(sum((a - b) ** 2 for a, b in zip(p, t)) / 50), abs=1e-9)

    def test_rmse_errors(self):
        with pytest.raises(ValueError):
            rmse([], [])
        with pytest.raises(ValueError):
            rmse([1.0], [1.0, 2.0])

    def test_nll_zero_residual(self):
        assert nll_regression([2.0], [1.0], [2.0]) == pytest.approx(0.9189385, abs=1e-6)

    def test_nll_log_variance_term(self):
        assert nll_regression([0.0], [math.e**2], [0.0]) == pytest.approx(1 + LOG_SQRT_2PI, abs=1e-12)

    def test_nll_oracle(self, np_rng):
        m, y = np_rng.normal(size=30), np_rng.normal(size=30)
        v = np_rng.uniform(0.1, 3, 30)
        oracle = np.mean([0.5 * math.log(vi) + (yi - mi) ** 2 / (2 * vi) + LOG_SQRT_2PI
                          for mi, vi, yi in zip(m, v, y)])
        assert nll_regression(m, v, y) == pytest.approx(oracle, abs=1e-9)

    def test_nll_variance_floor(self):
        assert math.isfinite(nll_regression([0.0], [0.0], [0.0]))
        assert nll_regression([0.0], [0.0], [0.0]) == nll_regression([0.0], [1e-6], [0.0])

    def test_report(self):
        r = regression_report([0.0], [1.0], [0.0])
        assert dict(r.items()) == {"rmse": 0.0, "nll": pytest.approx(LOG_SQRT_2PI)}


class TestClassification:
    def test_perfect_nll(self):
        assert nll_classification(np.eye(3), np.eye(3)) == 0.0

    def test_uniform_k10(self):
        p = np.full((4, 10), 0.1)
        y = np.eye(10)[[0, 3, 5, 9]]
        assert nll_classification(p, y) == pytest.approx(math.log(10), abs=1e-6)
        assert avg_predictive_entropy(p) == pytest.approx(math.log(10), abs=1e-6)

    def test_nll_oracle(self, np_rng):
        p = random_probs(np_rng, 40, 5)
        lab = np_rng.integers(0, 5, 40)
        oracle = -np.mean([math.log(p[i, lab[i]]) for i in range(40)])
        assert nll_classification(p, np.eye(5)[lab]) == pytest.approx(oracle, abs=1e-9)

    def test_nll_log_floor(self):
        assert nll_classification(np.array([[1.0, 0.0]]), np.array([[0, 1]])) == pytest.approx(-math.log(1e-12))

    def test_malformed_onehot(self):
        with pytest.raises(ValueError):
            nll_classification(np.eye(2), np.array([[1, 1], [0, 1]]))
        with pytest.raises(ValueError):
            labels_from_onehot(np.array([[0.5, 0.5]]))

    def test_entropy_onehot_zero(self):
        assert avg_predictive_entropy(np.eye(4)) == 0.0

    def test_entropy_oracle(self, np_rng):
        p = random_probs(np_rng, 20, 6)
        oracle = -np.mean([sum(v * math.log(v) for v in row) for row in p])
        assert avg_predictive_entropy(p) == pytest.approx(oracle, abs=1e-9)

    def test_entropy_permutation_invariant(self, np_rng):
        p = random_probs(np_rng, 20, 6)
        a = avg_predictive_entropy(p)
        assert avg_predictive_entropy(p[::-1][:, [5, 3, 1, 0, 2, 4]]) == pytest.approx(a, abs=1e-12)

    def test_error_examples(self):
        assert classification_error(np.eye(3), [0, 1, 2]) == 0.0
        assert classification_error(np.eye(3), [1, 2, 0]) == 1.0

    def test_error_tie_goes_to_lowest_index(self):
        assert classification_error(np.array([[0.5, 0.5]]), [0]) == 0.0

    def test_error_oracle(self, np_rng):
        p = random_probs(np_rng, 60, 4)
        lab = np_rng.integers(0, 4, 60)
        assert classification_error(p, lab) == sum(int(np.argmax(r)) != y for r, y in zip(p, lab)) / 60


class TestCalibration:
    def test_confident_and_correct(self):
        assert ece(np.eye(4), [0, 1, 2, 3]) == 0.0

    def test_single_bin(self):
        p = np.tile([0.8, 0.2], (10, 1))
        labels = [0] * 6 + [1] * 4
        assert ece(p, labels) == pytest.approx(0.2, abs=1e-12)

    def test_one_bin_is_global_gap(self, np_rng):
        p = random_probs(np_rng, 50, 3)
        lab = np_rng.integers(0, 3, 50)
        gap = abs(np.mean(p.argmax(axis=1) == lab) - p.max(axis=1).mean())
        assert ece(p, lab, bins=1) == pytest.approx(gap, abs=1e-12)

    def test_bin_edges(self):
        p = np.array([[0.0, 0.0], [0.1, 0.9], [0.2, 0.8], [0.5, 0.5], [0.0, 1.0]])
        cb = calibration_bins(p, [0, 1, 1, 0, 1], bins=10)
        # confidences 0, 0.9, 0.8, 0.5, 1.0 -> bins 1, 9, 8, 5, 10
        assert np.nonzero(cb.counts)[0].tolist() == [0, 4, 7, 8, 9]
        assert cb.n == 5

    def test_hundred_sample_fixture(self):
        rng = np.random.default_rng(7)
        p = random_probs(rng, 100, 10)
        lab = rng.integers(0, 10, 100)
        # half the labels agree with the prediction so several bins are mixed
        lab[::2] = p.argmax(axis=1)[::2]
        assert ece(p, lab) == loop_ece(p, lab, 10)

    def test_pure(self, np_rng):
        p = random_probs(np_rng, 30, 3)
        lab = np_rng.integers(0, 3, 30)
        assert ece(p, lab) == ece(p.copy(), lab.copy())

    def test_bad_bins(self):
        with pytest.raises(ValueError):
            ece(np.eye(2), [0, 1], bins=0)


def test_classification_report_without_labels():
    r = classification_report(np.full((2, 4), 0.25))
    assert [k for k, _ in r.items()] == ["ape"]


def test_classification_report_ranges(np_rng):
    p = random_probs(np_rng, 30, 10)
    r = classification_report(p, np.eye(10)[np_rng.integers(0, 10, 30)])
    assert 0 <= r.ece <= 1 and 0 <= r.ape <= math.log(10) and r.nll >= 0
