import numpy as np
import pytest

from mudaloc.errors import ValidationError
from mudaloc.mmd import (
    Kernel,
    build_m0,
    build_mc,
    combine_m,
    kernel_cross,
    median_heuristic_gamma,
    mmd2_linear,
    mmd2_quadratic,
)

TWO_ZEROS = np.array([[0.0], [0.0]])
TWO_ONES = np.array([[1.0], [1.0]])


class TestKernels:
    def test_linear_cross_is_gram(self, rng):
        x = rng.normal(size=(4, 3))
        y = rng.normal(size=(5, 3))
        np.testing.assert_allclose(
            kernel_cross(x, y, Kernel("linear")), x @ y.T, atol=1e-12
        )

    def test_rbf_hand_value(self):
        got = kernel_cross([[0.0, 0.0]], [[3.0, 4.0]], Kernel("rbf", gamma=0.1))
        assert got[0, 0] == pytest.approx(np.exp(-2.5), rel=1e-12)

    def test_median_heuristic_hand_value(self):
        assert median_heuristic_gamma([[0.0]], [[2.0]]) == pytest.approx(0.25)

    def test_median_heuristic_rejects_identical_points(self):
        with pytest.raises(ValidationError):
            median_heuristic_gamma(TWO_ZEROS, TWO_ZEROS)

    def test_bad_kernel_config(self):
        with pytest.raises(ValidationError):
            Kernel("poly")
        with pytest.raises(ValidationError):
            Kernel("rbf", gamma=0.0)


class TestQuadraticEstimator:
    def test_identical_samples_give_exact_zero(self, rng):
        x = rng.normal(size=(10, 4))
        assert mmd2_quadratic(x, x, Kernel("rbf", gamma=0.5)) == 0.0
        assert mmd2_quadratic(x, x, Kernel("linear")) == 0.0

    def test_two_point_hand_values(self):
        assert mmd2_quadratic(TWO_ZEROS, TWO_ONES, Kernel("linear")) == pytest.approx(1.0)
        want = 2.0 - 2.0 * np.exp(-1.0)
        assert mmd2_quadratic(TWO_ZEROS, TWO_ONES, Kernel("rbf", gamma=1.0)) == (
            pytest.approx(want, rel=1e-12)
        )

    def test_unbiased_needs_two_per_side(self):
        with pytest.raises(ValidationError):
            mmd2_quadratic([[0.0]], TWO_ONES, Kernel("linear"), unbiased=True)

    def test_biased_vs_unbiased_converge(self, rng):
        x = rng.normal(size=(400, 2))
        y = rng.normal(size=(400, 2)) + 0.5
        k = Kernel("rbf", gamma=0.5)
        biased = mmd2_quadratic(x, y, k)
        unbiased = mmd2_quadratic(x, y, k, unbiased=True)
        assert biased == pytest.approx(unbiased, abs=0.01)

    def test_detects_mean_shift(self, rng):
        x = rng.normal(size=(200, 3))
        near = rng.normal(size=(200, 3))
        far = rng.normal(size=(200, 3)) + 2.0
        k = Kernel("rbf", gamma=0.25)
        assert mmd2_quadratic(x, far, k) > mmd2_quadratic(x, near, k)


class TestLinearEstimator:
    def test_two_point_hand_values_exact(self):
        assert mmd2_linear(TWO_ZEROS, TWO_ONES, Kernel("linear")) == 1.0
        want = 2.0 - 2.0 * np.exp(-1.0)
        assert mmd2_linear(TWO_ZEROS, TWO_ONES, Kernel("rbf", gamma=1.0)) == (
            pytest.approx(want, rel=1e-15)
        )

    def test_rejects_odd_or_mismatched_n(self, rng):
        x = rng.normal(size=(5, 2))
        with pytest.raises(ValidationError):
            mmd2_linear(x, x)
        with pytest.raises(ValidationError):
            mmd2_linear(rng.normal(size=(4, 2)), rng.normal(size=(6, 2)))

    def test_agrees_with_unbiased_quadratic_in_expectation(self, rng):
        # the linear-time form is unbiased, so its resampling mean must sit
        # within a few standard errors of the (also unbiased) U-statistic
        k = Kernel("rbf", gamma=0.25)
        n = 64
        vals = []
        for _ in range(200):
            x = rng.normal(size=(n, 3))
            y = rng.normal(size=(n, 3)) + 0.3
            vals.append(mmd2_linear(x, y, k))
        vals = np.array(vals)
        x = rng.normal(size=(2000, 3))
        y = rng.normal(size=(2000, 3)) + 0.3
        reference = mmd2_quadratic(x, y, k, unbiased=True)
        se = vals.std(ddof=1) / np.sqrt(vals.size)
        assert abs(vals.mean() - reference) < 3.5 * se + 2e-3

    def test_median_heuristic_default_matches_explicit(self, rng):
        x = rng.normal(size=(8, 2))
        y = rng.normal(size=(8, 2)) + 1.0
        gamma = median_heuristic_gamma(x, y)
        assert mmd2_linear(x, y, Kernel("rbf")) == pytest.approx(
            mmd2_linear(x, y, Kernel("rbf", gamma)), rel=1e-12
        )


class TestCoefficientMatrices:
    def test_m0_entries_and_structure(self):
        m0 = build_m0(2, 3).entries
        assert m0.shape == (5, 5)
        np.testing.assert_allclose(m0[:2, :2], 1 / 4, atol=1e-15)
        np.testing.assert_allclose(m0[2:, 2:], 1 / 9, atol=1e-15)
        np.testing.assert_allclose(m0[:2, 2:], -1 / 6, atol=1e-15)
        np.testing.assert_allclose(m0.sum(axis=1), 0.0, atol=1e-15)
        assert np.linalg.matrix_rank(m0) == 1

    def test_m0_trace_identity(self, rng):
        n_s, n_t, d, p = 7, 5, 4, 3
        feats = rng.normal(size=(n_s + n_t, d))
        a = rng.normal(size=(d, p))
        m0 = build_m0(n_s, n_t).entries
        lhs = np.trace(a.T @ feats.T @ m0 @ feats @ a)
        proj = feats @ a
        diff = proj[:n_s].mean(axis=0) - proj[n_s:].mean(axis=0)
        assert lhs == pytest.approx(float(diff @ diff), rel=1e-12, abs=1e-12)

    def test_mc_trace_identity_per_class(self, rng):
        labels_s = np.array([0, 0, 1, 1, 1, 2])
        labels_t = np.array([1, 0, 2, 2, 0])
        n_s = labels_s.size
        feats = rng.normal(size=(n_s + labels_t.size, 3))
        a = rng.normal(size=(3, 2))
        proj = feats @ a
        for c in (0, 1, 2):
            mc = build_mc(labels_s, labels_t, c).entries
            lhs = np.trace(a.T @ feats.T @ mc @ feats @ a)
            mean_s = proj[:n_s][labels_s == c].mean(axis=0)
            mean_t = proj[n_s:][labels_t == c].mean(axis=0)
            diff = mean_s - mean_t
            assert lhs == pytest.approx(float(diff @ diff), rel=1e-10, abs=1e-12)

    def test_mc_zero_outside_class(self):
        mc = build_mc([0, 1], [1, 0], 1).entries
        # stacked order: s0(c0), s1(c1), t0(c1), t1(c0)
        want = np.zeros((4, 4))
        want[1, 1] = 1.0
        want[2, 2] = 1.0
        want[1, 2] = want[2, 1] = -1.0
        np.testing.assert_allclose(mc, want, atol=1e-15)

    def test_mc_missing_class_rejected(self):
        with pytest.raises(ValidationError):
            build_mc([0, 0], [1, 1], 0)

    def test_combine_is_elementwise_sum(self, rng):
        m0 = build_m0(3, 3)
        mcs = [build_mc([0, 0, 1], [0, 1, 1], c) for c in (0, 1)]
        total = combine_m(m0, mcs).entries
        want = m0.entries + mcs[0].entries + mcs[1].entries
        np.testing.assert_array_equal(total, want)

    def test_combine_rejects_shape_mismatch(self):
        with pytest.raises(ValidationError):
            combine_m(build_m0(2, 2), [build_m0(3, 3)])

    def test_m0_positive_semidefinite(self):
        eigs = np.linalg.eigvalsh(build_m0(4, 6).entries)
        assert eigs.min() >= -1e-12
