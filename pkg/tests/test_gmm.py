"""Analytic mixture oracle checks.

Closed-form values are verified against independent oracles: trapezoid
quadrature for densities, central finite differences for scores, and
Monte-Carlo sampling for posteriors, diffused moments and the
minimum-MSE noise predictor.
"""

import numpy as np
import pytest

from dusalab import gmm
from dusalab.rng import Rng


def std_normal(dim):
    return gmm.Gaussian(np.zeros(dim), np.eye(dim))


def single(dim):
    return gmm.Mixture((0,), (std_normal(dim),), np.array([1.0]))


def symmetric_pair(dim=1, offset=1.0):
    e = np.zeros(dim)
    e[0] = offset
    comps = (gmm.Gaussian(e, np.eye(dim)), gmm.Gaussian(-e, np.eye(dim)))
    return gmm.Mixture((0, 1), comps, np.array([0.5, 0.5]))


class TestConstruction:
    def test_rejects_asymmetric_covariance(self):
        with pytest.raises(ValueError, match="symmetric"):
            gmm.Gaussian(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_rejects_near_singular_covariance(self):
        with pytest.raises(ValueError, match="eigenvalues"):
            gmm.Gaussian(np.zeros(2), np.diag([1.0, 1e-12]))

    def test_rejects_duplicate_labels(self):
        with pytest.raises(ValueError, match="distinct"):
            gmm.Mixture((0, 0), (std_normal(1), std_normal(1)), np.array([0.5, 0.5]))

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError, match="probability"):
            gmm.Mixture((0, 1), (std_normal(1), std_normal(1)), np.array([0.7, 0.7]))

    def test_unknown_label_errors(self):
        with pytest.raises(ValueError, match="unknown class label"):
            gmm.conditional_score(single(2), 5, np.zeros(2))

    def test_dimension_mismatch_errors(self):
        with pytest.raises(ValueError, match="dimension"):
            gmm.log_density(single(2), np.zeros(3))


class TestLogDensity:
    def test_standard_normal_2d_at_origin(self):
        assert gmm.log_density(single(2), np.zeros(2)) == pytest.approx(
            -np.log(2 * np.pi), abs=1e-12)

    def test_unit_gaussian_1d_at_mean(self):
        assert gmm.log_density(single(1), np.zeros(1)) == pytest.approx(
            -0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_density_integrates_to_one(self):
        rng = Rng(5)
        m = gmm.random_mixture(1, 3, rng)
        grid = np.linspace(-40.0, 40.0, 40_001)[:, None]
        dens = np.exp(gmm.log_density(m, grid))
        assert np.trapezoid(dens, dx=grid[1, 0] - grid[0, 0]) == pytest.approx(1.0, abs=1e-4)


class TestScore:
    def test_single_standard_gaussian(self):
        np.testing.assert_allclose(gmm.score(single(2), np.array([1.0, 0.0])),
                                   [-1.0, 0.0], atol=1e-14)

    def test_symmetric_mixture_vanishes_at_midpoint(self):
        np.testing.assert_allclose(gmm.score(symmetric_pair(), np.zeros(1)),
                                   [0.0], atol=1e-15)

    @pytest.mark.parametrize("dim,k", [(1, 2), (2, 3), (4, 5)])
    def test_matches_finite_difference_of_log_density(self, dim, k):
        rng = Rng(100 + dim)
        m = gmm.random_mixture(dim, k, rng)
        for _ in range(10):
            x, _ = gmm.sample(m, 1, rng)
            x = x[0]
            analytic = gmm.score(m, x)
            h = 1e-6
            numeric = np.zeros(dim)
            for i in range(dim):
                e = np.zeros(dim)
                e[i] = h
                numeric[i] = (gmm.log_density(m, x + e) - gmm.log_density(m, x - e)) / (2 * h)
            denom = max(np.linalg.norm(numeric), 1e-8)
            assert np.linalg.norm(analytic - numeric) / denom <= 1e-6


class TestConditionalScore:
    def test_zero_at_component_mean(self):
        np.testing.assert_array_equal(
            gmm.conditional_score(single(3), 0, np.zeros(3)), np.zeros(3))

    def test_scaled_identity_covariance(self):
        m = gmm.Mixture((0,), (gmm.Gaussian(np.zeros(2), 2.0 * np.eye(2)),),
                        np.array([1.0]))
        np.testing.assert_allclose(
            gmm.conditional_score(m, 0, np.array([2.0, 0.0])), [-1.0, 0.0], atol=1e-14)

    def test_matches_finite_difference_of_component_density(self):
        rng = Rng(42)
        m = gmm.random_mixture(3, 2, rng)
        comp = gmm.Mixture((0,), (m.components[1],), np.array([1.0]))
        x = rng.normal(3)
        analytic = gmm.conditional_score(m, 1, x)
        h = 1e-6
        numeric = np.array([
            (gmm.log_density(comp, x + h * e) - gmm.log_density(comp, x - h * e)) / (2 * h)
            for e in np.eye(3)
        ])
        assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) <= 1e-6


class TestPosterior:
    def test_single_component(self):
        np.testing.assert_array_equal(gmm.posterior(single(2), np.ones(2)), [1.0])

    def test_symmetric_midpoint(self):
        np.testing.assert_allclose(gmm.posterior(symmetric_pair(2, 1.5), np.zeros(2)),
                                   [0.5, 0.5], atol=1e-15)

    def test_sums_to_one_and_nonnegative(self):
        rng = Rng(9)
        m = gmm.random_mixture(4, 6, rng)
        pts = rng.normal((200, 4)) * 6.0
        post = gmm.posterior(m, pts)
        assert np.all(post >= 0)
        np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-12)

    def test_matches_ball_label_frequencies(self):
        # Labels of samples landing in a small ball around x* occur with
        # the analytic posterior frequencies (Monte-Carlo oracle).
        rng = Rng(77)
        m = symmetric_pair(2, 1.5)
        x_star = np.array([0.3, 0.0])
        xs, ys = gmm.sample(m, 1_000_000, rng)
        mask = np.linalg.norm(xs - x_star, axis=1) <= 0.1
        n = int(mask.sum())
        assert n > 1000
        freq = np.array([(ys[mask] == lbl).mean() for lbl in m.labels])
        post = gmm.posterior(m, x_star)
        se = np.sqrt(post * (1 - post) / n)
        assert np.all(np.abs(freq - post) <= 3 * se + 5e-3)


class TestDiffuse:
    def test_identity_at_full_signal(self):
        m = symmetric_pair(2)
        d = gmm.diffuse(m, 1.0)
        for a, b in zip(m.components, d.components):
            np.testing.assert_allclose(a.mean, b.mean)
            np.testing.assert_allclose(a.cov, b.cov)

    def test_unit_covariance_fixed_point(self):
        g = gmm.Gaussian(np.array([2.0, -2.0]), np.eye(2))
        m = gmm.Mixture((0,), (g,), np.array([1.0]))
        d = gmm.diffuse(m, 0.25)
        np.testing.assert_allclose(d.components[0].mean, [1.0, -1.0])
        np.testing.assert_allclose(d.components[0].cov, np.eye(2))

    def test_rejects_out_of_range(self):
        for abar in (0.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                gmm.diffuse(symmetric_pair(), abar)

    def test_moments_match_forward_noised_samples(self):
        rng = Rng(123)
        m = gmm.random_mixture(2, 2, rng)
        abar = 0.6
        g = m.components[0]
        n = 100_000
        x0 = g.mean + rng.normal((n, 2)) @ g.chol.T
        eps = rng.normal((n, 2))
        xt = np.sqrt(abar) * x0 + np.sqrt(1 - abar) * eps
        target = gmm.diffuse(m, abar).components[0]
        se_mean = np.sqrt(np.diag(target.cov) / n)
        np.testing.assert_array_less(np.abs(xt.mean(axis=0) - target.mean), 3 * se_mean)
        emp_cov = np.cov(xt.T)
        c = target.cov
        se_cov = np.sqrt((np.outer(np.diag(c), np.diag(c)) + c ** 2) / n)
        np.testing.assert_array_less(np.abs(emp_cov - c), 3 * se_cov + 1e-12)


class TestExpectedNoise:
    def test_single_standard_gaussian_closed_form(self):
        m = single(2)
        for abar in (0.2, 0.5, 0.9):
            x_t = np.array([1.0, -2.0])
            np.testing.assert_allclose(gmm.expected_noise(m, abar, x_t),
                                       np.sqrt(1 - abar) * x_t, atol=1e-12)

    def test_symmetric_mixture_vanishes_at_origin(self):
        np.testing.assert_allclose(
            gmm.expected_noise(symmetric_pair(2, 1.0), 0.5, np.zeros(2)),
            np.zeros(2), atol=1e-15)

    def test_rejects_degenerate_signal(self):
        with pytest.raises(ValueError):
            gmm.expected_noise(single(1), 1.0, np.zeros(1))

    def test_conditional_equals_scaled_component_score(self):
        rng = Rng(4)
        m = gmm.random_mixture(3, 4, rng)
        abar = 0.7
        x_t = rng.normal(3)
        d = gmm.diffuse(m, abar)
        for lbl in m.labels:
            np.testing.assert_array_equal(
                gmm.expected_noise(m, abar, x_t, label=lbl),
                -np.sqrt(1 - abar) * gmm.conditional_score(d, lbl, x_t))

    def test_regression_of_sampled_noise_on_noisy_points(self):
        # Conditional-mean property: residual eps - eps*(x_t) averages to
        # zero inside every x_t bin (Monte-Carlo oracle, 1e6 samples).
        rng = Rng(31)
        m = symmetric_pair(1, 1.2)
        abar = 0.5
        n = 1_000_000
        x0, _ = gmm.sample(m, n, rng)
        eps = rng.normal((n, 1))
        xt = np.sqrt(abar) * x0 + np.sqrt(1 - abar) * eps
        pred = gmm.expected_noise(m, abar, xt)
        resid = (eps - pred).ravel()
        edges = np.quantile(xt.ravel(), np.linspace(0, 1, 11))
        which = np.clip(np.searchsorted(edges, xt.ravel(), side="right") - 1, 0, 9)
        for b in range(10):
            r = resid[which == b]
            assert abs(r.mean()) <= 3 * r.std(ddof=1) / np.sqrt(r.size)


class TestIdentityVerifiers:
    def test_prop1_trivial_cases(self):
        assert gmm.verify_prop1(single(2), np.array([0.7, -0.3])) == 0.0
        assert gmm.verify_prop1(symmetric_pair(1), np.zeros(1)) == 0.0

    def test_tweedie_single_standard_gaussian(self):
        m = single(2)
        x_t = np.array([0.5, 1.5])
        assert gmm.verify_tweedie(m, 0.3, x_t) <= 1e-14

    def test_tweedie_symmetric_midpoint_off_axis(self):
        m = symmetric_pair(3, 2.0)
        abar = 0.4
        x_t = np.zeros(3)
        d = gmm.diffuse(m, abar)
        rhs = x_t + (1 - abar) * gmm.score(d, x_t)
        np.testing.assert_allclose(rhs[1:], 0.0, atol=1e-15)
        assert gmm.verify_tweedie(m, abar, x_t) <= 1e-12

    def test_randomized_suite_small(self):
        rng = Rng(2024)
        worst_p, worst_t = 0.0, 0.0
        for dim, k in [(1, 2), (2, 3), (4, 5), (8, 10)]:
            for _ in range(5):
                m = gmm.random_mixture(dim, k, rng)
                xs, _ = gmm.sample(m, 10, rng)
                for x in xs:
                    worst_p = max(worst_p, gmm.verify_prop1(m, x))
                abar = float(rng.uniform(0.05, 0.95))
                xts, _ = gmm.sample(gmm.diffuse(m, abar), 10, rng)
                for x_t in xts:
                    worst_t = max(worst_t, gmm.verify_tweedie(m, abar, x_t))
        assert worst_p <= 1e-10
        assert worst_t <= 1e-9


class TestMmseOptimality:
    def test_single_component_trivially_true(self):
        assert gmm.verify_mmse_optimality(single(2), 0.5, np.ones(2), 5, 10_000, Rng(0))

    def test_one_hot_posterior_dominates(self):
        m = symmetric_pair(2, 6.0)
        x_t = gmm.diffuse(m, 0.8).components[0].mean  # deep inside class 0
        assert gmm.posterior(gmm.diffuse(m, 0.8), x_t)[0] > 0.999
        assert gmm.verify_mmse_optimality(m, 0.8, x_t, 25, 20_000, Rng(1))

    def test_random_three_component_mixture(self):
        rng = Rng(6)
        m = gmm.random_mixture(2, 3, rng)
        x_t, _ = gmm.sample(gmm.diffuse(m, 0.5), 1, rng)
        assert gmm.verify_mmse_optimality(m, 0.5, x_t[0], 50, 100_000, rng)

    def test_non_posterior_weights_lose(self):
        # Negative control: a clearly wrong aggregation weight vector must
        # be beaten by the posterior under the same Monte-Carlo estimate.
        rng = Rng(8)
        m = symmetric_pair(2, 3.0)
        abar = 0.7
        x_t = gmm.diffuse(m, abar).components[0].mean
        post = gmm.posterior(gmm.diffuse(m, abar), x_t)
        preds = np.stack([gmm.expected_noise(m, abar, x_t, label=lbl) for lbl in m.labels])
        x0 = gmm._sample_x0_given_xt(m, abar, x_t, 50_000, rng)
        eps = (x_t - np.sqrt(abar) * x0) / np.sqrt(1 - abar)
        mse_post = np.mean(np.sum((eps - post @ preds) ** 2, axis=1))
        wrong = np.array([0.2, 0.8])
        mse_wrong = np.mean(np.sum((eps - wrong @ preds) ** 2, axis=1))
        assert mse_wrong > mse_post


class TestSampling:
    def test_class_frequencies_match_weights(self):
        rng = Rng(55)
        m = gmm.random_mixture(2, 4, rng)
        _, ys = gmm.sample(m, 200_000, rng)
        for lbl, w in zip(m.labels, m.weights):
            freq = (ys == lbl).mean()
            se = np.sqrt(w * (1 - w) / ys.size)
            assert abs(freq - w) <= 3 * se + 1e-12


class TestSerialization:
    def test_round_trip(self, tmp_path):
        rng = Rng(12)
        m = gmm.random_mixture(3, 4, rng)
        path = tmp_path / "mixture.json"
        gmm.save_mixture(m, path)
        back = gmm.load_mixture(path)
        assert back.labels == m.labels
        np.testing.assert_allclose(back.weights, m.weights, atol=1e-15)
        for a, b in zip(m.components, back.components):
            np.testing.assert_allclose(a.mean, b.mean, atol=1e-15)
            np.testing.assert_allclose(a.cov, b.cov, atol=1e-15)
