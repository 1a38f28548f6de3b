"""Schedule, forward process, prediction conversions and denoiser training.

Trained-model quality is judged against the analytic minimum-MSE noise
predictor of the generating mixture; schedule values are cross-checked
with an independent log-space cumulative product.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dusalab import gmm
from dusalab.diffusion import (
    Denoiser,
    convert_prediction,
    denoise,
    linear_schedule,
    noisy_sample,
    score_estimate,
    train_denoiser,
    NoiseSchedule,
)
from dusalab.rng import Rng


def sphere_world(K=8, d=8, seed=0):
    """Well-separated unit-covariance mixture used as a training world."""
    rng = Rng(seed)
    comps = []
    for _ in range(K):
        u = rng.normal(d)
        comps.append(gmm.Gaussian(4.0 * u / np.linalg.norm(u), np.eye(d)))
    return gmm.Mixture(tuple(range(K)), tuple(comps), np.ones(K) / K)


@pytest.fixture(scope="module")
def trained_bundle():
    """Denoiser trained on an 8-class, 8-dim mixture, with held-out data."""
    m = sphere_world()
    rng = Rng(1)
    x, y = gmm.sample(m, 8000, rng.child("train"))
    schedule = linear_schedule(1000)
    dn = train_denoiser(x, y, m.n_classes, schedule, rng.child("fit"))
    xh, yh = gmm.sample(m, 2000, rng.child("held"))
    eps = rng.child("eps").normal(xh.shape)
    return m, schedule, dn, xh, yh, eps


class TestLinearSchedule:
    def test_first_step_signal(self):
        s = linear_schedule(1000, 1e-4, 0.02)
        assert s.alpha_bar[0] == pytest.approx(1 - 1e-4, abs=1e-15)

    def test_strictly_decreasing(self):
        s = linear_schedule(500, 5e-4, 0.05)
        assert np.all(np.diff(s.alpha_bar) < 0)

    def test_final_signal_fraction_default(self):
        s = linear_schedule(1000)
        # Independent oracle: exp of the summed log factors.
        oracle = np.exp(np.sum(np.log1p(-np.linspace(1e-4, 0.02, 1000))))
        assert s.alpha_bar[-1] == pytest.approx(oracle, rel=1e-12)
        assert s.alpha_bar[-1] == pytest.approx(4.0e-5, rel=0.02)

    def test_invalid_ranges(self):
        with pytest.raises(ValueError):
            linear_schedule(0)
        with pytest.raises(ValueError):
            linear_schedule(10, 0.02, 1e-4)
        with pytest.raises(ValueError):
            linear_schedule(10, 0.0, 0.5)

    def test_boundary_convention(self):
        s = linear_schedule(10)
        assert s.alpha_bar_at(0) == 1.0
        with pytest.raises(ValueError):
            s.alpha_bar_at(11)


class TestNoisySample:
    def test_identity_at_t_zero(self):
        s = linear_schedule(10)
        x0 = np.array([1.0, -2.0])
        np.testing.assert_array_equal(noisy_sample(x0, 0, np.ones(2), s), x0)

    def test_pure_noise_limit(self):
        s = linear_schedule(1000)
        x0, eps = np.full(3, 5.0), np.ones(3)
        xt = noisy_sample(x0, 1000, eps, s)
        np.testing.assert_allclose(xt, eps, atol=0.05)

    def test_direct_substitution(self):
        s = NoiseSchedule(np.array([0.75]))  # alpha_bar_1 = 0.25 exactly
        xt = noisy_sample(np.array([2.0]), 1, np.array([1.0]), s)
        assert xt[0] == pytest.approx(0.5 * 2 + np.sqrt(0.75), abs=1e-12)

    def test_out_of_range_timestep(self):
        s = linear_schedule(10)
        with pytest.raises(ValueError):
            noisy_sample(np.zeros(2), 11, np.zeros(2), s)


class TestConvertPrediction:
    def test_round_trip_epsilon_x0(self):
        rng = Rng(2)
        eps, xt = rng.normal(4), rng.normal(4)
        x0 = convert_prediction(eps, "epsilon", "x0", xt, 0.3)
        back = convert_prediction(x0, "x0", "epsilon", xt, 0.3)
        np.testing.assert_allclose(back, eps, atol=1e-12)

    def test_zero_noise_prediction(self):
        xt = np.array([2.0, -1.0])
        abar = 0.64
        x0 = convert_prediction(np.zeros(2), "epsilon", "x0", xt, abar)
        v = convert_prediction(np.zeros(2), "epsilon", "v", xt, abar)
        np.testing.assert_allclose(x0, xt / 0.8, atol=1e-12)
        np.testing.assert_allclose(v, -0.6 * xt / 0.8, atol=1e-12)

    def test_velocity_identity_after_chains(self):
        rng = Rng(3)
        for _ in range(20):
            abar = float(rng.uniform(0.05, 0.95))
            x0, eps = rng.normal(3), rng.normal(3)
            xt = np.sqrt(abar) * x0 + np.sqrt(1 - abar) * eps
            v = convert_prediction(eps, "epsilon", "v", xt, abar)
            np.testing.assert_allclose(
                v, np.sqrt(abar) * eps - np.sqrt(1 - abar) * x0, atol=1e-12)
            # Chain through every representation and land back on eps.
            chained = convert_prediction(
                convert_prediction(v, "v", "x0", xt, abar), "x0", "epsilon", xt, abar)
            np.testing.assert_allclose(chained, eps, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(
        abar=st.floats(0.01, 0.99),
        seed=st.integers(0, 2**31 - 1),
        src=st.sampled_from(["epsilon", "x0", "v"]),
        dst=st.sampled_from(["epsilon", "x0", "v"]),
    )
    def test_round_trips_exact(self, abar, seed, src, dst):
        rng = Rng(seed)
        value, xt = rng.normal(3), rng.normal(3)
        out = convert_prediction(value, src, dst, xt, abar)
        back = convert_prediction(out, dst, src, xt, abar)
        np.testing.assert_allclose(back, value, atol=1e-12)

    def test_degenerate_signal_rejected(self):
        with pytest.raises(ValueError):
            convert_prediction(np.zeros(2), "epsilon", "x0", np.zeros(2), 1.0)


class TestDenoiserForward:
    def test_fresh_model_outputs_zero(self):
        dn = Denoiser(4, 3, Rng(0))
        np.testing.assert_array_equal(denoise(dn, np.ones(4), 5.0, 1), np.zeros(4))

    def test_deterministic(self):
        dn = Denoiser(4, 3, Rng(0), hidden=(16,))
        dn.params["W1"] = Rng(9).normal((16, 4))
        x = Rng(1).normal((5, 4))
        np.testing.assert_array_equal(denoise(dn, x, 3.0, 2), denoise(dn, x, 3.0, 2))

    def test_out_of_range_condition(self):
        dn = Denoiser(4, 3, Rng(0))
        with pytest.raises(ValueError):
            denoise(dn, np.ones(4), 1.0, 4)

    def test_null_branch_learns_standard_gaussian(self):
        # With a single standard-normal class, the ideal noise prediction
        # is sqrt(1 - abar) * x_t for every condition including null.
        rng = Rng(5)
        m = gmm.Mixture((0,), (gmm.Gaussian(np.zeros(2), np.eye(2)),), np.array([1.0]))
        x, y = gmm.sample(m, 3000, rng.child("data"))
        s = linear_schedule(1000)
        dn = train_denoiser(x, y, 1, s, rng.child("fit"), epochs=60)
        t = 100
        abar = s.alpha_bar_at(t)
        grid = np.stack(np.meshgrid(np.linspace(-2, 2, 7), np.linspace(-2, 2, 7)),
                        axis=-1).reshape(-1, 2)
        pred = dn.predict(grid, float(t), dn.null_index)
        oracle = np.sqrt(1 - abar) * grid
        keep = np.linalg.norm(oracle, axis=1) > 1e-9
        cos = np.sum(pred[keep] * oracle[keep], axis=1) / (
            np.linalg.norm(pred[keep], axis=1) * np.linalg.norm(oracle[keep], axis=1))
        assert cos.mean() >= 0.95


class TestTrainDenoiser:
    def test_empty_data_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train_denoiser(np.zeros((0, 2)), np.zeros(0, dtype=int), 2,
                           linear_schedule(10), Rng(0))

    def test_initial_loss_matches_dimension(self):
        # Zero-initialized output layer predicts 0, so the denoising loss
        # starts at E||eps||^2 = d.
        rng = Rng(7)
        d = 6
        dn = Denoiser(d, 2, rng)
        eps = rng.normal((20000, d))
        pred = dn.predict(eps * 0.5, 10.0, 0)
        loss = np.mean(np.sum((eps - pred) ** 2, axis=1))
        assert loss == pytest.approx(d, abs=3 * np.sqrt(2 * d / 20000) * np.sqrt(d))

    def test_no_null_dropout_leaves_null_row_untouched(self):
        rng = Rng(11)
        m = sphere_world(K=3, d=3, seed=2)
        x, y = gmm.sample(m, 600, rng.child("data"))
        s = linear_schedule(100)
        fit_rng = rng.child("fit")
        reference = Denoiser(3, 3, fit_rng.child("init"))
        initial_null_row = reference.params["class_embed"][3].copy()
        dn = train_denoiser(x, y, 3, s, fit_rng, p_null=0.0, epochs=5)
        np.testing.assert_array_equal(dn.params["class_embed"][3], initial_null_row)

    def test_trained_conditional_predictions_match_oracle(self, trained_bundle):
        m, s, dn, xh, yh, eps = trained_bundle
        t = 100
        abar = s.alpha_bar_at(t)
        xt = noisy_sample(xh, t, eps, s)
        cosines = []
        for lbl in m.labels:
            mask = yh == lbl
            pred = dn.predict(xt[mask], float(t), lbl)
            oracle = gmm.expected_noise(m, abar, xt[mask], label=lbl)
            cos = np.sum(pred * oracle, axis=1) / (
                np.linalg.norm(pred, axis=1) * np.linalg.norm(oracle, axis=1) + 1e-12)
            cosines.append(cos.mean())
        assert np.mean(cosines) >= 0.9

    def test_residual_mean_is_unbiased(self, trained_bundle):
        m, s, dn, *_ = trained_bundle
        rng = Rng(13)
        x, y = gmm.sample(m, 10_000, rng.child("fresh"))
        t = rng.child("t").integers(1, s.T + 1, 10_000)
        eps = rng.child("e").normal(x.shape)
        xt = noisy_sample(x, t, eps, s)
        pred = dn.predict(xt, t.astype(np.float64), y)
        assert np.linalg.norm((eps - pred).mean(axis=0)) <= 0.1 * np.sqrt(m.dim)

    def test_loss_history_improves_in_windows(self, trained_bundle):
        # Advisory sanity: smoothed (10-epoch window) loss does not rise
        # from the first window to the last on a stationary source.
        hist = trained_bundle[2].loss_history
        windows = [np.mean(hist[i:i + 10]) for i in range(0, len(hist) - 9, 10)]
        assert windows[-1] <= windows[0]
        assert np.all(np.diff(windows) <= 0.05 * windows[0])


class TestScoreEstimate:
    def test_zero_denoiser_gives_zero_score(self):
        dn = Denoiser(3, 2, Rng(0))
        s = linear_schedule(50)
        np.testing.assert_array_equal(
            score_estimate(dn, np.ones(3), 10, 0, s), np.zeros(3))

    def test_linear_in_denoiser_output(self):
        rng = Rng(21)
        dn = Denoiser(3, 2, rng, hidden=(8,))
        dn.params["W1"] = rng.normal((8, 3))
        dn.params["b1"] = rng.normal(3)
        s = linear_schedule(50)
        x = rng.normal(3)
        base = score_estimate(dn, x, 7, 1, s)
        dn.params["W1"] *= 2.0
        dn.params["b1"] *= 2.0
        np.testing.assert_allclose(score_estimate(dn, x, 7, 1, s), 2.0 * base, atol=1e-12)

    def test_identity_boundary_rejected(self):
        dn = Denoiser(2, 2, Rng(0))
        with pytest.raises(ValueError):
            score_estimate(dn, np.ones(2), 0, 0, linear_schedule(10))

    def test_trained_estimate_tracks_analytic_score(self, trained_bundle):
        m, s, dn, xh, yh, eps = trained_bundle
        t = 100
        abar = s.alpha_bar_at(t)
        xt = noisy_sample(xh, t, eps, s)
        diffused = gmm.diffuse(m, abar)
        rels = []
        for lbl in m.labels:
            mask = yh == lbl
            est = score_estimate(dn, xt[mask], t, lbl, s)
            oracle = gmm.conditional_score(diffused, lbl, xt[mask])
            rels.append(np.linalg.norm(est - oracle, axis=1)
                        / (np.linalg.norm(oracle, axis=1) + 1e-12))
        assert np.median(np.concatenate(rels)) <= 0.2
