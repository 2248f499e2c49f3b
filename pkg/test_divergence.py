"""
Tests for the β-divergence and the one-pixel noise model.

Covers the divergence values and gradients, the KL limit, the optimal θ₀
under label noise and the β₁ tuning formula.
"""
import math

import mpmath
import numpy as np
import pytest
from scipy import optimize

from app.core.divergence import (
    beta_divergence,
    beta_divergence_grad_q,
    divergence_terms,
    kl_divergence,
)
from app.core.exceptions import DomainError, InfiniteDivergenceError, RootNotBracketedError
from app.core.noise_model import (
    bernoulli_loss_grid,
    closed_form_kl_theta0,
    expected_loss_surface,
    fit_trivial_model,
    optimal_theta0,
    trivial_model_expected_loss,
    trivial_model_stationarity_residual,
    tune_beta1,
)
from app.schemas.config import BetaParams, NoiseSetting, TrivialModelParams

REFERENCE_NOISE = NoiseSetting(gamma=0.33, r=0.5)


def _random_pairs(rng, n, k):
    p = rng.dirichlet(np.ones(k), size=n)
    q = rng.dirichlet(np.ones(k), size=n)
    return p, q


class TestBetaDivergence:
    def test_identical_distributions_give_zero(self):
        assert beta_divergence([0.3, 0.7], [0.3, 0.7], [0.5, 0.5]) == pytest.approx(0.0, abs=1e-15)

    def test_one_hot_kl_is_negative_log_likelihood(self):
        assert beta_divergence([1.0, 0.0], [0.6, 0.4], [0.0, 0.0]) == pytest.approx(-math.log(0.6), rel=1e-12)
        assert kl_divergence([1.0, 0.0], [0.6, 0.4]) == pytest.approx(0.5108256237659907, rel=1e-12)

    def test_matches_high_precision_evaluation(self):
        mpmath.mp.dps = 50
        p = [mpmath.mpf("0.2"), mpmath.mpf("0.8")]
        q = [mpmath.mpf("0.5"), mpmath.mpf("0.5")]
        b = [mpmath.mpf("0.3"), mpmath.mpf("0.6")]
        expected = -sum(pi / bi * ((qi / pi) ** bi - 1) for pi, qi, bi in zip(p, q, b))
        value = beta_divergence([0.2, 0.8], [0.5, 0.5], [0.3, 0.6])
        assert value == pytest.approx(float(expected), rel=1e-12)

    def test_zero_target_entries_contribute_nothing(self):
        value = beta_divergence([1.0, 0.0], [0.25, 0.75], [0.4, 0.9])
        assert value == pytest.approx(-(1.0 / 0.4) * (0.25 ** 0.4 - 1.0), rel=1e-12)

    def test_scalar_beta_applies_to_every_class(self):
        assert beta_divergence([0.2, 0.3, 0.5], [0.4, 0.4, 0.2], 0.5) == pytest.approx(
            beta_divergence([0.2, 0.3, 0.5], [0.4, 0.4, 0.2], [0.5, 0.5, 0.5])
        )

    def test_rejects_infinite_kl(self):
        with pytest.raises(InfiniteDivergenceError):
            beta_divergence([0.5, 0.5], [1.0, 0.0], [0.0, 0.0])

    def test_zero_q_is_finite_for_positive_beta(self):
        assert beta_divergence([0.5, 0.5], [1.0, 0.0], [0.0, 0.5]) == pytest.approx(
            0.5 * math.log(0.5) + 1.0, rel=1e-12
        )

    @pytest.mark.parametrize(
        "p, q, beta",
        [
            ([0.5, 0.5], [0.2, 0.3, 0.5], 0.0),
            ([0.5, 0.6], [0.5, 0.5], 0.0),
            ([1.0], [1.0], 0.0),
            ([0.5, 0.5], [0.5, 0.5], [0.1, 1.5]),
            ([-0.1, 1.1], [0.5, 0.5], 0.0),
        ],
    )
    def test_rejects_invalid_inputs(self, p, q, beta):
        with pytest.raises(DomainError):
            beta_divergence(p, q, beta)

    def test_converges_linearly_to_kl(self):
        rng = np.random.default_rng(3)
        for k in range(2, 6):
            p, q = _random_pairs(rng, 1, k)
            p, q = p[0], q[0]
            kl = kl_divergence(p, q)
            gaps = {b: abs(beta_divergence(p, q, b) - kl) for b in (1e-3, 1e-4, 1e-5)}
            assert gaps[1e-3] > 0
            assert gaps[1e-4] / gaps[1e-3] == pytest.approx(0.1, rel=0.05)
            assert gaps[1e-5] / gaps[1e-4] == pytest.approx(0.1, rel=0.05)

    def test_non_negative_on_random_inputs(self):
        rng = np.random.default_rng(11)
        p, q = _random_pairs(rng, 10_000, 3)
        b = rng.uniform(0.0, 0.999, size=(10_000, 3))
        values = divergence_terms(p, q, b).sum(axis=-1)
        assert np.all(values >= -1e-12)

    def test_zero_only_for_equal_distributions(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            p, q = _random_pairs(rng, 1, 4)
            b = rng.uniform(0.0, 0.99, size=4)
            assert abs(beta_divergence(p[0], p[0], b)) < 1e-12
            assert beta_divergence(p[0], q[0], b) > 0.0

    def test_false_negative_costs_less_than_false_positive_under_tuned_beta(self):
        beta = [0.0, 0.61]
        for x in np.linspace(0.01, 0.49, 49):
            missed_malign = beta_divergence([0.0, 1.0], [x, 1.0 - x], beta)
            missed_benign = beta_divergence([1.0, 0.0], [1.0 - x, x], beta)
            assert missed_malign < missed_benign


class TestBetaDivergenceGradient:
    def test_one_hot_kl_gradient(self):
        np.testing.assert_allclose(beta_divergence_grad_q([1.0, 0.0], [0.6, 0.4], [0.0, 0.0]), [-1 / 0.6, 0.0])

    def test_equal_distributions_give_minus_one(self):
        np.testing.assert_allclose(beta_divergence_grad_q([0.3, 0.7], [0.3, 0.7], [0.2, 0.9]), [-1.0, -1.0])

    def test_matches_central_differences(self):
        rng = np.random.default_rng(17)
        step = 1e-6
        for _ in range(1000):
            k = int(rng.integers(2, 5))
            p = rng.dirichlet(np.ones(k))
            q = 0.05 + 0.95 * rng.dirichlet(np.ones(k))
            q = q / q.sum()
            b = rng.uniform(0.0, 1.0, size=k)
            analytic = beta_divergence_grad_q(p, q, b)
            for i in range(k):
                up, down = q.copy(), q.copy()
                up[i] += step
                down[i] -= step
                numeric = (divergence_terms(p, up, b).sum() - divergence_terms(p, down, b).sum()) / (2 * step)
                assert abs(analytic[i] - numeric) <= 1e-5 * max(abs(numeric), 1e-3)

    def test_fixed_example_matches_finite_difference(self):
        p, q, b = np.array([0.2, 0.8]), np.array([0.5, 0.5]), np.array([0.3, 0.6])
        grad = beta_divergence_grad_q(p, q, b)
        expected = -(q / p) ** (b - 1.0)
        np.testing.assert_allclose(grad, expected, rtol=1e-12)


class TestTrivialModel:
    def test_kl_optimum_matches_closed_form(self):
        theta = optimal_theta0(REFERENCE_NOISE, BetaParams(beta0=0.0, beta1=0.0))
        assert theta == pytest.approx(0.2481, abs=1e-3)
        assert theta == pytest.approx(closed_form_kl_theta0(REFERENCE_NOISE), abs=1e-9)

    def test_kl_optimum_minimizes_expected_loss(self):
        beta = BetaParams(beta0=0.0, beta1=0.0)

        def loss(t):
            return trivial_model_expected_loss(TrivialModelParams(theta0=t, theta1=0.9), REFERENCE_NOISE, beta)

        result = optimize.minimize_scalar(loss, bounds=(1e-4, 1 - 1e-4), method="bounded", options={"xatol": 1e-9})
        assert result.x == pytest.approx(optimal_theta0(REFERENCE_NOISE, beta), abs=1e-4)

    def test_closed_form_agreement_on_random_settings(self):
        rng = np.random.default_rng(23)
        for _ in range(100):
            noise = NoiseSetting(gamma=float(rng.uniform(0.05, 1.0)), r=float(rng.uniform(0.05, 0.95)))
            theta = optimal_theta0(noise, BetaParams(beta0=0.0, beta1=0.0))
            assert theta == pytest.approx(closed_form_kl_theta0(noise), abs=1e-9)

    def test_noise_free_loss_vanishes_for_perfect_benign_prediction(self):
        noise = NoiseSetting(gamma=0.0, r=0.5)
        beta = BetaParams(beta0=0.0, beta1=0.0)
        loss = trivial_model_expected_loss(TrivialModelParams(theta0=1e-9, theta1=1 - 1e-9), noise, beta)
        assert loss < 1e-8

    def test_small_noise_drives_optimum_towards_zero(self):
        beta = BetaParams(beta0=0.0, beta1=0.0)
        values = [optimal_theta0(NoiseSetting(gamma=g, r=0.5), beta) for g in (0.1, 0.01, 0.001)]
        assert values[0] > values[1] > values[2]
        assert values[2] < 2e-3

    @pytest.mark.parametrize(
        "theta0, noise, beta, tolerance",
        [
            (0.165 / 0.665, REFERENCE_NOISE, (0.0, 0.0), 1e-9),
            (0.5, NoiseSetting(gamma=1.0, r=0.5), (0.0, 0.0), 1e-12),
            (0.05, REFERENCE_NOISE, (0.0, 0.61), 1e-2),
        ],
    )
    def test_stationarity_residual_vanishes(self, theta0, noise, beta, tolerance):
        residual = trivial_model_stationarity_residual(theta0, noise, BetaParams(beta0=beta[0], beta1=beta[1]))
        assert abs(residual) < tolerance

    def test_residual_rejects_boundary(self):
        with pytest.raises(DomainError):
            trivial_model_stationarity_residual(1.0, REFERENCE_NOISE, BetaParams())

    def test_optimum_requires_sign_change(self):
        with pytest.raises(RootNotBracketedError):
            optimal_theta0(NoiseSetting(gamma=0.2, r=0.5), BetaParams(beta0=0.0, beta1=1.0))

    def test_optimum_requires_noise(self):
        with pytest.raises(DomainError):
            optimal_theta0(NoiseSetting(gamma=0.0, r=0.5), BetaParams(beta0=0.0, beta1=0.0))


class TestTuneBeta:
    def test_reference_target(self):
        assert tune_beta1(0.05, 0.0, REFERENCE_NOISE) == pytest.approx(0.6128, abs=5e-3)

    def test_tuned_beta_places_the_optimum(self):
        beta1 = tune_beta1(0.05, 0.0, REFERENCE_NOISE)
        assert optimal_theta0(REFERENCE_NOISE, BetaParams(beta0=0.0, beta1=beta1)) == pytest.approx(0.05, abs=1e-4)

    def test_symmetric_noise_needs_no_reshaping(self):
        assert tune_beta1(0.5, 0.0, NoiseSetting(gamma=1.0, r=0.5)) == pytest.approx(0.0, abs=1e-12)

    def test_matches_independent_root_finding(self):
        noise = NoiseSetting(gamma=0.1, r=0.7)

        def residual(b1):
            return trivial_model_stationarity_residual(0.02, noise, BetaParams(beta0=0.2, beta1=b1))

        expected = optimize.brentq(residual, 0.0, 1.0, xtol=1e-14)
        assert tune_beta1(0.02, 0.2, noise) == pytest.approx(expected, abs=1e-9)

    def test_round_trip_on_random_targets(self):
        rng = np.random.default_rng(29)
        checked = 0
        while checked < 100:
            noise = NoiseSetting(gamma=float(rng.uniform(0.05, 1.0)), r=float(rng.uniform(0.1, 0.9)))
            beta0 = float(rng.uniform(0.0, 0.9))
            target = float(rng.uniform(0.01, 0.5))
            beta1 = tune_beta1(target, beta0, noise)
            if not 0.0 <= beta1 < 1.0:
                continue
            theta = optimal_theta0(noise, BetaParams(beta0=beta0, beta1=beta1))
            assert theta == pytest.approx(target, abs=1e-6)
            checked += 1

    @pytest.mark.parametrize("target, beta0", [(0.0, 0.0), (1.0, 0.0), (0.1, 1.0), (0.1, -0.1)])
    def test_rejects_out_of_domain(self, target, beta0):
        with pytest.raises(DomainError):
            tune_beta1(target, beta0, REFERENCE_NOISE)


class TestLossSurfaces:
    def test_optimal_theta0_decreases_with_beta1(self):
        surface = expected_loss_surface(REFERENCE_NOISE, 0.0, np.linspace(0.01, 0.99, 50), [0.0, 0.2, 0.4, 0.6])
        assert surface.losses.shape == (4, 50)
        assert np.all(np.isfinite(surface.optimal_theta0))
        assert np.all(np.diff(surface.optimal_theta0) < 0)
        assert surface.optimal_theta0[0] == pytest.approx(closed_form_kl_theta0(REFERENCE_NOISE), abs=1e-9)

    def test_surface_marks_missing_optimum(self):
        surface = expected_loss_surface(NoiseSetting(gamma=0.2, r=0.5), 0.0, [0.1, 0.5], [1.0])
        assert np.isnan(surface.optimal_theta0[0])

    def test_bernoulli_grid_is_zero_on_the_diagonal(self):
        grid = np.linspace(0.05, 0.95, 19)
        losses = bernoulli_loss_grid(BetaParams(beta0=0.0, beta1=0.61), grid)
        assert losses.shape == (19, 19)
        np.testing.assert_allclose(np.diag(losses), 0.0, atol=1e-12)
        assert np.all(losses >= -1e-12)


class TestTrivialModelSGD:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_kl_training_reaches_closed_form(self, seed):
        fit = fit_trivial_model(REFERENCE_NOISE, BetaParams(beta0=0.0, beta1=0.0), seed=seed)
        assert fit.tail_mean(0.1)[0] == pytest.approx(0.248, abs=0.03)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_tuned_beta_training_reaches_target(self, seed):
        fit = fit_trivial_model(REFERENCE_NOISE, BetaParams(beta0=0.0, beta1=0.6128), seed=seed)
        assert fit.tail_mean(0.1)[0] == pytest.approx(0.05, abs=0.02)
