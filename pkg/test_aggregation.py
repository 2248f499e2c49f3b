"""
Tests for pixel softmax, top-η aggregation and the patch-level loss.
"""
import math

import mpmath
import numpy as np
import pytest

from app.core.aggregation import (
    aggregate,
    aggregate_backward,
    pixel_softmax,
    slide_class_probs,
    top_k_count,
)
from app.core.exceptions import DomainError, ShapeError
from app.core.objective import patch_loss_and_grad
from app.schemas.config import BetaParams


def _logit_map(malign, benign=None):
    malign = np.asarray(malign, dtype=np.float64)
    benign = np.zeros_like(malign) if benign is None else np.asarray(benign, dtype=np.float64)
    return np.stack([benign, malign], axis=-1)


class TestPixelSoftmax:
    def test_symmetric_logits(self):
        assert pixel_softmax(np.zeros((1, 1, 2)))[0, 0] == 0.5

    def test_closed_form(self):
        assert pixel_softmax(np.array([[[0.0, math.log(3.0)]]]))[0, 0] == pytest.approx(0.75, rel=1e-14)

    def test_matches_high_precision_reference(self):
        mpmath.mp.dps = 40
        logits = np.random.default_rng(0).normal(scale=4.0, size=(8, 8, 2))
        q = pixel_softmax(logits)
        for (i, j), value in np.ndenumerate(q):
            l0, l1 = (mpmath.mpf(float(v)) for v in logits[i, j])
            expected = mpmath.exp(l1) / (mpmath.exp(l0) + mpmath.exp(l1))
            assert abs(value - float(expected)) < 1e-12

    def test_stable_for_extreme_logits(self):
        logits = np.array([[[1e4, -1e4], [-1e4, 1e4], [1e4, 1e4]]])
        q = pixel_softmax(logits)
        assert np.all(np.isfinite(q))
        np.testing.assert_array_equal(q, [[0.0, 1.0, 0.5]])

    def test_rejects_wrong_class_axis(self):
        with pytest.raises(ShapeError):
            pixel_softmax(np.zeros((2, 2, 3)))


class TestAggregate:
    def test_top_half_of_four(self):
        result = aggregate(_logit_map([[1.0, 2.0], [3.0, 4.0]]), 50.0)
        assert result.l1 == 3.5
        assert sorted(result.top_set.tolist()) == [2, 3]
        assert sorted(map(tuple, result.top_coordinates.tolist())) == [(1, 0), (1, 1)]

    def test_eta_100_is_the_mean(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(5, 7, 2))
        result = aggregate(logits, 100.0)
        assert result.l1 == pytest.approx(logits[..., 1].mean(), rel=1e-12)
        assert result.l0 == pytest.approx(logits[..., 0].mean(), rel=1e-12)

    def test_single_pixel_top_set_is_the_max(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(10, 10, 2))
        result = aggregate(logits, 0.4)
        assert len(result.top_set) == 1
        assert result.l1 == logits[..., 1].max()

    @pytest.mark.parametrize("eta, n, k", [(50.0, 4, 2), (0.1, 100, 1), (100.0, 9, 9), (12.5, 4, 1), (25.0, 6, 2)])
    def test_top_k_count(self, eta, n, k):
        assert top_k_count(eta, n) == k

    @pytest.mark.parametrize("eta", [0.0, -5.0, 100.5])
    def test_rejects_invalid_eta(self, eta):
        with pytest.raises(DomainError):
            top_k_count(eta, 16)

    def test_ties_resolved_in_row_major_order(self):
        result = aggregate(_logit_map([[5.0, 5.0], [5.0, 5.0]]), 50.0)
        assert result.top_set.tolist() == [0, 1]

    def test_raising_a_malign_logit_never_lowers_l1(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(6, 6, 2))
        base = aggregate(logits, 30.0).l1
        for idx in range(36):
            bumped = logits.copy()
            bumped.reshape(-1, 2)[idx, 1] += 0.5
            assert aggregate(bumped, 30.0).l1 >= base

    def test_invariant_to_pixel_permutation(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(6, 6, 2))
        permuted = logits.reshape(-1, 2)[rng.permutation(36)].reshape(6, 6, 2)
        a, b = aggregate(logits, 40.0), aggregate(permuted, 40.0)
        assert a.l0 == pytest.approx(b.l0, rel=1e-12)
        assert a.l1 == pytest.approx(b.l1, rel=1e-12)

    def test_shift_leaves_slide_probabilities_unchanged(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(4, 4, 2))
        q = slide_class_probs(aggregate(logits, 50.0))
        q_shifted = slide_class_probs(aggregate(logits + 3.7, 50.0))
        np.testing.assert_allclose(q, q_shifted, rtol=1e-12)


class TestSlideClassProbs:
    def test_equal_logits(self):
        assert slide_class_probs(aggregate(np.zeros((2, 2, 2)), 50.0)) == (0.5, 0.5)

    def test_closed_form(self):
        q0, q1 = slide_class_probs(aggregate(_logit_map([[math.log(9.0)]]), 100.0))
        assert q0 == pytest.approx(0.1, rel=1e-12)
        assert q1 == pytest.approx(0.9, rel=1e-12)

    def test_one_pixel_map_matches_pixel_softmax(self):
        logits = np.array([[[0.3, -1.2]]])
        _, q1 = slide_class_probs(aggregate(logits, 100.0))
        assert q1 == pytest.approx(pixel_softmax(logits)[0, 0], rel=1e-14)


class TestAggregateBackward:
    def test_max_routes_to_argmax(self):
        logits = _logit_map([[0.1, 0.9, 0.3], [0.2, 0.4, 0.5]])
        result = aggregate(logits, 1.0)
        grad = aggregate_backward((0.0, 1.0), result, (2, 3))
        assert grad[..., 1].sum() == 1.0
        assert grad[0, 1, 1] == 1.0
        assert np.count_nonzero(grad[..., 1]) == 1

    def test_mean_gradient_on_benign_channel(self):
        result = aggregate(np.zeros((2, 2, 2)), 50.0)
        grad = aggregate_backward((1.0, 0.0), result, (2, 2))
        np.testing.assert_array_equal(grad[..., 0], np.full((2, 2), 0.25))
        np.testing.assert_array_equal(grad[..., 1], np.zeros((2, 2)))

    def test_gradient_reaches_exactly_the_top_set(self):
        rng = np.random.default_rng(7)
        result = aggregate(rng.normal(size=(8, 8, 2)), 25.0)
        grad = aggregate_backward((0.0, 2.0), result, (8, 8))
        assert np.count_nonzero(grad[..., 1]) == len(result.top_set) == 16

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(6, 6, 2))
        result = aggregate(logits, 50.0)
        grad = aggregate_backward((0.7, -1.3), result, (6, 6))
        step = 1e-6
        for idx in np.ndindex(logits.shape):
            up, down = logits.copy(), logits.copy()
            up[idx] += step
            down[idx] -= step
            a, b = aggregate(up, 50.0), aggregate(down, 50.0)
            numeric = (0.7 * (a.l0 - b.l0) - 1.3 * (a.l1 - b.l1)) / (2 * step)
            assert grad[idx] == pytest.approx(numeric, abs=1e-5)

    def test_rejects_shape_mismatch(self):
        result = aggregate(np.zeros((2, 2, 2)), 50.0)
        with pytest.raises(ShapeError):
            aggregate_backward((1.0, 1.0), result, (3, 3))


class TestPatchLoss:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        logits = rng.normal(scale=0.8, size=(3, 4, 4, 2))
        labels = [0, 1, 1]
        beta = BetaParams(beta0=0.2, beta1=0.7)
        result = patch_loss_and_grad(logits, labels, beta, 50.0)
        step = 1e-6
        for idx in np.ndindex(logits.shape):
            up, down = logits.copy(), logits.copy()
            up[idx] += step
            down[idx] -= step
            numeric = (
                patch_loss_and_grad(up, labels, beta, 50.0).loss - patch_loss_and_grad(down, labels, beta, 50.0).loss
            ) / (2 * step)
            assert result.grad_logits[idx] == pytest.approx(numeric, rel=1e-5, abs=1e-9)

    def test_kl_loss_is_negative_log_likelihood(self):
        logits = np.zeros((2, 2, 2, 2))
        logits[1, ..., 1] = math.log(3.0)
        result = patch_loss_and_grad(logits, [0, 1], (0.0, 0.0), 100.0)
        np.testing.assert_allclose(result.q1, [0.5, 0.75])
        np.testing.assert_allclose(result.per_patch, [math.log(2.0), -math.log(0.75)])
        assert result.loss == pytest.approx((math.log(2.0) - math.log(0.75)) / 2)

    def test_saturated_probabilities_stay_finite(self):
        logits = np.zeros((1, 2, 2, 2))
        logits[..., 0] = 60.0
        result = patch_loss_and_grad(logits, [1], (0.0, 0.0), 50.0)
        assert np.isfinite(result.loss)
        assert result.loss == pytest.approx(-math.log(1e-7), rel=1e-6)
        np.testing.assert_array_equal(result.grad_logits, 0.0)
