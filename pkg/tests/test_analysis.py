#!/usr/bin/env python3
"""
Tests for margins, calibration, Lipschitz constants and risk bounds
"""

import math

import numpy as np
import pytest

from anchorlab.analysis import (
    ece,
    empirical_lipschitz,
    histogram_rows,
    ldam_bayes_threshold,
    ldam_conditional_risk,
    lipschitz_pal,
    lipschitz_unanchored_lower_bounds,
    min_prototype_angle,
    norm_stats,
    reliability_rows,
    risk_bound_ce,
    risk_bound_general,
    sample_margins,
    write_rows,
)
from anchorlab.errors import DomainError, ProbabilityError, RateError, ShapeError, ZeroVectorError
from anchorlab.losses import SOFTMAX, LossSpec
from anchorlab.prototypes import generate_closed_form


class TestMargins:
    """Test cases for sample margins"""

    def test_feature_on_prototype_has_maximal_margin(self, etf10):
        """z = w_y gives margin s (1 + 1/(k-1))"""
        report = sample_margins(etf10.vectors[[2, 7]], np.array([2, 7]), etf10, scale=3.0)
        assert np.allclose(report.per_sample, 3.0 * 10 / 9)
        assert report.min_margin == pytest.approx(3.0 * 10 / 9)

    def test_misclassified_sample_is_negative(self, etf10):
        """A feature on another class's prototype has a negative margin"""
        report = sample_margins(etf10.vectors[[0]], np.array([1]), etf10)
        assert report.min_margin < 0

    def test_empty_class_is_nan(self, etf10):
        """Classes without samples report NaN and serialize as null"""
        report = sample_margins(etf10.vectors[[0]], np.array([0]), etf10)
        assert np.isnan(report.per_class[5])
        assert report.to_dict()["per_class"][5] is None

    def test_shape_mismatch(self, etf10):
        """Features must match the prototype dimension"""
        with pytest.raises(ShapeError):
            sample_margins(np.ones((1, 3)), np.array([0]), etf10)


class TestPrototypeAngle:
    """Test cases for the minimum pairwise angle"""

    def test_simplex_angle(self):
        """Three 2-D simplex prototypes sit 120 degrees apart"""
        assert min_prototype_angle(generate_closed_form(3, 2).vectors) == pytest.approx(120.0)

    def test_zero_vector(self):
        """A zero prototype has no angle"""
        with pytest.raises(ZeroVectorError):
            min_prototype_angle(np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestCalibration:
    """Test cases for expected calibration error"""

    def test_perfectly_calibrated(self):
        """Confident correct predictions give zero ECE"""
        probs = np.array([[1.0, 0.0], [0.0, 1.0]])
        report = ece(probs, np.array([0, 1]))
        assert report.ece == 0.0
        assert report.bins[-1].count == 2

    def test_overconfident(self):
        """Half-wrong predictions at confidence 0.9 give ECE 0.4"""
        probs = np.array([[0.9, 0.1]] * 4)
        report = ece(probs, np.array([0, 0, 1, 1]), bin_count=10)
        assert report.ece == pytest.approx(0.4)
        assert sum(b.count for b in report.bins) == 4

    def test_empty_bins_are_null(self):
        """Bins without samples serialize confidence and accuracy as null"""
        report = ece(np.array([[1.0, 0.0]]), np.array([0]), bin_count=5)
        rows = reliability_rows(report)
        assert len(rows) == 5
        assert rows[0]["accuracy"] is None and rows[0]["count"] == 0

    def test_rejects_non_distributions(self):
        """Rows must sum to one"""
        with pytest.raises(ProbabilityError):
            ece(np.array([[0.5, 0.2]]), np.array([0]))


class TestLipschitz:
    """Test cases for the Lipschitz constants"""

    def test_two_classes_is_twice_tanh(self):
        """k=2 reduces to 2 tanh(B)"""
        for B in (0.1, 1.0, 5.0):
            assert lipschitz_pal(2, B) == pytest.approx(2 * math.tanh(B))

    def test_large_radius_approaches_k(self):
        """lambda tends to k as B grows"""
        assert lipschitz_pal(10, 200.0) == pytest.approx(10.0)

    @pytest.mark.parametrize("k", [3, 10, 64])
    @pytest.mark.parametrize("B", [0.1, 1.0, 10.0])
    def test_unanchored_bounds_are_looser(self, k, B):
        """Both unanchored lower bounds exceed lambda_PAL for k > 2"""
        pal = lipschitz_pal(k, B)
        bounds = lipschitz_unanchored_lower_bounds(k, B)
        assert bounds.normalized_w_only > pal
        assert bounds.normalized_both > pal

    def test_two_class_bounds_coincide(self):
        """At k=2 the normalized-both bound equals lambda_PAL"""
        bounds = lipschitz_unanchored_lower_bounds(2, 1.0)
        assert bounds.normalized_both == pytest.approx(lipschitz_pal(2, 1.0))
        assert bounds.normalized_w_only == 2.0

    def test_domain(self):
        """k >= 2 and B > 0"""
        with pytest.raises(DomainError):
            lipschitz_pal(1, 1.0)
        with pytest.raises(DomainError):
            lipschitz_pal(3, 0.0)

    def test_empirical_two_classes_is_exact(self):
        """Sphere samples in one dimension hit the supremum"""
        estimate = empirical_lipschitz(LossSpec(SOFTMAX, anchored=True), generate_closed_form(2, 1), 1.0, 2000)
        assert estimate == pytest.approx(lipschitz_pal(2, 1.0), rel=1e-9)

    @pytest.mark.parametrize("B", [0.5, 1.0, 2.0])
    def test_empirical_below_the_constant(self, B):
        """Sampled gradient norms stay within [0.5, 1.001] lambda_PAL"""
        protos = generate_closed_form(4, 3)
        estimate = empirical_lipschitz(LossSpec(SOFTMAX, anchored=True), protos, B, 20000, seed=1)
        ratio = estimate / lipschitz_pal(4, B)
        assert 0.5 <= ratio <= 1.001

    def test_empirical_independent_of_threads(self, monkeypatch):
        """Thread count does not change the estimate"""
        protos = generate_closed_form(3, 2)
        spec = LossSpec(SOFTMAX, anchored=True)
        monkeypatch.setenv("ANCHORLAB_THREADS", "1")
        single = empirical_lipschitz(spec, protos, 1.0, 25000, seed=4)
        monkeypatch.setenv("ANCHORLAB_THREADS", "3")
        threaded = empirical_lipschitz(spec, protos, 1.0, 25000, seed=4)
        assert single == threaded

    @pytest.mark.slow
    @pytest.mark.parametrize("B", [0.5, 1.0, 2.0])
    def test_empirical_ten_classes(self, B):
        """10^5 samples at k=10 land within [0.5, 1.001] lambda_PAL"""
        protos = generate_closed_form(10, 9)
        estimate = empirical_lipschitz(LossSpec(SOFTMAX, anchored=True), protos, B, 100000, seed=0)
        ratio = estimate / lipschitz_pal(10, B)
        assert 0.5 <= ratio <= 1.001


class TestRiskBounds:
    """Test cases for noisy-label risk bounds"""

    @pytest.mark.parametrize("k", [2, 3, 10, 64])
    @pytest.mark.parametrize("B", [0.1, 1.0, 10.0])
    def test_ce_bound_matches_general_form(self, k, B):
        """The CE bound is the general bound at lambda_PAL"""
        for eta in (0.0, 0.1, 0.3):
            report = risk_bound_ce(eta, B, k)
            general = risk_bound_general(eta, lipschitz_pal(k, B), B, k)
            assert report.bound == pytest.approx(general, abs=1e-12)
            assert report.variant == "CE+FNPAL"

    def test_zero_noise_and_zero_lipschitz(self):
        """No noise or a constant loss gives a zero bound"""
        assert risk_bound_ce(0.0, 1.0, 10).bound == 0.0
        assert risk_bound_general(0.3, 0.0, 1.0, 10) == 0.0

    def test_bound_grows_with_noise(self):
        """More noise loosens the bound"""
        bounds = [risk_bound_ce(eta, 1.0, 10).bound for eta in (0.1, 0.3, 0.6)]
        assert bounds == sorted(bounds)

    def test_rate_range(self):
        """eta must stay below (k-1)/k"""
        with pytest.raises(RateError):
            risk_bound_general(0.5, 1.0, 1.0, 2)
        with pytest.raises(RateError):
            risk_bound_ce(-0.1, 1.0, 10)


class TestLdam:
    """Test cases for the binary LDAM calibration analysis"""

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 3.0])
    def test_equal_margins_are_calibrated(self, alpha):
        """Equal margins put the threshold at 0.5"""
        assert ldam_bayes_threshold(alpha, alpha, 2.0) == 0.5

    def test_unequal_margins_shift_the_threshold(self):
        """A larger minority margin moves the threshold below 0.5"""
        assert ldam_bayes_threshold(0.0, 1.0, 2.0) < 0.49
        assert ldam_bayes_threshold(1.0, 0.0, 2.0) > 0.51

    def test_optimal_sign_flips_at_threshold(self):
        """Conditional risk prefers +1 above the threshold and -1 below"""
        threshold = ldam_bayes_threshold(0.5, 2.0, 2.0)
        for eta_x, better in ((threshold + 0.01, 1), (threshold - 0.01, -1)):
            risks = {t: ldam_conditional_risk(eta_x, t, 0.5, 2.0, 2.0) for t in (1, -1)}
            assert risks[better] < risks[-better]

    def test_domain(self):
        """r must be positive and t a sign"""
        with pytest.raises(DomainError):
            ldam_bayes_threshold(0.0, 1.0, 0.0)
        with pytest.raises(DomainError):
            ldam_conditional_risk(0.5, 0, 0.0, 0.0, 1.0)


class TestNormStats:
    """Test cases for norm statistics and tidy rows"""

    def test_norms_and_histogram(self, tmp_path, etf10):
        """Unit prototypes and a histogram covering every feature"""
        features = np.array([[3.0, 4.0] + [0.0] * 14, [0.0] * 15 + [1.0]])
        stats = norm_stats(etf10.vectors, features, bins=4)

        assert stats.mean_prototype_norm == pytest.approx(1.0)
        assert stats.mean_feature_norm == pytest.approx(3.0)
        assert stats.histogram_counts.sum() == 2
        assert stats.to_dict()["kind"] == "norm_stats"

        path = write_rows(histogram_rows(stats), tmp_path / "norms.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "bin,lower,upper,count"
        assert len(lines) == 5
