import math

import numpy as np
import pytest

from relaxed_align.config_manager import AuditSettings
from relaxed_align.distributions import Dataset, Domain, sample_synthetic, shifted_mixture_spec
from relaxed_align.theory import (
    LAYOUTS, AnalyticModel, LabelShiftConstruction, audit_bound, estimate_lipschitz, label_shift_lower_bound,
    build_and_check_construction, risk_decomposition,
)

RHO_GRID = [round(0.1 * i, 1) for i in range(1, 10)]


class ThresholdModel:
    """phi = identity, h = 1 where the first latent coordinate exceeds a threshold"""

    def __init__(self, threshold: float = 0.0):
        self.threshold = threshold

    def encode(self, x):
        return np.asarray(x, dtype=float)

    def classify_latent(self, z):
        return (np.asarray(z)[:, 0] > self.threshold).astype(float)

    def predict(self, x):
        return self.classify_latent(self.encode(x))


class CrossLabelModel:
    """Source [0,1] kept in place; target [2,3] folded onto the source with labels swapped"""

    def encode(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        return np.where(x <= 1.0, x, 3.0 - x)[:, None]

    def classify_latent(self, z):
        return (np.asarray(z).reshape(-1) > 0.5).astype(float)

    def predict(self, x):
        return self.classify_latent(self.encode(x))


def cross_label_data(n: int = 400) -> Dataset:
    xs = (np.arange(n) + 0.5) / n
    xt = 2.0 + (np.arange(n) + 0.5) / n
    return Dataset.from_domains(xs, (xs > 0.5).astype(int), xt, (xt > 2.5).astype(int))


class TestLowerBound:

    def test_values(self):
        assert label_shift_lower_bound(0.5, 0.9) == pytest.approx(0.4)
        assert label_shift_lower_bound(0.3, 0.3) == 0.0

    @pytest.mark.parametrize("rho", [-0.1, 1.2])
    def test_out_of_range(self, rho):
        with pytest.raises(ValueError):
            label_shift_lower_bound(rho, 0.5)


class TestConstruction:

    @pytest.mark.parametrize("layout", LAYOUTS)
    def test_grid_exactness(self, layout):
        for rs in RHO_GRID:
            for rt in RHO_GRID:
                construction, report = build_and_check_construction(rs, rt, layout=layout, samples=100000)
                expected = max(rt / rs, (1.0 - rt) / (1.0 - rs))
                assert report.source_error == 0.0
                assert report.target_error == 0.0
                assert abs(report.analytic_ratio_sup - expected) <= 1e-12
                assert report.sampled_relative_error <= 0.02
                assert report.passed

    def test_min_beta_reported(self):
        _, report = build_and_check_construction(0.5, 0.9)
        assert report.min_beta == pytest.approx(0.8)
        assert report.to_dict()['passed'] is True

    def test_layouts_share_latent_distribution(self):
        disjoint = LabelShiftConstruction(0.3, 0.7, "disjoint")
        overlapping = LabelShiftConstruction(0.3, 0.7, "overlapping")
        u = (np.arange(1000) + 0.5) / 1000
        z1 = disjoint.encode(disjoint.inverse_cdf(Domain.TARGET, u)[0])
        z2 = overlapping.encode(overlapping.inverse_cdf(Domain.TARGET, u)[0])
        np.testing.assert_allclose(z1, z2, atol=1e-12)

    def test_sampled_points_have_zero_error(self):
        construction = LabelShiftConstruction(0.2, 0.6)
        data = construction.dataset(500)
        predictions = AnalyticModel(construction).predict(data.x) >= 0.5
        assert np.all(predictions == data.labels)
        assert data.rho_source == pytest.approx(0.2)
        assert data.rho_target == pytest.approx(0.6)

    @pytest.mark.parametrize("args", [(0.0, 0.5), (0.5, 1.0), (0.5, 0.5, "folded")])
    def test_invalid_arguments(self, args):
        with pytest.raises(ValueError):
            LabelShiftConstruction(*args)

    def test_encode_outside_support(self):
        with pytest.raises(ValueError):
            LabelShiftConstruction(0.5, 0.5).encode(np.array([1.5]))


class TestRiskDecomposition:

    def test_true_labels_make_it_an_identity(self):
        data = sample_synthetic(shifted_mixture_spec(count=300), seed=4)
        result = risk_decomposition(ThresholdModel(0.1), data, k=5, use_true_labels=True)
        assert result.total == pytest.approx(result.measured_target_error, abs=1e-12)
        assert result.measured_target_error > 0

    def test_knn_estimates_are_finite(self):
        data = sample_synthetic(shifted_mixture_spec(count=300), seed=4)
        result = risk_decomposition(ThresholdModel(0.0), data, k=10)
        values = result.to_dict()
        assert all(math.isfinite(values[key]) for key in ('source_error', 'label_mismatch',
                                                           'distribution_shift', 'ratio_sup'))
        assert result.shift_upper_bound == pytest.approx((result.ratio_sup - 1.0) * result.source_error)

    @pytest.mark.parametrize("threshold", [-0.2, 0.0, 0.3])
    def test_knn_total_within_tolerance(self, threshold):
        data = sample_synthetic(shifted_mixture_spec(count=300), seed=5)
        result = risk_decomposition(ThresholdModel(threshold), data, k=10)
        assert abs(result.total - result.measured_target_error) <= result.tolerance + 1e-12

    def test_construction_model_terms_vanish(self):
        construction = LabelShiftConstruction(0.5, 0.9, "overlapping")
        result = risk_decomposition(AnalyticModel(construction), construction.dataset(1000), k=10)
        assert result.source_error == 0.0
        assert result.measured_target_error == 0.0
        assert abs(result.label_mismatch) <= 0.02
        assert abs(result.distribution_shift) <= 0.02

    def test_k_too_large(self):
        data = Dataset.from_domains(np.zeros((5, 1)), np.array([0, 1, 0, 1, 0]),
                                    np.ones((5, 1)), np.array([1, 1, 0, 1, 0]))
        with pytest.raises(ValueError):
            risk_decomposition(ThresholdModel(), data, k=10)


class TestBoundAudit:

    def test_construction_model_bound_is_exactly_zero(self):
        construction = LabelShiftConstruction(0.5, 0.9, "overlapping")
        audit = audit_bound(AnalyticModel(construction), construction.dataset(1000),
                            AuditSettings(delta2_sweep=[0.0]))
        assert audit.bound_value == 0.0
        assert audit.delta1 == 0.0
        assert audit.delta2 == 0.0
        assert audit.delta3 == 0.0
        assert audit.measured_target_error == 0.0
        assert audit.consistent

    def test_disjoint_layout_fails_connectivity(self):
        construction = LabelShiftConstruction(0.5, 0.9, "disjoint")
        audit = audit_bound(AnalyticModel(construction), construction.dataset(500))
        assert audit.delta3 == 1.0
        assert audit.consistent

    def test_cross_label_model(self):
        audit = audit_bound(CrossLabelModel(), cross_label_data())
        assert audit.measured_target_error == 1.0
        assert audit.delta3 == 1.0
        assert audit.bound_value >= audit.measured_target_error
        assert audit.consistent

    def test_one_sweep_entry_per_delta2(self):
        data = sample_synthetic(shifted_mixture_spec(count=300), seed=1)
        audit = audit_bound(ThresholdModel(), data, AuditSettings(delta2_sweep=[0.0, 0.05]))
        assert [entry["delta2"] for entry in audit.sweep] == pytest.approx([0.0, 0.05])
        assert audit.delta2 in (0.0, pytest.approx(0.05))

    def test_delta2_maximizes_margin_product(self):
        construction = LabelShiftConstruction(0.5, 0.9, "overlapping")
        audit = audit_bound(AnalyticModel(construction), construction.dataset(1000))
        best = max(entry['margin_product'] for entry in audit.sweep)
        assert audit.margin_product == pytest.approx(best)
        first = next(entry for entry in audit.sweep if entry['margin_product'] == best)
        assert audit.delta2 == pytest.approx(first['delta2'])
        assert audit.margin_product == pytest.approx(audit.delta * (1.0 - audit.delta2))
        assert audit.consistent

    def test_delta1_never_grows_with_beta(self):
        data = sample_synthetic(shifted_mixture_spec(count=300), seed=2)
        audit = audit_bound(ThresholdModel(), data)
        betas = [beta for beta, _ in audit.delta1_curve]
        values = [value for _, value in audit.delta1_curve]
        assert betas == sorted(betas)
        assert all(later <= earlier for earlier, later in zip(values, values[1:]))
        assert values[-1] == 0.0
        assert dict(map(tuple, audit.delta1_curve))[audit.beta] == audit.delta1

    def test_serialization_marks_indicative(self):
        construction = LabelShiftConstruction(0.4, 0.6, "overlapping")
        data = audit_bound(AnalyticModel(construction), construction.dataset(300)).to_dict()
        assert data['indicative'] is True
        assert data['consistent'] is True

    def test_single_class_source_is_not_applicable(self):
        data = Dataset.from_domains(np.linspace(0, 1, 50), np.zeros(50, dtype=int),
                                    np.linspace(0, 1, 50), np.zeros(50, dtype=int))
        audit = audit_bound(ThresholdModel(2.0), data)
        assert not audit.applicable
        assert audit.to_dict()['bound_value'] is None

    def test_lipschitz_of_identity(self, rng):
        x = rng.normal(size=(200, 2))
        assert estimate_lipschitz(ThresholdModel(), x, 500, rng) == pytest.approx(1.0)
