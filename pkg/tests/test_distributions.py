import math

import numpy as np
import pytest

from relaxed_align.distributions import (
    Dataset, DiscreteDistribution, Domain, GaussianMixtureSpec, LabeledSample, align_supports,
    density_ratio_sup, label_counts, make_discrete, sample_synthetic, shifted_mixture_spec, total_variation,
)


class TestDiscreteDistribution:

    def test_duplicate_points_merge(self):
        d = make_discrete([[0.0], [1.0], [0.0]], [1.0, 2.0, 1.0])
        assert len(d) == 2
        np.testing.assert_allclose(d.mass, [0.5, 0.5])

    def test_uniform_weights_by_default(self):
        d = make_discrete([0.0, 1.0, 2.0, 3.0])
        np.testing.assert_allclose(d.mass, 0.25)
        assert d.dim == 1

    @pytest.mark.parametrize("weights", [[1.0, -1.0], [0.0, 0.0], [1.0, math.nan]])
    def test_bad_weights_rejected(self, weights):
        with pytest.raises(ValueError):
            make_discrete([0.0, 1.0], weights)

    def test_empty_point_list_rejected(self):
        with pytest.raises(ValueError):
            make_discrete(np.zeros((0, 2)))

    def test_unnormalized_mass_rejected(self):
        with pytest.raises(ValueError):
            DiscreteDistribution(atoms=np.zeros((2, 1)), mass=np.array([0.5, 0.6]))

    def test_arrays_are_read_only(self):
        d = make_discrete([0.0, 1.0])
        with pytest.raises(ValueError):
            d.mass[0] = 1.0

    def test_support_skips_zero_mass(self):
        d = DiscreteDistribution(atoms=np.array([[0.0], [1.0]]), mass=np.array([1.0, 0.0]))
        np.testing.assert_array_equal(d.support(), [[0.0]])


class TestSupportHelpers:

    def test_align_supports_union(self):
        p = make_discrete([[0.0], [1.0]])
        q = make_discrete([[1.0], [2.0]], [1.0, 3.0])
        atoms, pm, qm = align_supports(p, q)
        np.testing.assert_array_equal(atoms.ravel(), [0.0, 1.0, 2.0])
        np.testing.assert_allclose(pm, [0.5, 0.5, 0.0])
        np.testing.assert_allclose(qm, [0.0, 0.25, 0.75])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            align_supports(make_discrete([[0.0]]), make_discrete([[0.0, 1.0]]))

    def test_ratio_sup(self, two_atom_pair):
        p, q = two_atom_pair
        assert density_ratio_sup(p, q) == pytest.approx(2.0)
        assert density_ratio_sup(q, p) == pytest.approx(1.5)

    def test_ratio_sup_off_support(self):
        assert density_ratio_sup(make_discrete([0.0, 1.0]), make_discrete([0.0])) == math.inf

    def test_total_variation(self, two_atom_pair):
        p, q = two_atom_pair
        assert total_variation(p, q) == pytest.approx(0.25)
        assert total_variation(p, p) == 0.0


class TestDataset:

    def test_from_domains_and_views(self):
        xs = np.array([[0.0, 0.0], [1.0, 1.0]])
        xt = np.array([[2.0, 2.0], [3.0, 3.0], [4.0, 4.0]])
        data = Dataset.from_domains(xs, np.array([0, 1]), xt, np.array([1, 1, 0]))
        assert len(data) == 5
        assert data.rho_source == pytest.approx(0.5)
        assert data.rho_target == pytest.approx(2 / 3)
        x, y = data.target()
        np.testing.assert_array_equal(x, xt)
        np.testing.assert_array_equal(y, [1, 1, 0])

    def test_samples_iterate_in_order(self):
        data = Dataset.from_domains(np.array([[0.5]]), np.array([1]), np.array([[1.5]]), np.array([0]))
        samples = list(data.samples())
        assert samples[0] == LabeledSample(x=(0.5,), label=1, domain=Domain.SOURCE)
        assert samples[1].domain is Domain.TARGET

    def test_non_binary_labels_rejected(self):
        with pytest.raises(ValueError):
            Dataset.from_domains(np.zeros((1, 1)), np.array([2]), np.zeros((1, 1)), np.array([0]))


class TestSyntheticMixture:

    def test_label_counts_floor_class_zero(self):
        assert label_counts(1000, [0.1, 0.9]) == (100, 900)
        assert label_counts(7, [0.5, 0.5]) == (3, 4)

    def test_shifted_task_proportions(self):
        data = sample_synthetic(shifted_mixture_spec(shift=True, count=1000), seed=3)
        assert data.rho_source == pytest.approx(0.5)
        assert data.rho_target == pytest.approx(0.9)
        assert data.x.shape == (2000, 2)

    def test_no_shift_control(self):
        data = sample_synthetic(shifted_mixture_spec(shift=False, count=200), seed=3)
        assert data.rho_target == pytest.approx(0.5)

    def test_same_seed_same_draws(self):
        spec = shifted_mixture_spec(count=300)
        a = sample_synthetic(spec, seed=11)
        b = sample_synthetic(spec, seed=11)
        c = sample_synthetic(spec, seed=12)
        np.testing.assert_array_equal(a.x, b.x)
        assert not np.array_equal(a.x, c.x)

    def test_component_means(self):
        data = sample_synthetic(shifted_mixture_spec(count=4000), seed=0)
        xt, yt = data.target()
        np.testing.assert_allclose(xt[yt == 1].mean(axis=0), [0.3, 1.0], atol=0.05)

    def test_spreads_are_standard_deviations(self):
        source = shifted_mixture_spec().source.components[1]
        assert source.var == pytest.approx([0.01, 0.16])
        data = sample_synthetic(shifted_mixture_spec(count=4000), seed=0)
        xs, ys = data.source()
        np.testing.assert_allclose(xs[ys == 1].std(axis=0), [0.1, 0.4], rtol=0.1)

    def test_spreads_as_variances(self):
        spec = shifted_mixture_spec(diag_as_std=False)
        assert spec.source.components[0].var == pytest.approx([0.1, 0.4])
        assert spec.target.components[0].var == pytest.approx([0.4, 0.1])

    def test_spec_file_round_trip(self, tmp_path):
        spec = shifted_mixture_spec(shift=False, count=50)
        spec.save(tmp_path / "spec.json")
        assert GaussianMixtureSpec.load(tmp_path / "spec.json").to_dict() == spec.to_dict()

    def test_invalid_spec(self):
        data = shifted_mixture_spec().to_dict()
        data['target']['label_proportions'] = [0.3, 0.3]
        with pytest.raises(ValueError, match="sum to 1"):
            GaussianMixtureSpec.from_dict(data)
        with pytest.raises(ValueError, match="malformed"):
            GaussianMixtureSpec.from_dict({'source': {}})
