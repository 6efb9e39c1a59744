import math

import numpy as np
import pytest

from relaxed_align.align import (
    Model, TrainingDivergedError, VARIANTS, evaluate, get_variant, train, variant_distance_term,
)
from relaxed_align.autodiff import CheckpointError, DenseNetwork, Tensor
from relaxed_align.config_manager import AuditSettings, TrainConfig
from relaxed_align.distributions import Dataset, sample_synthetic, shifted_mixture_spec
from relaxed_align.divergences import critic_objective_dann, gan_critic_objective
from relaxed_align.theory import audit_bound
from relaxed_align.threading_classes import CellTask, run_cells
from relaxed_align.transport import critic_objective_w


def small_config(**overrides) -> TrainConfig:
    settings = dict(steps=60, batch_size=32, encoder_widths=[8, 2], critic_widths=[8], log_interval=20,
                    latent_batch=40)
    settings.update(overrides)
    return TrainConfig(**settings)


@pytest.fixture(scope="module")
def shifted_data():
    return sample_synthetic(shifted_mixture_spec(count=200), seed=0)


def linear_model(weight: float, bias: float) -> Model:
    """phi = identity on 1-d inputs, h = sigmoid(weight * z + bias)"""
    encoder = DenseNetwork([1, 1], "identity", "identity", [Tensor([[1.0]])], [Tensor([0.0])])
    head = DenseNetwork([1, 1], "identity", "sigmoid", [Tensor([[weight]])], [Tensor([bias])])
    return Model(encoder=encoder, head=head, critic=None, variant="Source", beta=0.0)


class TestDistanceTerms:

    def setup_method(self):
        rng = np.random.default_rng(7)
        self.a_t = Tensor(rng.normal(size=(6, 1)))
        self.a_s = Tensor(rng.normal(size=(4, 1)))
        self.sig = lambda t: 1.0 / (1.0 + np.exp(-t.data.ravel()))

    def test_dann_delegates_to_domain_classifier(self):
        term = variant_distance_term("DANN", self.a_t, self.a_s, 0.0)
        expected = critic_objective_dann(self.sig(self.a_t), self.sig(self.a_s))
        assert term.value == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("beta", [0.0, 0.5, 2.0])
    def test_fdann_delegates_to_gan_objective(self, beta):
        term = variant_distance_term("fDANN", self.a_t, self.a_s, beta)
        expected = gan_critic_objective(self.sig(self.a_s), self.sig(self.a_t), beta)
        assert term.value == pytest.approx(expected, rel=1e-12)

    def test_wdann2_delegates_to_critic_objective(self):
        term = variant_distance_term("WDANN2", self.a_t, self.a_s, 1.5)
        expected = critic_objective_w(np.maximum(self.a_t.data, 0).ravel(), np.maximum(self.a_s.data, 0).ravel(), 1.5)
        assert term.value == pytest.approx(expected, rel=1e-12)

    def test_swdann_keeps_half_of_four(self):
        term = variant_distance_term("sWDANN", self.a_t, self.a_s, 1.0)
        assert term.weights.weights.sum() == 2
        kept = np.sort(self.a_s.data.ravel())[-2:]
        assert term.value == pytest.approx(self.a_t.data.mean() - kept.mean(), rel=1e-12)

    def test_sdann_without_relaxation_keeps_all(self):
        term = variant_distance_term("sDANN", self.a_t, self.a_s, 0.0)
        assert term.weights.weights.sum() == 4
        assert term.value == variant_distance_term("DANN", self.a_t, self.a_s, 0.0).value

    def test_source_has_no_distance(self):
        with pytest.raises(ValueError):
            variant_distance_term("Source", self.a_t, self.a_s, 0.0)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            get_variant("ADDA")

    def test_every_named_variant_exists(self):
        assert set(VARIANTS) == {"Source", "DANN", "WDANN", "fDANN", "sDANN", "WDANN1", "WDANN2", "sWDANN"}


class TestEvaluate:

    def setup_method(self):
        xs = np.array([-2.0, -1.0, 1.0, 2.0])
        xt = np.array([-1.5, 0.5, 1.5, 3.0])
        self.data = Dataset.from_domains(xs, np.array([0, 0, 1, 1]), xt, np.array([0, 1, 1, 0]))

    def test_perfect_source_classifier(self):
        result = evaluate(linear_model(100.0, 0.0), self.data)
        assert result.source_error == 0.0
        assert result.target_error == pytest.approx(0.25)

    def test_half_output_predicts_positive(self):
        result = evaluate(linear_model(0.0, 0.0), self.data)
        assert result.source_error == pytest.approx(0.5)
        assert result.target_accuracy == pytest.approx(0.5)

    def test_recount(self, rng):
        model = linear_model(float(rng.normal()), float(rng.normal()))
        x = rng.normal(size=50)
        labels = rng.integers(0, 2, size=50)
        data = Dataset.from_domains(x[:25], labels[:25], x[25:], labels[25:])
        predicted = (model.predict(data.x) >= 0.5).astype(int)
        wrong_target = int(np.sum(predicted[25:] != labels[25:]))
        assert evaluate(model, data).target_error * 25 == pytest.approx(wrong_target)


class TestTraining:

    def test_runs_are_deterministic(self, shifted_data):
        _, first = train(small_config(variant="sDANN", beta=1.0), shifted_data)
        _, second = train(small_config(variant="sDANN", beta=1.0), shifted_data)
        assert first.source_loss == second.source_loss
        assert first.distance == second.distance

    def test_metrics_rows_and_snapshots(self, shifted_data):
        model, metrics = train(small_config(variant="WDANN1", beta=0.5), shifted_data)
        assert len(metrics.step_rows()) == 60
        assert [step for step, _ in metrics.encoder_norms] == [20, 40, 60]
        assert metrics.latent_snapshots[-1][1].shape == (40, 2)
        assert 0.0 <= metrics.target_accuracy <= 1.0
        assert metrics.summary()['steps'] == 60
        assert metrics.latent_ratio_sup is not None

    def test_latent_layer_has_no_dying_activation(self, shifted_data):
        model, _ = train(small_config(variant="Source", steps=5), shifted_data)
        assert model.encoder.hidden_activation == "relu"
        assert model.encoder.output_activation == "identity"
        tanh_model, _ = train(small_config(variant="Source", steps=5, latent_activation="tanh"), shifted_data)
        assert tanh_model.encoder.output_activation == "tanh"

    def test_short_sdann_run_passes_bound_audit(self):
        data = sample_synthetic(shifted_mixture_spec(count=300), seed=3)
        model, _ = train(small_config(variant="sDANN", beta=2.0, steps=200), data)
        audit = audit_bound(model, sample_synthetic(shifted_mixture_spec(count=300), seed=1003),
                            AuditSettings(lipschitz_pairs=500))
        assert audit.consistent
        assert audit.to_dict()['indicative'] is True

    def test_source_has_no_critic(self, shifted_data):
        model, metrics = train(small_config(variant="Source"), shifted_data)
        assert model.critic is None
        assert all(math.isnan(d) for d in metrics.distance)

    def test_sorted_variant_without_relaxation_matches_dann(self, shifted_data):
        config = dict(steps=500, log_interval=500)
        dann, _ = train(small_config(variant="DANN", **config), shifted_data)
        sdann, _ = train(small_config(variant="sDANN", beta=0.0, **config), shifted_data)
        for a, b in zip(dann.encoder.parameters() + dann.head.parameters(),
                        sdann.encoder.parameters() + sdann.head.parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_sorted_wasserstein_without_relaxation_matches_wdann(self, shifted_data):
        config = dict(steps=100, log_interval=100)
        wdann, _ = train(small_config(variant="WDANN", **config), shifted_data)
        swdann, _ = train(small_config(variant="sWDANN", beta=0.0, **config), shifted_data)
        np.testing.assert_array_equal(wdann.encoder.weights[0].data, swdann.encoder.weights[0].data)

    @pytest.mark.parametrize("variant", ["DANN", "WDANN1"])
    def test_zero_lambda_matches_source(self, shifted_data, variant):
        config = dict(steps=500, log_interval=500)
        source, _ = train(small_config(variant="Source", **config), shifted_data)
        beta = 0.0 if variant == "DANN" else 2.0
        other, _ = train(small_config(variant=variant, beta=beta, lam=0.0, **config), shifted_data)
        for a, b in zip(source.encoder.parameters() + source.head.parameters(),
                        other.encoder.parameters() + other.head.parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_nan_inputs_diverge(self):
        xs = np.full((10, 2), np.nan)
        data = Dataset.from_domains(xs, np.array([0, 1] * 5), np.zeros((10, 2)), np.array([0, 1] * 5))
        with pytest.raises(TrainingDivergedError) as info:
            train(small_config(variant="DANN"), data)
        assert info.value.step == 1

    def test_invalid_config_rejected(self, shifted_data):
        with pytest.raises(ValueError):
            train(small_config(variant="DANN", beta=1.0), shifted_data)


class TestCheckpoint:

    def test_model_round_trip(self, tmp_path, shifted_data):
        model, _ = train(small_config(variant="fDANN", beta=2.0, steps=5), shifted_data)
        model.save(tmp_path / "model.json")
        loaded = Model.load(tmp_path / "model.json")
        assert (loaded.variant, loaded.beta) == ("fDANN", 2.0)
        np.testing.assert_array_equal(loaded.predict(shifted_data.x), model.predict(shifted_data.x))

    def test_checkpoint_without_head(self, tmp_path):
        from relaxed_align.autodiff import save_networks
        save_networks(tmp_path / "model.json", {'encoder': DenseNetwork.initialize([2, 2], "relu", "relu",
                                                                                  np.random.default_rng(0))})
        with pytest.raises(CheckpointError):
            Model.load(tmp_path / "model.json")


class TestCellWorkers:

    def test_failures_are_recorded(self):
        spec = shifted_mixture_spec(count=60)
        tasks = [CellTask(config=small_config(variant="Source", steps=3), spec=spec),
                 CellTask(config=small_config(variant="DANN", beta=1.0, steps=3), spec=spec)]
        results = run_cells(tasks, workers=1, show_progress=False)
        assert [r['success'] for r in results] == [True, False]
        assert results[1]['message'].startswith("Failed")

    def test_thread_pool_keeps_task_order(self):
        spec = shifted_mixture_spec(count=60)
        tasks = [CellTask(config=small_config(variant="Source", steps=2, seed=s), spec=spec, keep_metrics=s == 0)
                 for s in range(3)]
        serial = run_cells(tasks, workers=1, show_progress=False)
        pooled = run_cells(tasks, workers=3, show_progress=False)
        assert [r['seed'] for r in pooled] == [0, 1, 2]
        assert [r['target_accuracy'] for r in pooled] == [r['target_accuracy'] for r in serial]
        assert pooled[0]['evaluation'] is not None and pooled[1]['metrics'] is None

    def test_worker_count_from_environment(self, monkeypatch):
        from relaxed_align.config_manager import ConfigError
        from relaxed_align.threading_classes import worker_count
        monkeypatch.setenv("RELAXED_ALIGN_WORKERS", "4")
        assert worker_count() == 4
        monkeypatch.setenv("RELAXED_ALIGN_WORKERS", "many")
        with pytest.raises(ConfigError):
            worker_count()


def _cell_results(shift: bool, cells, seeds=range(5)):
    spec = shifted_mixture_spec(shift=shift, count=1000)
    tasks = [CellTask(config=TrainConfig(variant=v, beta=b, seed=s), spec=spec) for v, b in cells for s in seeds]
    return run_cells(tasks, show_progress=False)


def _table_accuracies(shift: bool, cells, seeds=range(5)):
    table = {}
    for r in _cell_results(shift, cells, seeds):
        table.setdefault((r['variant'], r['beta']), []).append(r['target_accuracy'])
    return table


@pytest.mark.slow
def test_source_only_fits_the_source_on_every_seed():
    for r in _cell_results(True, [("Source", 0.0)]):
        assert r['source_accuracy'] > 0.95, f"seed {r['seed']}"


@pytest.mark.slow
def test_shifted_task_accuracy_table():
    table = _table_accuracies(True, [("Source", 0.0), ("DANN", 0.0), ("sDANN", 2.0), ("sDANN", 4.0),
                                     ("fDANN", 2.0)])
    assert np.mean(table[("Source", 0.0)]) >= 0.85
    assert np.mean(table[("DANN", 0.0)]) <= 0.75
    assert np.mean(table[("sDANN", 2.0)]) >= 0.97
    assert np.mean(table[("sDANN", 4.0)]) >= 0.97
    assert np.mean(table[("fDANN", 2.0)]) >= 0.97


@pytest.mark.slow
def test_no_shift_control():
    cells = [("Source", 0.0), ("DANN", 0.0), ("WDANN", 0.0), ("sDANN", 2.0), ("fDANN", 2.0), ("sWDANN", 2.0),
             ("WDANN1", 2.0), ("WDANN2", 2.0)]
    for accuracies in _table_accuracies(False, cells).values():
        assert np.mean(accuracies) >= 0.97
