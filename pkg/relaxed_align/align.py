"""
Domain-adversarial representation training
Source cross-entropy + lambda * (variant distance term) + l2 on the encoder
and head weights, optimized by alternating critic / encoder steps.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from relaxed_align.autodiff import (
    AdamState, DenseNetwork, Tensor, adam_step, bce_with_logits, gradient_penalty,
    load_networks, save_networks, CheckpointError,
)
from relaxed_align.config_manager import RELAXED_VARIANTS, TrainConfig
from relaxed_align.distributions import Dataset, Domain
from relaxed_align.divergences import ReweightVector, sort_reweight
from relaxed_align.helpers.knn_estimators import knn_density_ratio

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """A loss or gradient became NaN/Inf"""

    def __init__(self, variant: str, step: int, detail: str):
        super().__init__(f"{variant} diverged at step {step}: {detail}")
        self.variant = variant
        self.step = step


@dataclass(frozen=True)
class VariantSpec:
    name: str
    family: str  # "none", "js" or "wasserstein"
    critic_output: str
    reweights: bool = False
    scales_source: bool = False  # source term multiplied by (1+beta)

    @property
    def adversarial(self) -> bool:
        return self.family != "none"


VARIANTS: Dict[str, VariantSpec] = {
    "Source": VariantSpec("Source", "none", "sigmoid"),
    "DANN": VariantSpec("DANN", "js", "sigmoid"),
    "fDANN": VariantSpec("fDANN", "js", "sigmoid"),
    "sDANN": VariantSpec("sDANN", "js", "sigmoid", reweights=True),
    "WDANN": VariantSpec("WDANN", "wasserstein", "identity"),
    "WDANN1": VariantSpec("WDANN1", "wasserstein", "softplus", scales_source=True),
    "WDANN2": VariantSpec("WDANN2", "wasserstein", "relu", scales_source=True),
    "sWDANN": VariantSpec("sWDANN", "wasserstein", "identity", reweights=True),
}


def get_variant(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"invalid variant '{name}', expected one of {sorted(VARIANTS)}") from None


@dataclass
class DistanceTerm:
    """Critic maximizes critic_objective; the encoder minimizes encoder_objective"""
    critic_objective: Tensor
    encoder_objective: Tensor
    weights: ReweightVector

    @property
    def value(self) -> float:
        return float(self.critic_objective.data)


def _weighted_mean(values: Tensor, weights: np.ndarray) -> Tensor:
    return (values * weights[:, None]).sum() / float(weights.sum())


def variant_distance_term(variant: str, target_logits: Tensor, source_logits: Tensor,
                          beta: float) -> DistanceTerm:
    """Objective pieces from critic pre-activations on a target and a source batch.

    Source averages are weighted; reweighting variants keep the source rows
    ranked highest by the source-side transform, all others weight every row.
    """
    spec = get_variant(variant)
    if not spec.adversarial:
        raise ValueError(f"{variant} has no distance term")
    n_source = source_logits.shape[0]

    if spec.family == "js":
        # g = sigmoid(logit); -log(1 - g) = softplus(logit) ranks the source rows
        score = np.logaddexp(0.0, source_logits.data).ravel()
        weights = sort_reweight(score, beta) if spec.reweights else ReweightVector(np.ones(n_source), beta)
        if spec.name == "fDANN":
            scale = 2.0 + beta
            source_term = -_weighted_mean((-source_logits).softplus(), weights.weights) - math.log(scale)
            target_term = (scale - target_logits.sigmoid()).log().mean() - math.log(scale)
            objective = source_term + target_term
        else:
            objective = -(-target_logits).softplus().mean() - _weighted_mean(source_logits.softplus(), weights.weights)
    else:
        g_target = getattr(target_logits, spec.critic_output)()
        g_source = getattr(source_logits, spec.critic_output)()
        if spec.reweights:
            weights = sort_reweight(g_source.data.ravel(), beta)
        else:
            weights = ReweightVector(np.ones(n_source), beta)
        factor = 1.0 + beta if spec.scales_source else 1.0
        objective = g_target.mean() - factor * _weighted_mean(g_source, weights.weights)

    return DistanceTerm(critic_objective=objective, encoder_objective=objective, weights=weights)


@dataclass(eq=False)
class Model:
    """Encoder phi, head h on the latent and the variant's critic"""
    encoder: DenseNetwork
    head: DenseNetwork
    critic: Optional[DenseNetwork]
    variant: str
    beta: float

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.encoder.predict(x)

    def classify_latent(self, z: np.ndarray) -> np.ndarray:
        return self.head.predict(z).ravel()

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classify_latent(self.encode(x))

    def save(self, path: Path):
        networks = {'encoder': self.encoder, 'head': self.head}
        if self.critic is not None:
            networks['critic'] = self.critic
        save_networks(path, networks, meta={'variant': self.variant, 'beta': self.beta})

    @classmethod
    def load(cls, path: Path) -> "Model":
        networks, meta = load_networks(path)
        if 'encoder' not in networks or 'head' not in networks:
            raise CheckpointError(f"{path} lacks an encoder or head")
        if networks['encoder'].widths[-1] != networks['head'].widths[0]:
            raise CheckpointError(f"{path}: encoder and head widths do not line up")
        return cls(encoder=networks['encoder'], head=networks['head'], critic=networks.get('critic'),
                   variant=str(meta.get('variant', 'Source')), beta=float(meta.get('beta', 0.0)))


@dataclass
class Evaluation:
    source_error: float
    target_error: float
    latents: np.ndarray
    labels: np.ndarray
    domains: np.ndarray

    @property
    def source_accuracy(self) -> float:
        return 1.0 - self.source_error

    @property
    def target_accuracy(self) -> float:
        return 1.0 - self.target_error


@dataclass
class RunMetrics:
    variant: str
    beta: float
    seed: int
    source_loss: List[float] = field(default_factory=list)
    distance: List[float] = field(default_factory=list)
    critic_loss: List[float] = field(default_factory=list)
    encoder_norms: List[Tuple[int, float]] = field(default_factory=list)
    latent_snapshots: List[Tuple[int, np.ndarray]] = field(default_factory=list)
    source_accuracy: Optional[float] = None
    target_accuracy: Optional[float] = None
    latent_ratio_sup: Optional[float] = None

    def step_rows(self) -> List[List]:
        return [[step + 1, loss, dist, critic]
                for step, (loss, dist, critic) in enumerate(zip(self.source_loss, self.distance, self.critic_loss))]

    def summary(self) -> Dict:
        return {
            'variant': self.variant,
            'beta': self.beta,
            'seed': self.seed,
            'steps': len(self.source_loss),
            'source_accuracy': self.source_accuracy,
            'target_accuracy': self.target_accuracy,
            'final_encoder_norm': self.encoder_norms[-1][1] if self.encoder_norms else None,
            'latent_ratio_sup': self.latent_ratio_sup,
        }


def evaluate(model: Model, data: Dataset) -> Evaluation:
    """0-1 error of h(phi(x)) per domain; outputs >= 0.5 predict label 1"""
    latents = model.encode(data.x)
    predictions = (model.classify_latent(latents) >= 0.5).astype(int)
    wrong = predictions != data.labels
    errors = {}
    for domain in Domain:
        mask = data.domains == domain.value
        errors[domain] = float(wrong[mask].mean()) if mask.any() else math.nan
    return Evaluation(source_error=errors[Domain.SOURCE], target_error=errors[Domain.TARGET],
                      latents=latents, labels=data.labels, domains=data.domains)


def encoder_weight_norm(model: Model) -> float:
    return float(math.sqrt(sum(float((w.data ** 2).sum()) for w in model.encoder.weights)))


class _Trainer:
    """Mutable state of one run; only train() constructs it"""

    def __init__(self, config: TrainConfig, data: Dataset):
        self.config = config
        self.spec = get_variant(config.variant)
        self.xs, self.ys = data.source()
        self.xt, _ = data.target()
        if len(self.xs) == 0 or len(self.xt) == 0:
            raise ValueError("training data must contain both source and target samples")

        model_seq, critic_init_seq, data_seq, critic_seq = np.random.SeedSequence(config.seed).spawn(4)
        model_rng = np.random.default_rng(model_seq)
        self.data_rng = np.random.default_rng(data_seq)
        self.critic_rng = np.random.default_rng(critic_seq)

        act = config.hidden_activation
        encoder = DenseNetwork.initialize([self.xs.shape[1]] + list(config.encoder_widths), act,
                                          config.latent_activation, model_rng)
        head = DenseNetwork.initialize([config.encoder_widths[-1], 1], act, "sigmoid", model_rng)
        critic = None
        if self.spec.adversarial:
            critic = DenseNetwork.initialize([config.encoder_widths[-1]] + list(config.critic_widths) + [1],
                                             act, self.spec.critic_output, np.random.default_rng(critic_init_seq))
        self.model = Model(encoder=encoder, head=head, critic=critic, variant=config.variant, beta=config.beta)

        self.encoder_params = encoder.parameters() + head.parameters()
        self.regularized = encoder.weights + head.weights
        if config.l2_include_biases:
            self.regularized = self.regularized + encoder.biases + head.biases
        self.encoder_state = AdamState(lr=config.lr, beta1=config.adam_beta1, beta2=config.adam_beta2)
        self.critic_state = AdamState(lr=config.lr, beta1=config.adam_beta1, beta2=config.adam_beta2)

    def critic_step(self) -> float:
        cfg, critic, encoder = self.config, self.model.critic, self.model.encoder
        idx_s = self.critic_rng.integers(0, len(self.xs), cfg.batch_size)
        idx_t = self.critic_rng.integers(0, len(self.xt), cfg.batch_size)
        z_s = encoder.predict(self.xs[idx_s])
        z_t = encoder.predict(self.xt[idx_t])

        term = variant_distance_term(cfg.variant, critic.logits(z_t), critic.logits(z_s), cfg.beta)
        loss = -term.critic_objective
        if self.spec.family == "wasserstein" and cfg.penalty_coeff > 0:
            if cfg.penalty_points == "interpolate":
                eps = self.critic_rng.uniform(size=(cfg.batch_size, 1))
                points = eps * z_s + (1.0 - eps) * z_t
            else:
                points = np.vstack([z_s, z_t])
            loss = loss + gradient_penalty(critic, points, cfg.penalty_coeff)
        loss.backward()
        adam_step(self.critic_state, critic.parameters())
        return float(loss.data)

    def encoder_step(self) -> Tuple[float, float]:
        cfg, encoder, head = self.config, self.model.encoder, self.model.head
        idx_s = self.data_rng.integers(0, len(self.xs), cfg.batch_size)
        idx_t = self.data_rng.integers(0, len(self.xt), cfg.batch_size)

        z_s = encoder.forward(self.xs[idx_s])
        source_loss = bce_with_logits(head.logits(z_s), self.ys[idx_s])
        loss = source_loss
        distance = math.nan
        if self.spec.adversarial and cfg.lam > 0:
            z_t = encoder.forward(self.xt[idx_t])
            critic = self.model.critic
            term = variant_distance_term(cfg.variant, critic.logits(z_t), critic.logits(z_s), cfg.beta)
            loss = loss + cfg.lam * term.encoder_objective
            distance = term.value
        if cfg.l2_coeff > 0:
            loss = loss + cfg.l2_coeff * sum((w * w).sum() for w in self.regularized)
        loss.backward()
        adam_step(self.encoder_state, self.encoder_params)
        return float(source_loss.data), distance


def _holdout_rows(data: Dataset, rows: int) -> np.ndarray:
    """Evenly spaced rows from each domain, half the budget per domain"""
    picked = []
    for domain, budget in ((Domain.SOURCE, rows // 2), (Domain.TARGET, rows - rows // 2)):
        x, _ = data.domain_view(domain)
        if len(x) and budget:
            picked.append(x[np.unique(np.linspace(0, len(x) - 1, min(budget, len(x))).astype(int))])
    return np.vstack(picked)


def train(config: TrainConfig, data: Dataset, eval_data: Optional[Dataset] = None,
          progress: Optional[Callable[[int, int], None]] = None) -> Tuple[Model, RunMetrics]:
    """Alternating minimax training; deterministic for a fixed config and dataset"""
    config.validate()
    trainer = _Trainer(config, data)
    model, spec = trainer.model, trainer.spec
    metrics = RunMetrics(variant=config.variant, beta=config.beta, seed=config.seed)
    holdout = _holdout_rows(eval_data if eval_data is not None else data, config.latent_batch)
    critic_steps = config.effective_critic_steps()

    logger.info(f"Training {config.cell_name} seed={config.seed} for {config.steps} steps")
    for step in range(1, config.steps + 1):
        try:
            critic_loss = math.nan
            if spec.adversarial:
                for _ in range(critic_steps):
                    critic_loss = trainer.critic_step()
            source_loss, distance = trainer.encoder_step()
        except FloatingPointError as e:
            raise TrainingDivergedError(config.variant, step, str(e)) from e

        metrics.source_loss.append(source_loss)
        metrics.distance.append(distance)
        metrics.critic_loss.append(critic_loss)

        if step % config.log_interval == 0 or step == config.steps:
            norm = encoder_weight_norm(model)
            metrics.encoder_norms.append((step, norm))
            metrics.latent_snapshots.append((step, model.encode(holdout)))
            logger.info(f"{config.cell_name} step {step}: source loss {source_loss:.4f}, "
                        f"distance {distance:.4f}, critic loss {critic_loss:.4f}, encoder norm {norm:.2f}")
        if progress:
            progress(step, config.steps)

    result = evaluate(model, eval_data if eval_data is not None else data)
    metrics.source_accuracy = result.source_accuracy
    metrics.target_accuracy = result.target_accuracy
    if config.variant in RELAXED_VARIANTS:
        metrics.latent_ratio_sup = _latent_ratio_diagnostic(result, config.beta)
    logger.info(f"{config.cell_name} seed={config.seed}: source acc {result.source_accuracy:.3f}, "
                f"target acc {result.target_accuracy:.3f}")
    return model, metrics


def _latent_ratio_diagnostic(result: Evaluation, beta: float) -> Optional[float]:
    z_s = result.latents[result.domains == Domain.SOURCE.value]
    z_t = result.latents[result.domains == Domain.TARGET.value]
    try:
        ratio_sup = float(np.max(knn_density_ratio(z_t, z_s)))
    except ValueError as e:
        logger.debug(f"latent ratio diagnostic skipped: {e}")
        return None
    if ratio_sup > 2.0 * (1.0 + beta):
        logger.warning(f"latent density ratio sup {ratio_sup:.2f} exceeds twice 1+beta={1.0 + beta:g}")
    else:
        logger.info(f"latent density ratio sup {ratio_sup:.2f} (1+beta={1.0 + beta:g})")
    return ratio_sup
