"""
Configuration Manager for relaxed-align
Training, experiment and audit settings loaded from JSON or YAML files
"""
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import yaml

logger = logging.getLogger(__name__)

VARIANT_NAMES = ("Source", "DANN", "WDANN", "fDANN", "sDANN", "WDANN1", "WDANN2", "sWDANN")

# Variants without a relaxation parameter
BETA_FREE_VARIANTS = ("Source", "DANN", "WDANN")

WASSERSTEIN_VARIANTS = ("WDANN", "WDANN1", "WDANN2", "sWDANN")

RELAXED_VARIANTS = ("fDANN", "sDANN", "WDANN1", "WDANN2", "sWDANN")

TABLE_BETAS = (0.5, 2.0, 4.0)


class ConfigError(ValueError):
    """Malformed configuration file, unknown key or invalid value"""


@dataclass
class TrainConfig:
    """Settings for one training run"""
    variant: str = "Source"
    beta: float = 0.0
    lam: float = 1.0
    l2_coeff: float = 0.001
    l2_include_biases: bool = False
    batch_size: int = 128
    critic_steps: Optional[int] = None  # None: 1 for the JS family, 5 for the Wasserstein family
    steps: int = 10000
    seed: int = 0
    penalty_coeff: float = 10.0
    penalty_points: str = "interpolate"
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    hidden_activation: str = "relu"
    latent_activation: str = "identity"  # last encoder layer
    encoder_widths: List[int] = field(default_factory=lambda: [50, 50, 2])
    critic_widths: List[int] = field(default_factory=lambda: [50, 50])
    log_interval: int = 500
    latent_batch: int = 256

    def effective_critic_steps(self) -> int:
        if self.critic_steps is not None:
            return self.critic_steps
        return 5 if self.variant in WASSERSTEIN_VARIANTS else 1

    def validate(self):
        if self.variant not in VARIANT_NAMES:
            raise ConfigError(f"unknown variant '{self.variant}', expected one of {VARIANT_NAMES}")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if self.variant in BETA_FREE_VARIANTS and self.beta != 0:
            raise ConfigError(f"{self.variant} takes no relaxation, got beta={self.beta}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.l2_coeff < 0 or self.penalty_coeff < 0:
            raise ConfigError("regularization coefficients must be non-negative")
        if self.batch_size < 1 or self.steps < 0 or self.log_interval < 1 or self.latent_batch < 1:
            raise ConfigError("batch_size, log_interval and latent_batch must be positive, steps non-negative")
        if self.critic_steps is not None and self.critic_steps < 1:
            raise ConfigError(f"critic_steps must be positive, got {self.critic_steps}")
        if self.penalty_points not in ("interpolate", "data"):
            raise ConfigError(f"penalty_points must be 'interpolate' or 'data', got '{self.penalty_points}'")
        if self.hidden_activation not in ("relu", "tanh"):
            raise ConfigError(f"hidden_activation must be 'relu' or 'tanh', got '{self.hidden_activation}'")
        if self.latent_activation not in ("identity", "tanh", "relu"):
            raise ConfigError(f"latent_activation must be 'identity', 'tanh' or 'relu', "
                              f"got '{self.latent_activation}'")
        if not self.encoder_widths or any(w < 1 for w in self.encoder_widths + self.critic_widths):
            raise ConfigError("layer widths must be positive")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

    @property
    def cell_name(self) -> str:
        if self.variant in BETA_FREE_VARIANTS:
            return self.variant
        return f"{self.variant}-{self.beta:g}"


def accuracy_table_cells() -> List[Tuple[str, float]]:
    cells = [(name, 0.0) for name in BETA_FREE_VARIANTS]
    for name in RELAXED_VARIANTS:
        cells.extend((name, beta) for beta in TABLE_BETAS)
    return cells


@dataclass
class ExperimentConfig:
    """A grid of (variant, beta) cells trained over several seeds"""
    dataset: Union[Dict, str, None] = None  # inline mixture spec, a path to one, or None for the built-in task
    shift: bool = True
    count: int = 1000
    diag_as_std: bool = True  # built-in task: spreads are standard deviations
    cells: List[List] = field(default_factory=lambda: [list(c) for c in accuracy_table_cells()])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "results"
    train: Dict = field(default_factory=dict)
    eval_seed_offset: int = 1000

    def validate(self):
        if not self.cells:
            raise ConfigError("an experiment needs at least one cell")
        if not self.seeds:
            raise ConfigError("an experiment needs at least one seed")
        for cell in self.cells:
            if len(cell) != 2:
                raise ConfigError(f"cells are [variant, beta] pairs, got {cell!r}")
            self.train_config(cell[0], cell[1], self.seeds[0]).validate()
        if self.count < 1:
            raise ConfigError(f"sample count must be positive, got {self.count}")

    def train_config(self, variant: str, beta: float, seed: int) -> TrainConfig:
        config = _build(TrainConfig, self.train, "train")
        config.variant = variant
        config.beta = float(beta)
        config.seed = int(seed)
        return config


@dataclass
class AuditSettings:
    k: int = 10
    beta_grid: List[float] = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(201)])
    delta2_sweep: List[float] = field(default_factory=lambda: [0.0, 0.01, 0.05])
    lipschitz_pairs: int = 2000
    alpha: float = 0.05
    seed: int = 0

    def validate(self):
        if self.k < 1:
            raise ConfigError(f"k must be positive, got {self.k}")
        if not self.beta_grid or any(b < 0 for b in self.beta_grid):
            raise ConfigError("beta_grid must be a non-empty list of non-negative values")
        if not self.delta2_sweep or any(d < 0 or d >= 1 for d in self.delta2_sweep):
            raise ConfigError("delta2_sweep values must lie in [0, 1)")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")


def _build(cls, data: Dict, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"invalid '{section}' section: {e}") from e


SECTIONS = {'train': TrainConfig, 'experiment': ExperimentConfig, 'audit': AuditSettings}


class ConfigManager:
    """Holds the effective train / experiment / audit settings"""

    def __init__(self, config_file: Optional[Path] = None):
        self.config_file = Path(config_file) if config_file else None
        self._train = TrainConfig()
        self._experiment = ExperimentConfig()
        self._audit = AuditSettings()
        if self.config_file:
            self.load(self.config_file)

    def load(self, path: Path) -> "ConfigManager":
        """Read a JSON or YAML file (chosen by suffix) with optional train/experiment/audit sections"""
        path = Path(path)
        try:
            with open(path, 'r') as f:
                if path.suffix.lower() in ('.yaml', '.yml'):
                    data = yaml.safe_load(f) or {}
                else:
                    data = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except (json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from e

        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a mapping at top level")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown sections in {path}: {', '.join(unknown)}")

        if 'train' in data:
            self._train = _build(TrainConfig, data['train'], 'train')
        if 'experiment' in data:
            self._experiment = _build(ExperimentConfig, data['experiment'], 'experiment')
        if 'audit' in data:
            self._audit = _build(AuditSettings, data['audit'], 'audit')
        self.config_file = path
        logger.debug(f"Loaded config from {path}")
        return self

    def apply_overrides(self, section: str = 'train', **kwargs):
        """Override fields of one section; None values are ignored so unset CLI flags pass through"""
        target = {'train': self._train, 'experiment': self._experiment, 'audit': self._audit}.get(section)
        if target is None:
            raise ConfigError(f"unknown section '{section}'")
        for key, value in kwargs.items():
            if value is None:
                continue
            if not hasattr(target, key):
                raise ConfigError(f"unknown key '{key}' for section '{section}'")
            setattr(target, key, value)

    def get_train_config(self) -> TrainConfig:
        return self._train

    def get_experiment(self) -> ExperimentConfig:
        return self._experiment

    def get_audit_settings(self) -> AuditSettings:
        return self._audit

    def to_dict(self) -> Dict:
        return {
            'train': asdict(self._train),
            'experiment': asdict(self._experiment),
            'audit': asdict(self._audit),
        }

    def save(self, path: Path):
        """Write the effective configuration; the format follows the suffix"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            if path.suffix.lower() in ('.yaml', '.yml'):
                yaml.safe_dump(self.to_dict(), f, sort_keys=True)
            else:
                json.dump(self.to_dict(), f, indent=2, sort_keys=True)
