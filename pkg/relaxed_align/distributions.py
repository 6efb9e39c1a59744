"""
Discrete distributions and synthetic datasets
Finite-support probability vectors, labeled samples and the mixture-of-Gaussians generator
"""
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

MASS_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Finite-support distribution over points in R^d"""
    atoms: np.ndarray  # (n, d), pairwise distinct
    mass: np.ndarray  # (n,), non-negative, sums to 1

    def __post_init__(self):
        if self.atoms.ndim != 2 or self.atoms.shape[0] != self.mass.shape[0]:
            raise ValueError(f"atoms {self.atoms.shape} and mass {self.mass.shape} do not line up")
        if np.any(self.mass < 0):
            raise ValueError("masses must be non-negative")
        if abs(float(self.mass.sum()) - 1.0) > MASS_TOLERANCE:
            raise ValueError(f"masses sum to {self.mass.sum()!r}, expected 1")
        self.atoms.setflags(write=False)
        self.mass.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def __len__(self) -> int:
        return self.atoms.shape[0]

    def support(self) -> np.ndarray:
        """Atoms carrying positive mass"""
        return self.atoms[self.mass > 0]


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def make_discrete(points, weights: Optional[Sequence[float]] = None) -> DiscreteDistribution:
    """Build a normalized distribution, merging duplicate points"""
    pts = _as_points(points)
    if pts.shape[0] == 0:
        raise ValueError("cannot build a distribution from an empty point list")

    if weights is None:
        w = np.ones(pts.shape[0])
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (pts.shape[0],):
            raise ValueError(f"expected {pts.shape[0]} weights, got {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")

    total = w.sum()
    if total <= 0:
        raise ValueError("weights sum to zero")

    atoms, inverse = np.unique(pts, axis=0, return_inverse=True)
    mass = np.bincount(inverse.reshape(-1), weights=w, minlength=atoms.shape[0]) / total
    # Renormalize once more so the sum is 1 to the last ulp
    mass = mass / mass.sum()
    return DiscreteDistribution(atoms=atoms, mass=mass)


def align_supports(p: DiscreteDistribution, q: DiscreteDistribution) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (union atoms, p mass, q mass) on the union support, matched by exact coordinates"""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    stacked = np.vstack([p.atoms, q.atoms])
    atoms, inverse = np.unique(stacked, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    pm = np.zeros(atoms.shape[0])
    qm = np.zeros(atoms.shape[0])
    np.add.at(pm, inverse[:len(p)], p.mass)
    np.add.at(qm, inverse[len(p):], q.mass)
    return atoms, pm, qm


def density_ratio_sup(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """sup_z p(z)/q(z) over the union support; +inf when p has mass outside supp(q)"""
    _, pm, qm = align_supports(p, q)
    if np.any((pm > 0) & (qm == 0)):
        return math.inf
    covered = qm > 0
    return float(np.max(pm[covered] / qm[covered]))


def total_variation(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    _, pm, qm = align_supports(p, q)
    return 0.5 * float(np.abs(pm - qm).sum())


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class LabeledSample:
    x: Tuple[float, ...]
    label: int
    domain: Domain

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled samples of both domains stored column-wise"""
    x: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) in {0, 1}
    domains: np.ndarray  # (n,) of Domain values
    rho_source: float = field(init=False)
    rho_target: float = field(init=False)

    def __post_init__(self):
        if not (self.x.shape[0] == self.labels.shape[0] == self.domains.shape[0]):
            raise ValueError("x, labels and domains must have the same length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be binary")
        object.__setattr__(self, "rho_source", self._positive_fraction(Domain.SOURCE))
        object.__setattr__(self, "rho_target", self._positive_fraction(Domain.TARGET))

    def _positive_fraction(self, domain: Domain) -> float:
        mask = self.domains == domain.value
        if not mask.any():
            return 0.0
        return float(self.labels[mask].sum()) / float(mask.sum())

    @classmethod
    def from_domains(cls, xs: np.ndarray, ys: np.ndarray, xt: np.ndarray, yt: np.ndarray) -> "Dataset":
        xs, xt = _as_points(xs), _as_points(xt)
        domains = np.array([Domain.SOURCE.value] * len(xs) + [Domain.TARGET.value] * len(xt))
        return cls(x=np.vstack([xs, xt]),
                   labels=np.concatenate([ys, yt]).astype(int),
                   domains=domains)

    def domain_view(self, domain: Domain) -> Tuple[np.ndarray, np.ndarray]:
        mask = self.domains == domain.value
        return self.x[mask], self.labels[mask]

    def source(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.domain_view(Domain.SOURCE)

    def target(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.domain_view(Domain.TARGET)

    def samples(self) -> Iterator[LabeledSample]:
        for x, label, domain in zip(self.x, self.labels, self.domains):
            yield LabeledSample(x=tuple(float(v) for v in x), label=int(label), domain=Domain(domain))

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class GaussianComponent:
    mean: List[float]
    var: List[float]  # diagonal covariance entries


@dataclass
class DomainMixture:
    count: int
    label_proportions: List[float]  # [class 0, class 1]
    components: List[GaussianComponent]  # one per label


@dataclass
class GaussianMixtureSpec:
    """Two domains, one Gaussian per (domain, label)"""
    source: DomainMixture
    target: DomainMixture

    def validate(self):
        for name, mix in (("source", self.source), ("target", self.target)):
            if mix.count <= 0:
                raise ValueError(f"{name}: sample count must be positive")
            if len(mix.label_proportions) != 2 or len(mix.components) != 2:
                raise ValueError(f"{name}: expected two labels")
            if any(p < 0 or p > 1 for p in mix.label_proportions):
                raise ValueError(f"{name}: proportions must lie in [0, 1]")
            if abs(sum(mix.label_proportions) - 1.0) > 1e-9:
                raise ValueError(f"{name}: proportions must sum to 1")
            for comp in mix.components:
                if len(comp.mean) != len(comp.var):
                    raise ValueError(f"{name}: mean and variance lengths differ")
                if any(v <= 0 for v in comp.var):
                    raise ValueError(f"{name}: covariance entries must be positive")

    def to_dict(self) -> Dict:
        def mix_dict(mix: DomainMixture) -> Dict:
            return {
                'count': mix.count,
                'label_proportions': list(mix.label_proportions),
                'components': [{'mean': list(c.mean), 'var': list(c.var)} for c in mix.components],
            }
        return {'source': mix_dict(self.source), 'target': mix_dict(self.target)}

    @classmethod
    def from_dict(cls, data: Dict) -> "GaussianMixtureSpec":
        def mix_from(d: Dict) -> DomainMixture:
            return DomainMixture(
                count=int(d['count']),
                label_proportions=[float(v) for v in d['label_proportions']],
                components=[GaussianComponent(mean=list(c['mean']), var=list(c['var']))
                            for c in d['components']],
            )
        try:
            spec = cls(source=mix_from(data['source']), target=mix_from(data['target']))
        except (KeyError, TypeError) as e:
            raise ValueError(f"malformed mixture spec: {e}") from e
        spec.validate()
        return spec

    def save(self, path: Path):
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: Path) -> "GaussianMixtureSpec":
        with open(path, 'r') as f:
            return cls.from_dict(json.load(f))


def shifted_mixture_spec(shift: bool = True, count: int = 1000, diag_as_std: bool = True) -> GaussianMixtureSpec:
    """Synthetic task with balanced source and 10/90 target (or 50/50 when shift is off).

    The per-axis spreads 0.1 and 0.4 are standard deviations by default;
    diag_as_std=False uses them as variances instead.
    """
    narrow, wide = (0.1 ** 2, 0.4 ** 2) if diag_as_std else (0.1, 0.4)
    source = DomainMixture(
        count=count,
        label_proportions=[0.5, 0.5],
        components=[GaussianComponent(mean=[-1.0, -0.3], var=[narrow, wide]),
                    GaussianComponent(mean=[1.0, 0.3], var=[narrow, wide])],
    )
    target = DomainMixture(
        count=count,
        label_proportions=[0.1, 0.9] if shift else [0.5, 0.5],
        components=[GaussianComponent(mean=[-0.3, -1.0], var=[wide, narrow]),
                    GaussianComponent(mean=[0.3, 1.0], var=[wide, narrow])],
    )
    return GaussianMixtureSpec(source=source, target=target)


def label_counts(count: int, proportions: Sequence[float]) -> Tuple[int, int]:
    """Class-0 count is floored, the remainder goes to the positive class"""
    n0 = int(math.floor(count * proportions[0] + 1e-9))
    return n0, count - n0


def _sample_domain(mix: DomainMixture, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for label, n in enumerate(label_counts(mix.count, mix.label_proportions)):
        comp = mix.components[label]
        mean = np.asarray(comp.mean, dtype=float)
        std = np.sqrt(np.asarray(comp.var, dtype=float))
        xs.append(mean + std * rng.standard_normal((n, mean.shape[0])))
        ys.append(np.full(n, label, dtype=int))
    return np.vstack(xs), np.concatenate(ys)


def sample_synthetic(spec: GaussianMixtureSpec, seed: int) -> Dataset:
    """Draw a labeled two-domain dataset; bit-reproducible for a fixed seed"""
    spec.validate()
    # Separate counter-based streams per domain
    source_rng = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, 0]))
    target_rng = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, 1]))
    xs, ys = _sample_domain(spec.source, source_rng)
    xt, yt = _sample_domain(spec.target, target_rng)
    logger.debug(f"Sampled {len(xs)} source / {len(xt)} target points with seed {seed}")
    return Dataset.from_domains(xs, ys, xt, yt)
