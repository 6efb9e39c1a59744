"""
f-divergences and their beta-admissible relaxations
Partially linearized generators, exact primal/dual evaluation on discrete
distributions, the GAN critic objective and the reweighting distance.

Argument order is always D(p, q) with p the target encoding distribution and
q the source encoding distribution.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import xlogy

from relaxed_align.distributions import DiscreteDistribution, align_supports, total_variation

logger = logging.getLogger(__name__)

LOG4 = math.log(4.0)

DistanceEvaluator = Callable[[DiscreteDistribution, DiscreteDistribution], float]


@dataclass(frozen=True)
class GeneratorFunction:
    """Convex f on u >= 0 with f(1) = 0, its derivative and Fenchel conjugate"""
    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    conjugate: Callable[[np.ndarray], np.ndarray]
    conjugate_domain: Tuple[float, float]
    recession: float  # lim_{u -> inf} f(u) / u

    def __call__(self, u):
        with np.errstate(divide='ignore', invalid='ignore'):
            return self.fn(np.asarray(u, dtype=float))


def _gan_fn(u):
    # Shifted by log 4 so that f(1) = 0
    return xlogy(u, u) - xlogy(1.0 + u, 1.0 + u) + LOG4


def _gan_deriv(u):
    with np.errstate(divide='ignore'):
        return np.log(u) - np.log1p(u)


def _gan_conjugate(t):
    return -np.log1p(-np.exp(t)) - LOG4


GAN_GENERATOR = GeneratorFunction(
    name="gan",
    fn=_gan_fn,
    deriv=_gan_deriv,
    conjugate=_gan_conjugate,
    conjugate_domain=(-math.inf, 0.0),
    recession=0.0,
)

KL_GENERATOR = GeneratorFunction(
    name="kl",
    fn=lambda u: xlogy(u, u),
    deriv=lambda u: np.log(u) + 1.0,
    conjugate=lambda t: np.exp(t - 1.0),
    conjugate_domain=(-math.inf, math.inf),
    recession=math.inf,
)

GENERATORS = {g.name: g for g in (GAN_GENERATOR, KL_GENERATOR)}


def get_generator(name: str) -> GeneratorFunction:
    try:
        return GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown generator '{name}', expected one of {sorted(GENERATORS)}") from None


@dataclass(frozen=True)
class RelaxedGenerator:
    """f linearized beyond the knee 1/(1+beta); zero on every admissible ratio"""
    base: GeneratorFunction
    beta: float
    knee: float
    slope: float
    offset: float

    @property
    def name(self) -> str:
        return f"{self.base.name}-relaxed-{self.beta:g}"

    @property
    def recession(self) -> float:
        return self.slope

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        left = self.base(np.minimum(u, self.knee)) + self.offset
        return np.where(u <= self.knee, left, self.slope * u - self.slope)


def relax(base: GeneratorFunction, beta: float) -> RelaxedGenerator:
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    knee = 1.0 / (1.0 + beta)
    slope = float(base.deriv(np.float64(knee)))
    offset = float(-base(knee) + slope * knee - slope)
    return RelaxedGenerator(base=base, beta=float(beta), knee=knee, slope=slope, offset=offset)


def primal_divergence(gen, p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """D_f(p, q) = sum_z p(z) f(q(z)/p(z)) plus the recession term where p vanishes"""
    _, pm, qm = align_supports(p, q)
    on_p = pm > 0
    terms = pm[on_p] * gen(qm[on_p] / pm[on_p])
    if not np.all(np.isfinite(terms)):
        raise ValueError(f"generator {gen.name} is undefined at a ratio of this pair")
    total = float(terms.sum())

    off_mass = float(qm[~on_p].sum())
    if off_mass > 0:
        if math.isinf(gen.recession):
            return math.inf
        total += gen.recession * off_mass
    return total


def dual_witness(gen: RelaxedGenerator, p: DiscreteDistribution,
                 q: DiscreteDistribution) -> Tuple[np.ndarray, np.ndarray]:
    """Per-atom optimal critic T(z) = f'(q/p) clamped at f'(knee); returns (atoms, T)"""
    atoms, pm, qm = align_supports(p, q)
    with np.errstate(divide='ignore'):
        ratio = np.where(pm > 0, qm / np.where(pm > 0, pm, 1.0), np.inf)
        t = gen.base.deriv(np.minimum(ratio, gen.knee))
    return atoms, t


def dual_divergence_discrete(gen: RelaxedGenerator, p: DiscreteDistribution,
                             q: DiscreteDistribution) -> float:
    """Closed-form maximization of the variational dual, constants matched to the primal"""
    _, pm, qm = align_supports(p, q)
    _, t = dual_witness(gen, p, q)
    with np.errstate(invalid='ignore'):
        q_term = np.where(qm > 0, qm * t, 0.0)
        p_term = np.where(pm > 0, pm * gen.base.conjugate(t), 0.0)
    if not (np.all(np.isfinite(q_term)) and np.all(np.isfinite(p_term))):
        raise ValueError(f"dual of {gen.name} is undefined for this pair")
    return float(q_term.sum() - p_term.sum() + gen.offset * pm.sum())


def _check_unit_interval(values: np.ndarray, label: str, closed_right: bool = True):
    upper_ok = values <= 1.0 if closed_right else values < 1.0
    if np.any(values <= 0.0) or not np.all(upper_ok):
        raise ValueError(f"{label} critic values must lie in (0, 1{']' if closed_right else ')'}")


def gan_critic_objective(g_values_on_source: Sequence[float], g_values_on_target: Sequence[float],
                         beta: float) -> float:
    """E_source[log g/(2+beta)] + E_target[log(1 - g/(2+beta))]; the critic maximizes this"""
    gs = np.asarray(g_values_on_source, dtype=float)
    gt = np.asarray(g_values_on_target, dtype=float)
    _check_unit_interval(gs, "source")
    _check_unit_interval(gt, "target")
    scale = 2.0 + beta
    return float(np.mean(np.log(gs / scale)) + np.mean(np.log1p(-gt / scale)))


def gan_dual_constant(beta: float) -> float:
    """Additive constant turning the maximized GAN critic objective into the relaxed divergence"""
    return LOG4 + relax(GAN_GENERATOR, beta).offset


def critic_objective_dann(g_values_on_target: Sequence[float], g_values_on_source: Sequence[float]) -> float:
    """Domain classifier objective E_target[log g] + E_source[log(1 - g)]"""
    gt = np.asarray(g_values_on_target, dtype=float)
    gs = np.asarray(g_values_on_source, dtype=float)
    _check_unit_interval(gt, "target", closed_right=False)
    _check_unit_interval(gs, "source", closed_right=False)
    return float(np.mean(np.log(gt)) + np.mean(np.log1p(-gs)))


@dataclass(frozen=True, eq=False)
class ReweightVector:
    weights: np.ndarray  # per atom (or per batch entry), in [0, 1]
    beta: float

    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.weights > 0)

    def constraint_value(self, q_mass: np.ndarray) -> float:
        """sum_z q(z) w(z); equals 1/(1+beta) for a qualified reweighting"""
        return float(np.dot(q_mass, self.weights))


def kept_count(n: int, beta: float) -> int:
    return min(n, int(math.ceil(n / (1.0 + beta) - 1e-9)))


def sort_reweight(scores: Sequence[float], beta: float) -> ReweightVector:
    """Keep the ceil(n/(1+beta)) highest scores, lower index first on ties"""
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1 or s.shape[0] == 0:
        raise ValueError("sort_reweight needs a non-empty 1-d batch of scores")
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    order = np.argsort(-s, kind='stable')
    weights = np.zeros(s.shape[0])
    weights[order[:kept_count(s.shape[0], beta)]] = 1.0
    return ReweightVector(weights=weights, beta=float(beta))


def _projection_onto_admissible(pm: np.ndarray, cap: np.ndarray) -> np.ndarray:
    """Closest point to p in TV within {0 <= v <= cap, sum v = 1}"""
    v = np.minimum(pm, cap)
    deficit = 1.0 - v.sum()
    if deficit > 0:
        room = cap - v
        v = v + room * (deficit / room.sum())
    return v


def optimal_reweighting(distance: DistanceEvaluator, p: DiscreteDistribution, q: DiscreteDistribution,
                        beta: float) -> Tuple[float, ReweightVector, DiscreteDistribution]:
    """min over qualified w of D(p, q_w); returns (value, w over the union atoms, q_w)"""
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    atoms, pm, qm = align_supports(p, q)
    cap = (1.0 + beta) * qm

    def as_distribution(v: np.ndarray) -> DiscreteDistribution:
        v = np.clip(v, 0.0, None)
        return DiscreteDistribution(atoms=atoms.copy(), mass=v / v.sum())

    best_v = _projection_onto_admissible(pm, cap)
    if distance is total_variation:
        best_value = float(np.clip(pm - cap, 0.0, None).sum())
    else:
        best_value = float(distance(p, as_distribution(best_v)))
        free = cap > 0
        if best_value > 0 and free.sum() > 1:
            best_value, best_v = _refine(distance, p, as_distribution, best_v, cap, free, best_value)

    with np.errstate(divide='ignore', invalid='ignore'):
        w = np.where(qm > 0, best_v / np.where(cap > 0, cap, 1.0), 0.0)
    return best_value, ReweightVector(weights=np.clip(w, 0.0, 1.0), beta=float(beta)), as_distribution(best_v)


def _refine(distance, p, as_distribution, v0, cap, free, v0_value):
    def objective(x):
        v = v0.copy()
        v[free] = x
        return float(distance(p, as_distribution(v)))

    result = minimize(
        objective,
        v0[free],
        method='SLSQP',
        bounds=list(zip(np.zeros(free.sum()), cap[free])),
        constraints=[{'type': 'eq', 'fun': lambda x: x.sum() - 1.0}],
        options={'ftol': 1e-12, 'maxiter': 500},
    )
    if not result.success:
        logger.debug(f"SLSQP refinement stopped early: {result.message}")
    v = v0.copy()
    v[free] = np.clip(result.x, 0.0, cap[free])
    value = objective(v[free])
    if value < v0_value:
        return value, v
    return v0_value, v0


def reweighted_distance_discrete(distance: DistanceEvaluator, p: DiscreteDistribution,
                                 q: DiscreteDistribution, beta: float) -> float:
    """D_beta(p, q) = min over qualified reweightings w of D(p, q_w)"""
    value, _, _ = optimal_reweighting(distance, p, q, beta)
    return value
