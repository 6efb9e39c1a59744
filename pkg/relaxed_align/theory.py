"""
Executable checks of the label-shift results
Lower bound under exact alignment, the relaxed-alignment construction with
zero error on both domains, the three-term target-error decomposition, and
the sample-based audit of the target-error bound.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Protocol, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist
from scipy.stats import qmc
from sklearn.neighbors import NearestNeighbors

from relaxed_align.config_manager import AuditSettings
from relaxed_align.distributions import Dataset, Domain
from relaxed_align.helpers.knn_estimators import knn_density_ratio, knn_vote, nearest_neighbor_pairs

logger = logging.getLogger(__name__)

SAMPLING_TOLERANCE = 0.02
EXACT_TOLERANCE = 1e-12


class EncoderClassifier(Protocol):
    def encode(self, x: np.ndarray) -> np.ndarray: ...

    def classify_latent(self, z: np.ndarray) -> np.ndarray: ...

    def predict(self, x: np.ndarray) -> np.ndarray: ...


def _check_rho(rho: float, name: str, open_interval: bool):
    low_ok = rho > 0 if open_interval else rho >= 0
    high_ok = rho < 1 if open_interval else rho <= 1
    if not (low_ok and high_ok):
        interval = "(0, 1)" if open_interval else "[0, 1]"
        raise ValueError(f"{name} must lie in {interval}, got {rho}")


def label_shift_lower_bound(rho_s: float, rho_t: float) -> float:
    """Target error floor |rho_S - rho_T| of any perfectly aligned representation"""
    _check_rho(rho_s, "rho_s", open_interval=False)
    _check_rho(rho_t, "rho_t", open_interval=False)
    return abs(rho_s - rho_t)


@dataclass(frozen=True)
class Segment:
    """Inputs uniform on [x_lo, x_hi], mapped linearly onto [z_lo, z_hi]"""
    domain: Domain
    x_lo: float
    x_hi: float
    z_lo: float
    z_hi: float
    label: int
    mass: float

    @property
    def latent_density(self) -> float:
        return self.mass / (self.z_hi - self.z_lo)

    def encode(self, x: np.ndarray) -> np.ndarray:
        if self.x_lo == self.z_lo and self.x_hi == self.z_hi:
            return x
        return self.z_lo + (x - self.x_lo) * ((self.z_hi - self.z_lo) / (self.x_hi - self.x_lo))


LAYOUTS = ("disjoint", "overlapping")


@dataclass(frozen=True)
class LabelShiftConstruction:
    """1-d source/target pair whose encodings have bounded density ratio and zero error.

    "disjoint": source uniform on [0,1], target uniform on [2,3], phi
    piecewise linear. "overlapping": target on [0,1] with piecewise constant
    density and phi the identity. Both induce the same latent densities.
    """
    rho_s: float
    rho_t: float
    layout: str = "disjoint"
    segments: Tuple[Segment, ...] = field(init=False)

    def __post_init__(self):
        _check_rho(self.rho_s, "rho_s", open_interval=True)
        _check_rho(self.rho_t, "rho_t", open_interval=True)
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}, got '{self.layout}'")
        rs, rt = self.rho_s, self.rho_t
        source = (
            Segment(Domain.SOURCE, 0.0, rs, 0.0, rs, 1, rs),
            Segment(Domain.SOURCE, rs, 1.0, rs, 1.0, 0, 1.0 - rs),
        )
        if self.layout == "disjoint":
            target = (
                Segment(Domain.TARGET, 2.0, 2.0 + rt, 0.0, rs, 1, rt),
                Segment(Domain.TARGET, 2.0 + rt, 3.0, rs, 1.0, 0, 1.0 - rt),
            )
        else:
            target = (
                Segment(Domain.TARGET, 0.0, rs, 0.0, rs, 1, rt),
                Segment(Domain.TARGET, rs, 1.0, rs, 1.0, 0, 1.0 - rt),
            )
        object.__setattr__(self, "segments", source + target)

    def domain_segments(self, domain: Domain) -> List[Segment]:
        return [s for s in self.segments if s.domain == domain]

    @property
    def ratio_bound(self) -> float:
        return max(self.rho_t / self.rho_s, (1.0 - self.rho_t) / (1.0 - self.rho_s))

    def analytic_ratio_sup(self) -> float:
        """sup of the target/source latent density ratio, piece by piece"""
        ratios = []
        for t in self.domain_segments(Domain.TARGET):
            for s in self.domain_segments(Domain.SOURCE):
                if t.z_lo == s.z_lo and t.z_hi == s.z_hi:
                    ratios.append(t.latent_density / s.latent_density)
        return max(ratios)

    def classify_latent(self, z: np.ndarray) -> np.ndarray:
        """h(z) = 1 on z <= rho_S"""
        return (np.asarray(z, dtype=float).reshape(-1) <= self.rho_s).astype(float)

    def analytic_error(self, domain: Domain) -> float:
        """Exact 0-1 risk of h(phi(x)) integrated segment by segment"""
        error = 0.0
        for s in self.domain_segments(domain):
            if s.label == 1:
                wrong = max(0.0, s.z_hi - max(s.z_lo, self.rho_s))
            else:
                wrong = max(0.0, min(s.z_hi, self.rho_s) - s.z_lo)
            error += s.mass * wrong / (s.z_hi - s.z_lo)
        return error

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        z = np.full(x.shape, np.nan)
        # First matching piece wins at shared endpoints
        for s in self.segments:
            inside = np.isnan(z) & (x >= s.x_lo) & (x <= s.x_hi)
            z[inside] = s.encode(x[inside])
        if np.isnan(z).any():
            raise ValueError("input outside the construction's support")
        return z[:, None]

    def inverse_cdf(self, domain: Domain, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Map u in [0,1) to inputs and labels of the domain"""
        u = np.asarray(u, dtype=float).reshape(-1)
        x = np.empty_like(u)
        labels = np.empty(u.shape, dtype=int)
        lo = 0.0
        pieces = self.domain_segments(domain)
        for k, s in enumerate(pieces):
            hi = 1.0 if k == len(pieces) - 1 else lo + s.mass
            inside = (u >= lo) & (u < hi) if k < len(pieces) - 1 else (u >= lo)
            x[inside] = s.x_lo + (u[inside] - lo) * ((s.x_hi - s.x_lo) / s.mass)
            labels[inside] = s.label
            lo = hi
        return x, labels

    def grid_sample(self, domain: Domain, n: int) -> Tuple[np.ndarray, np.ndarray]:
        """Deterministic midpoint quantiles of the domain's input distribution"""
        return self.inverse_cdf(domain, (np.arange(n) + 0.5) / n)

    def dataset(self, n: int = 1000) -> Dataset:
        xs, ys = self.grid_sample(Domain.SOURCE, n)
        xt, yt = self.grid_sample(Domain.TARGET, n)
        return Dataset.from_domains(xs, ys, xt, yt)

    def sampled_ratio_sup(self, samples: int = 100000) -> float:
        """Ratio of latent region masses from Halton draws pushed through phi"""
        u = qmc.Halton(d=1, scramble=False).random(samples).ravel()
        z_s = self.encode(self.inverse_cdf(Domain.SOURCE, u)[0]).ravel()
        z_t = self.encode(self.inverse_cdf(Domain.TARGET, u)[0]).ravel()
        ratios = []
        for s in self.domain_segments(Domain.SOURCE):
            in_s = np.mean((z_s >= s.z_lo) & (z_s < s.z_hi))
            in_t = np.mean((z_t >= s.z_lo) & (z_t < s.z_hi))
            ratios.append(in_t / in_s)
        return float(max(ratios))


class AnalyticModel:
    """Wraps a construction as an encoder/classifier pair"""

    def __init__(self, construction: LabelShiftConstruction):
        self.construction = construction

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.construction.encode(x)

    def classify_latent(self, z: np.ndarray) -> np.ndarray:
        return self.construction.classify_latent(z)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classify_latent(self.encode(x))


@dataclass
class ConstructionReport:
    rho_s: float
    rho_t: float
    layout: str
    ratio_bound: float
    analytic_ratio_sup: float
    min_beta: float
    source_error: float
    target_error: float
    sampled_ratio_sup: float
    sampled_relative_error: float

    @property
    def passed(self) -> bool:
        return (self.source_error == 0.0 and self.target_error == 0.0
                and abs(self.analytic_ratio_sup - self.ratio_bound) <= EXACT_TOLERANCE
                and self.sampled_relative_error <= SAMPLING_TOLERANCE)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['passed'] = self.passed
        return data


def build_and_check_construction(rho_s: float, rho_t: float, layout: str = "disjoint",
                          samples: int = 100000) -> Tuple[LabelShiftConstruction, ConstructionReport]:
    construction = LabelShiftConstruction(rho_s, rho_t, layout)
    analytic = construction.analytic_ratio_sup()
    sampled = construction.sampled_ratio_sup(samples)
    report = ConstructionReport(
        rho_s=rho_s,
        rho_t=rho_t,
        layout=layout,
        ratio_bound=construction.ratio_bound,
        analytic_ratio_sup=analytic,
        min_beta=max(0.0, construction.ratio_bound - 1.0),
        source_error=construction.analytic_error(Domain.SOURCE),
        target_error=construction.analytic_error(Domain.TARGET),
        sampled_ratio_sup=sampled,
        sampled_relative_error=abs(sampled - analytic) / analytic,
    )
    if not report.passed:
        logger.warning(f"construction check failed for rho_s={rho_s}, rho_t={rho_t}: {report.to_dict()}")
    return construction, report


@dataclass
class RiskDecomposition:
    """E_T = E_S + E_T[r_T - r_S] + (E_T - E_S)[r_S] on encoded samples"""
    source_error: float
    label_mismatch: float
    distribution_shift: float
    measured_target_error: float
    tolerance: float
    ratio_sup: float
    shift_upper_bound: float  # (sup ratio - 1) * E_S

    @property
    def total(self) -> float:
        return self.source_error + self.label_mismatch + self.distribution_shift

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['total'] = self.total
        return data


def _encoded_domains(model: EncoderClassifier, data: Dataset):
    xs, ys = data.source()
    xt, yt = data.target()
    z_s = np.asarray(model.encode(xs), dtype=float)
    z_t = np.asarray(model.encode(xt), dtype=float)
    return z_s, ys, z_t, yt


def risk_decomposition(model: EncoderClassifier, data: Dataset, k: int = 10,
                       use_true_labels: bool = False) -> RiskDecomposition:
    """Three-term split of the measured target error.

    Latent labelling functions are k-NN votes among same-domain encodings;
    with use_true_labels each sample's own label stands in, and the terms
    then sum to the measured target error exactly.
    """
    z_s, ys, z_t, yt = _encoded_domains(model, data)
    if k > min(len(z_s), len(z_t)) - 1:
        raise ValueError(f"k={k} is too large for {len(z_s)} source / {len(z_t)} target samples")

    h_s = (model.classify_latent(z_s) >= 0.5).astype(int)
    h_t = (model.classify_latent(z_t) >= 0.5).astype(int)
    f_s_on_s = ys if use_true_labels else knn_vote(z_s, ys, z_s, k, query_in_reference=True)
    f_t_on_t = yt if use_true_labels else knn_vote(z_t, yt, z_t, k, query_in_reference=True)
    f_s_on_t = knn_vote(z_s, ys, z_t, k)

    r_s_on_s = np.abs(h_s - f_s_on_s)
    r_s_on_t = np.abs(h_t - f_s_on_t)
    r_t_on_t = np.abs(h_t - f_t_on_t)

    source_error = float(r_s_on_s.mean())
    ratio_sup = float(np.max(knn_density_ratio(z_t, z_s, k=k)))
    return RiskDecomposition(
        source_error=source_error,
        label_mismatch=float((r_t_on_t - r_s_on_t).mean()),
        distribution_shift=float(r_s_on_t.mean() - r_s_on_s.mean()),
        measured_target_error=float(np.mean(h_t != yt)),
        tolerance=float(np.mean(f_t_on_t != yt)),
        ratio_sup=ratio_sup,
        shift_upper_bound=(ratio_sup - 1.0) * source_error,
    )


@dataclass
class BoundAudit:
    lipschitz: float  # empirical lower bound on the true constant
    beta: float
    delta1: float
    delta: float
    delta2: float
    delta3: float
    bound_value: float
    measured_target_error: float
    source_error: float
    slack: float
    applicable: bool = True
    margin_product: float = 0.0  # Delta * (1 - delta2)
    sweep: List[Dict] = field(default_factory=list)
    delta1_curve: List[List[float]] = field(default_factory=list)  # [beta, delta1] over the beta grid

    @property
    def consistent(self) -> bool:
        return (not self.applicable) or self.bound_value >= self.measured_target_error - self.slack

    def to_dict(self) -> Dict:
        data = asdict(self)
        if not math.isfinite(data['bound_value']):
            data['bound_value'] = None
        data['consistent'] = self.consistent
        data['indicative'] = True
        return data


def estimate_lipschitz(model: EncoderClassifier, x: np.ndarray, pairs: int, rng: np.random.Generator) -> float:
    """max ||phi(x)-phi(x')|| / ||x-x'|| over random pairs and nearest-neighbour pairs"""
    x = np.asarray(x, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    z = np.asarray(model.encode(x), dtype=float)
    candidates = [rng.integers(0, len(x), size=(pairs, 2))]
    near = nearest_neighbor_pairs(x)
    if near is not None:
        candidates.append(near)
    idx = np.vstack(candidates)
    dx = np.linalg.norm(x[idx[:, 0]] - x[idx[:, 1]], axis=1)
    dz = np.linalg.norm(z[idx[:, 0]] - z[idx[:, 1]], axis=1)
    valid = dx > 0
    if not valid.any():
        return 0.0
    return float(np.max(dz[valid] / dx[valid]))


def _source_separation(z_s: np.ndarray, ys: np.ndarray, delta2: float) -> Tuple[np.ndarray, float]:
    """Drop the floor(delta2 * n) smallest-margin source points; return (kept mask, Delta)"""
    if len(np.unique(ys)) < 2:
        return np.ones(len(z_s), dtype=bool), 0.0
    margins = np.empty(len(z_s))
    for label in (0, 1):
        own, other = ys == label, ys != label
        nn = NearestNeighbors(n_neighbors=1).fit(z_s[other])
        margins[own] = nn.kneighbors(z_s[own])[0][:, 0]
    n_drop = int(math.floor(delta2 * len(z_s) + 1e-9))
    kept = np.ones(len(z_s), dtype=bool)
    kept[np.argsort(margins, kind='stable')[:n_drop]] = False

    class0, class1 = z_s[kept & (ys == 0)], z_s[kept & (ys == 1)]
    if len(class0) == 0 or len(class1) == 0:
        return kept, 0.0
    nn = NearestNeighbors(n_neighbors=1).fit(class1)
    return kept, float(nn.kneighbors(class0)[0].min())


def _connectivity_failure(xt: np.ndarray, yt: np.ndarray, xs_kept: np.ndarray, ys_kept: np.ndarray,
                          radius: float) -> float:
    """Target mass whose component (edges strictly shorter than radius) lacks a same-label source anchor"""
    n_t = len(xt)
    tt = sparse.csr_matrix(cdist(xt, xt) < radius)
    ts = sparse.csr_matrix(cdist(xt, xs_kept) < radius)
    graph = sparse.bmat([[tt, ts], [ts.T, None]], format='csr')
    _, component = connected_components(graph, directed=False)

    anchors = np.zeros((component.max() + 1, 2), dtype=bool)
    anchors[component[n_t:], ys_kept] = True
    failing = ~anchors[component[:n_t], yt]
    return float(failing.mean())


def audit_bound(model: EncoderClassifier, data: Dataset, settings: Optional[AuditSettings] = None) -> BoundAudit:
    """Estimate the constants of the target-error bound and compare it with the measured error"""
    settings = settings or AuditSettings()
    settings.validate()
    xs, ys = data.source()
    xt, yt = data.target()
    z_s, _, z_t, _ = _encoded_domains(model, data)
    source_error = float(np.mean((model.classify_latent(z_s) >= 0.5) != ys))
    target_error = float(np.mean((model.classify_latent(z_t) >= 0.5) != yt))

    lipschitz = estimate_lipschitz(model, data.x, settings.lipschitz_pairs, np.random.default_rng(settings.seed))
    ratios = knn_density_ratio(z_t, z_s, k=settings.k)
    betas = sorted(set(float(b) for b in settings.beta_grid) | {max(0.0, float(ratios.max()) - 1.0)})
    delta1 = {beta: float(np.mean(ratios > 1.0 + beta)) for beta in betas}

    sweep = []
    chosen = None
    for delta2_target in sorted(settings.delta2_sweep):
        kept, delta = _source_separation(z_s, ys, delta2_target)
        delta2 = float(1.0 - kept.mean())
        product = delta * (1.0 - delta2)
        sweep.append({'delta2': delta2, 'delta': delta, 'margin_product': product})
        # Largest Delta * (1 - delta2); ties keep the smaller delta2
        if delta > 0 and (chosen is None or product > chosen[0]):
            chosen = (product, delta2, delta, kept)
    curve = [[beta, delta1[beta]] for beta in betas]

    n_s, n_t = len(xs), len(xt)
    log_term = math.log(2.0 / settings.alpha)
    if chosen is None or lipschitz <= 0:
        beta = betas[0]
        logger.warning("latent separation is zero for every delta2; the bound does not apply")
        return BoundAudit(lipschitz=lipschitz, beta=beta, delta1=delta1[beta], delta=0.0, delta2=0.0, delta3=1.0,
                          bound_value=math.inf, measured_target_error=target_error, source_error=source_error,
                          slack=math.sqrt(log_term / (2 * n_t)) + (1.0 + beta) * math.sqrt(log_term / (2 * n_s)),
                          applicable=False, sweep=sweep, delta1_curve=curve)

    product, delta2, delta, kept = chosen
    delta3 = _connectivity_failure(xt, yt, xs[kept], ys[kept], delta / lipschitz)
    value, beta = min(((1.0 + b) * source_error + 3.0 * delta1[b] + 2.0 * (1.0 + b) * delta2 + delta3, b)
                      for b in betas)
    audit = BoundAudit(
        lipschitz=lipschitz, beta=beta, delta1=delta1[beta], delta=delta, delta2=delta2, delta3=delta3,
        bound_value=value, measured_target_error=target_error, source_error=source_error,
        slack=math.sqrt(log_term / (2 * n_t)) + (1.0 + beta) * math.sqrt(log_term / (2 * n_s)),
        margin_product=product, sweep=sweep, delta1_curve=curve,
    )
    if not audit.consistent:
        logger.warning(f"estimator failure: bound {value:.4f} below measured target error "
                       f"{target_error:.4f} minus slack {audit.slack:.4f}")
    else:
        logger.info(f"bound {value:.4f} (beta={beta:g}, delta1={audit.delta1:.3f}, delta2={delta2:.3f}, "
                    f"delta3={delta3:.3f}) vs measured target error {target_error:.4f}")
    return audit
