"""
Relaxed Wasserstein distance on finite supports
The primal is a transportation problem whose sinks have capacity (1+beta)q;
the dual is an LP over non-negative 1-Lipschitz potentials. Both go through
scipy's HiGHS interface.
"""
import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.spatial.distance import cdist

from relaxed_align.distributions import DiscreteDistribution, align_supports

logger = logging.getLogger(__name__)

LP_TOLERANCE = 1e-9

HIGHS_OPTIONS = {
    'primal_feasibility_tolerance': 1e-10,
    'dual_feasibility_tolerance': 1e-10,
}


@dataclass(frozen=True, eq=False)
class Coupling:
    """Joint mass over supp(p) x supp(q) with its Euclidean cost matrix"""
    mass: np.ndarray  # (n, m)
    cost: np.ndarray  # (n, m)
    row_atoms: np.ndarray
    col_atoms: np.ndarray
    beta: float

    @property
    def value(self) -> float:
        return float(np.sum(self.mass * self.cost))

    def feasibility_violation(self, p_mass: np.ndarray, q_mass: np.ndarray) -> float:
        """Largest breach of the row equalities or the column capacities"""
        row_gap = np.abs(self.mass.sum(axis=1) - p_mass).max()
        col_gap = (self.mass.sum(axis=0) - (1.0 + self.beta) * q_mass).max()
        return float(max(row_gap, col_gap, 0.0, -self.mass.min()))


@dataclass(frozen=True, eq=False)
class PotentialVector:
    """Non-negative potential g on the union support"""
    atoms: np.ndarray
    values: np.ndarray

    def potential_at(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        lookup = {tuple(a): v for a, v in zip(self.atoms, self.values)}
        try:
            return np.array([lookup[tuple(p)] for p in pts])
        except KeyError as e:
            raise ValueError(f"point {e.args[0]} is not an atom of this potential") from None

    def lipschitz_violation(self) -> float:
        d = cdist(self.atoms, self.atoms)
        diff = self.values[:, None] - self.values[None, :]
        return float(max((diff - d).max(), 0.0, -self.values.min()))


def _check_beta(beta: float):
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")


def _solve(c, **constraints):
    result = linprog(c, bounds=(0, None), method='highs', options=HIGHS_OPTIONS, **constraints)
    if result.status != 0:
        raise RuntimeError(f"LP solve failed: {result.message}")
    return result


def _transport(p: DiscreteDistribution, q: DiscreteDistribution, beta: float,
               capacity_only: bool) -> Tuple[float, Coupling]:
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    n, m = len(p), len(q)
    cost = cdist(p.atoms, q.atoms)

    rows = sparse.kron(sparse.eye(n), np.ones((1, m)), format='csr')
    cols = sparse.kron(np.ones((1, n)), sparse.eye(m), format='csr')
    if capacity_only:
        result = _solve(cost.ravel(), A_eq=rows, b_eq=p.mass,
                        A_ub=cols, b_ub=(1.0 + beta) * q.mass)
    else:
        result = _solve(cost.ravel(), A_eq=sparse.vstack([rows, cols]),
                        b_eq=np.concatenate([p.mass, q.mass]))

    coupling = Coupling(mass=result.x.reshape(n, m), cost=cost,
                        row_atoms=p.atoms, col_atoms=q.atoms, beta=float(beta))
    logger.debug(f"transport {n}x{m} beta={beta:g}: value {result.fun:.6g}")
    return float(result.fun), coupling


def relaxed_wasserstein_primal(p: DiscreteDistribution, q: DiscreteDistribution,
                               beta: float) -> Tuple[float, Coupling]:
    """W_beta(p, q): cheapest plan shipping p into sinks of capacity (1+beta)q"""
    _check_beta(beta)
    return _transport(p, q, beta, capacity_only=True)


def classical_wasserstein(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    value, _ = _transport(p, q, 0.0, capacity_only=False)
    return value


def relaxed_wasserstein_dual(p: DiscreteDistribution, q: DiscreteDistribution,
                             beta: float) -> Tuple[float, PotentialVector]:
    """sup over g >= 0, 1-Lipschitz on the union support, of E_p[g] - (1+beta) E_q[g]"""
    _check_beta(beta)
    atoms, pm, qm = align_supports(p, q)
    n = atoms.shape[0]
    if n == 1:
        return 0.0, PotentialVector(atoms=atoms, values=np.zeros(1))

    d = cdist(atoms, atoms)
    i, j = np.where(~np.eye(n, dtype=bool))
    k = np.arange(i.shape[0])
    lipschitz = sparse.coo_matrix(
        (np.concatenate([np.ones_like(k), -np.ones_like(k)]).astype(float),
         (np.concatenate([k, k]), np.concatenate([i, j]))),
        shape=(k.shape[0], n),
    ).tocsr()

    result = _solve(-(pm - (1.0 + beta) * qm), A_ub=lipschitz, b_ub=d[i, j])
    return float(-result.fun), PotentialVector(atoms=atoms, values=result.x)


def critic_objective_w(g_on_target: Sequence[float], g_on_source: Sequence[float], beta: float) -> float:
    """mean_target g - (1+beta) mean_source g for a non-negative critic"""
    gt = np.asarray(g_on_target, dtype=float)
    gs = np.asarray(g_on_source, dtype=float)
    if np.any(gt < 0) or np.any(gs < 0):
        raise ValueError("critic values must be non-negative")
    return float(gt.mean() - (1.0 + beta) * gs.mean())
