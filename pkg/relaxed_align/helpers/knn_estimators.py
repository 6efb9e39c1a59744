# helpers/knn_estimators.py
import logging
from typing import Optional

import numpy as np
from sklearn.neighbors import NearestNeighbors

logger = logging.getLogger(__name__)

# Floors k-th neighbour radii so duplicated points do not divide by zero
MIN_RADIUS = 1e-12


def _points(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    return arr[:, None] if arr.ndim == 1 else arr


def kth_neighbor_radius(reference, query, k: int, query_in_reference: bool = False) -> np.ndarray:
    """Distance from each query row to its k-th nearest reference row.

    With query_in_reference the query rows are the reference rows themselves
    and each point's own zero distance is skipped.
    """
    reference, query = _points(reference), _points(query)
    needed = k + 1 if query_in_reference else k
    if k < 1 or needed > reference.shape[0]:
        raise ValueError(f"k={k} needs at least {needed} reference points, have {reference.shape[0]}")
    nn = NearestNeighbors(n_neighbors=needed).fit(reference)
    distances, _ = nn.kneighbors(query)
    return np.maximum(distances[:, -1], MIN_RADIUS)


def knn_density_ratio(numerator, denominator, query=None, k: int = 10) -> np.ndarray:
    """k-NN estimate of p_num(z)/p_den(z) at the query points.

    ratio = (n_den * r_den^d) / (n_num * r_num^d), comparing the radii of
    the balls holding k neighbours from each sample. When query is None the
    numerator sample is queried and its self-matches are skipped.
    """
    numerator, denominator = _points(numerator), _points(denominator)
    if numerator.shape[1] != denominator.shape[1]:
        raise ValueError("samples have different dimensions")
    self_query = query is None
    query = numerator if self_query else _points(query)
    d = numerator.shape[1]

    r_num = kth_neighbor_radius(numerator, query, k, query_in_reference=self_query)
    r_den = kth_neighbor_radius(denominator, query, k)
    n_num = numerator.shape[0] - (1 if self_query else 0)
    # Ratio of radii first, then the power
    return (denominator.shape[0] / n_num) * (r_den / r_num) ** d


def knn_vote(reference, reference_labels, query, k: int, query_in_reference: bool = False) -> np.ndarray:
    """Majority label among the k nearest reference points; ties go to 1"""
    reference, query = _points(reference), _points(query)
    labels = np.asarray(reference_labels, dtype=float)
    needed = k + 1 if query_in_reference else k
    if k < 1 or needed > reference.shape[0]:
        raise ValueError(f"k={k} needs at least {needed} reference points, have {reference.shape[0]}")
    nn = NearestNeighbors(n_neighbors=needed).fit(reference)
    _, idx = nn.kneighbors(query)
    if query_in_reference:
        idx = _drop_self(idx)
    return (labels[idx].mean(axis=1) >= 0.5).astype(int)


def _drop_self(idx: np.ndarray) -> np.ndarray:
    """Remove each row's own index; falls back to the last column when ties hid it"""
    own = np.arange(idx.shape[0])[:, None]
    keep = idx != own
    out = np.empty((idx.shape[0], idx.shape[1] - 1), dtype=idx.dtype)
    for row in range(idx.shape[0]):
        kept = idx[row][keep[row]]
        out[row] = kept[:idx.shape[1] - 1]
    return out


def nearest_neighbor_pairs(x, exclude_duplicates: bool = True) -> Optional[np.ndarray]:
    """Index pairs (i, nearest other point of i) for every row of x"""
    x = _points(x)
    if x.shape[0] < 2:
        return None
    nn = NearestNeighbors(n_neighbors=2).fit(x)
    _, idx = nn.kneighbors(x)
    own = np.arange(x.shape[0])
    partner = np.where(idx[:, 0] == own, idx[:, 1], idx[:, 0])
    pairs = np.column_stack([own, partner])
    if exclude_duplicates:
        pairs = pairs[np.linalg.norm(x[pairs[:, 0]] - x[pairs[:, 1]], axis=1) > 0]
    return pairs
