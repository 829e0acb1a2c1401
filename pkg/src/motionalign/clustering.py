"""K-nearest-neighbour density-peaks clustering.

Centers are the points maximising gamma = density * relative distance;
every remaining point joins its nearest center.  All ties break toward
the lower index so results are reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class ClusterResult:
    centers: list[int]                 # ordered by earliest member index
    assignment: dict[int, int]         # point index -> center index
    provenance: dict[int, list[int]]   # center index -> sorted member list
    aggregated: np.ndarray             # (n_centers, D) compressed vectors


def round_half_away(x: float) -> int:
    """round() with halves away from zero, independent of banker's rounding."""
    return int(np.floor(x + 0.5)) if x >= 0 else -int(np.floor(-x + 0.5))


def default_k(n: int) -> int:
    return min(max(2, round_half_away(0.1 * n)), max(1, n - 1))


def knn_density(points: np.ndarray, k: int) -> np.ndarray:
    """Gaussian density from mean squared k-nearest-neighbour distance."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < N, got k={k}, N={n}")
    d2 = _sq_distances(points)
    # column 0 of the sort is the self-distance (zero)
    knn = np.sort(d2, axis=1)[:, 1:k + 1]
    return np.exp(-knn.mean(axis=1))


def relative_distance(points: np.ndarray, densities: np.ndarray) -> np.ndarray:
    """Distance to the nearest strictly-denser point.

    The global density maximum receives the maximum pairwise distance.
    Density ties count the lower index as denser.
    """
    points = np.asarray(points, dtype=np.float64)
    densities = np.asarray(densities, dtype=np.float64)
    n = points.shape[0]
    dist = np.sqrt(_sq_distances(points))
    # rank points by (density desc, index asc); earlier rank = "denser"
    order = np.lexsort((np.arange(n), -densities))
    delta = np.empty(n)
    global_max = dist.max() if n > 1 else 0.0
    for r, idx in enumerate(order):
        if r == 0:
            delta[idx] = global_max
        else:
            delta[idx] = dist[idx, order[:r]].min()
    return delta


def cluster(points: np.ndarray, ratio: float, k: Optional[int] = None,
            weights: Optional[np.ndarray] = None) -> ClusterResult:
    """Density-peaks clustering down to max(1, round(ratio * N)) centers.

    ``weights`` are optional per-point scores; each cluster's aggregated
    vector is the softmax(weights)-over-members weighted mean (uniform
    when omitted).  Output centers are reordered by their earliest member
    index so temporal/reading order is preserved.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValueError("points must be a non-empty N x D matrix")
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite values")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    n = points.shape[0]
    n_centers = max(1, round_half_away(ratio * n))

    if n == 1:
        centers = [0]
    elif n_centers >= n:
        centers = list(range(n))
    else:
        kk = default_k(n) if k is None else k
        rho = knn_density(points, kk)
        delta = relative_distance(points, rho)
        gamma = rho * delta
        # top n_centers by gamma, ties toward the lower index
        order = np.lexsort((np.arange(n), -gamma))
        centers = sorted(order[:n_centers].tolist())

    center_arr = points[centers]
    assignment: dict[int, int] = {}
    for i in range(n):
        if i in centers:
            assignment[i] = i
            continue
        d2 = ((center_arr - points[i]) ** 2).sum(axis=1)
        assignment[i] = centers[int(np.argmin(d2))]  # argmin tie -> lower center

    provenance: dict[int, list[int]] = {c: [] for c in centers}
    for i in range(n):
        provenance[assignment[i]].append(i)

    # temporal order: centers sorted by earliest member index
    ordered = sorted(centers, key=lambda c: provenance[c][0])
    if weights is None:
        weights = np.zeros(n)
    weights = np.asarray(weights, dtype=np.float64).reshape(n)
    aggregated = np.empty((len(ordered), points.shape[1]))
    for row, c in enumerate(ordered):
        members = provenance[c]
        w = weights[members]
        w = np.exp(w - w.max())
        w /= w.sum()
        aggregated[row] = w @ points[members]
    return ClusterResult(centers=ordered, assignment=assignment,
                         provenance={c: provenance[c] for c in ordered},
                         aggregated=aggregated)


def _sq_distances(points: np.ndarray) -> np.ndarray:
    sq = (points ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.maximum(d2, 0.0, out=d2)
    return d2
