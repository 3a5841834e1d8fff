"""DTW distance, DTW barycenter averaging and k-means over univariate series."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConfigError, DomainError


@numba.njit(cache=True)
def _cost_matrix(a, b):
    n, m = len(a), len(b)
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best = D[i - 1, j - 1]
            if D[i - 1, j] < best:
                best = D[i - 1, j]
            if D[i, j - 1] < best:
                best = D[i, j - 1]
            D[i, j] = abs(a[i - 1] - b[j - 1]) + best
    return D


@numba.njit(cache=True)
def _backtrack(D):
    i, j = D.shape[0] - 1, D.shape[1] - 1
    path = np.empty((i + j, 2), dtype=np.int64)
    k = 0
    while True:
        path[k, 0] = i - 1
        path[k, 1] = j - 1
        k += 1
        if i == 1 and j == 1:
            break
        # prefer the diagonal on ties so paths are deterministic
        best = D[i - 1, j - 1]
        di, dj = 1, 1
        if D[i - 1, j] < best:
            best = D[i - 1, j]
            di, dj = 1, 0
        if D[i, j - 1] < best:
            di, dj = 0, 1
        i -= di
        j -= dj
    return path[:k][::-1]


@numba.njit(cache=True)
def _dtw_many(series, center):
    out = np.empty(len(series))
    for s in range(len(series)):
        out[s] = _cost_matrix(series[s], center)[-1, -1]
    return out


def _as_series(x) -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 1 or len(a) == 0:
        raise DomainError("DTW needs non-empty 1-D series")
    return a


def dtw(a, b) -> float:
    """Unconstrained DTW with |a_i - b_j| local cost and unit match/insert/delete steps."""
    return float(_cost_matrix(_as_series(a), _as_series(b))[-1, -1])


def dtw_path(a, b) -> tuple[float, np.ndarray]:
    D = _cost_matrix(_as_series(a), _as_series(b))
    return float(D[-1, -1]), _backtrack(D)


def dtw_to_center(series: np.ndarray, center: np.ndarray) -> np.ndarray:
    return _dtw_many(np.ascontiguousarray(series, dtype=np.float64), _as_series(center))


def _dba_update(series: np.ndarray, avg: np.ndarray) -> tuple[np.ndarray, float]:
    """One DBA pass; returns the new average and the alignment cost of ``avg``."""
    sums = np.zeros_like(avg)
    counts = np.zeros(len(avg))
    cost = 0.0
    for s in series:
        c, path = dtw_path(avg, s)
        cost += c
        np.add.at(sums, path[:, 0], s[path[:, 1]])
        np.add.at(counts, path[:, 0], 1)
    return sums / counts, cost


def medoid(series: np.ndarray, seed: int = 0, sample_size: int = 50) -> np.ndarray:
    """Member with the least summed DTW distance among a seeded sample of candidates."""
    rng = np.random.default_rng(seed)
    n = len(series)
    cand = np.arange(n) if n <= sample_size else np.sort(rng.choice(n, sample_size, replace=False))
    totals = [dtw_to_center(series, series[c]).sum() for c in cand]
    return series[cand[int(np.argmin(totals))]].copy()


def dba(series, max_iter: int = 10, seed: int = 0, init: np.ndarray | None = None,
        tol: float = 1e-6, return_costs: bool = False):
    """DTW barycenter average of equal-length series.

    Starts from ``init`` or a seeded medoid and stops once the total alignment
    cost fails to drop by a relative ``tol``. An update that would raise the
    cost is discarded, so the recorded costs never increase.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2 or len(series) == 0:
        raise DomainError("DBA needs a non-empty (n, length) array")
    avg = medoid(series, seed) if init is None else np.array(init, dtype=np.float64)
    best = avg
    best_cost = dtw_to_center(series, avg).sum()
    costs = [best_cost]
    for _ in range(max_iter):
        candidate, _ = _dba_update(series, best)
        cost = dtw_to_center(series, candidate).sum()
        if cost > best_cost:
            break
        improved = cost < best_cost * (1 - tol)
        # a tied update is kept (it is the coordinate-wise mean) but ends the loop
        best, best_cost = candidate, cost
        costs.append(cost)
        if not improved:
            break
    return (best, costs) if return_costs else best


@dataclass
class ClusterResult:
    assignments: np.ndarray
    centers: np.ndarray
    inertia: float
    inertia_trace: list[float] = field(default_factory=list)


def _init_centers(series, k, rng):
    """Distance-weighted (k-means++ style) seeding with DTW."""
    n = len(series)
    chosen = [int(rng.integers(n))]
    dist = dtw_to_center(series, series[chosen[0]])
    for _ in range(1, k):
        total = dist.sum()
        if total <= 0:
            rest = [i for i in range(n) if i not in chosen]
            nxt = int(rest[rng.integers(len(rest))])
        else:
            nxt = int(rng.choice(n, p=dist / total))
        chosen.append(nxt)
        dist = np.minimum(dist, dtw_to_center(series, series[nxt]))
    return series[chosen].copy()


def _distances(series, centers):
    return np.stack([dtw_to_center(series, c) for c in centers], axis=1)


def kmeans_dtw(series, k: int = 20, seed: int = 0, max_iter: int = 10, dba_iter: int = 5) -> ClusterResult:
    """k-means with DTW assignment and DBA centers; inertia is the summed DTW to assigned centers."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise DomainError("expected (n, length) series")
    if len(series) < k:
        raise ConfigError(f"need at least k={k} series, got {len(series)}")
    rng = np.random.default_rng(seed)
    centers = _init_centers(series, k, rng)
    d = _distances(series, centers)
    assign = np.argmin(d, axis=1)
    inertia = float(d[np.arange(len(series)), assign].sum())
    trace = [inertia]
    for _ in range(max_iter):
        new_centers = centers.copy()
        for c in range(k):
            members = series[assign == c]
            if len(members):
                new_centers[c] = dba(members, max_iter=dba_iter, init=centers[c])
        d = _distances(series, new_centers)
        new_assign = np.argmin(d, axis=1)
        new_inertia = float(d[np.arange(len(series)), new_assign].sum())
        if new_inertia > inertia:
            break
        centers = new_centers
        converged = np.array_equal(new_assign, assign)
        assign, inertia = new_assign, new_inertia
        trace.append(inertia)
        if converged:
            break
    return ClusterResult(assign, centers, inertia, trace)
