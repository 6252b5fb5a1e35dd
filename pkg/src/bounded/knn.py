"""Exact k-nearest-neighbor search with deterministic ordering.

Ordering contract, shared by the tree path and the brute-force oracle:

* the query point itself comes first;
* every other point follows by ascending squared distance, computed as
  ``(dx*dx + dy*dy) + dz*dz``, ties broken by ascending point index.

With this ordering the k-NN list for ``k`` is a prefix of the list for any
larger ``k``, which the multi-scale features rely on.
"""
from __future__ import annotations

import os

import numba as nb
import numpy as np
from scipy.spatial import cKDTree

from .io import PointCloud

THREADS_ENV = "BOUNDED_THREADS"


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


@nb.njit(cache=True, nogil=True)
def _sq_dist(points, a, b):
    dx = points[a, 0] - points[b, 0]
    dy = points[a, 1] - points[b, 1]
    dz = points[a, 2] - points[b, 2]
    return dx * dx + dy * dy + dz * dz


@nb.njit(cache=True, nogil=True)
def _exact_order(points, queries, cand, k, out, needs_fallback):
    """Re-rank tree candidates exactly; flag rows whose k-th slot is not certain.

    ``cand`` holds ``k`` or ``k + 1`` candidates per row (the tree's own
    order). Rows are insertion-sorted by (self first, squared distance, index).
    When a (k+1)-th candidate exists, the row is only trusted if it is
    strictly farther than the k-th by a margin that covers rounding in the
    tree's distance arithmetic.
    """
    m = cand.shape[1]
    key = np.empty(m)
    idx = np.empty(m, dtype=np.int64)
    for r in range(queries.shape[0]):
        q = queries[r]
        for j in range(m):
            c = cand[r, j]
            idx[j] = c
            key[j] = -1.0 if c == q else _sq_dist(points, q, c)
        for j in range(1, m):
            kj = key[j]
            ij = idx[j]
            t = j - 1
            while t >= 0 and (key[t] > kj or (key[t] == kj and idx[t] > ij)):
                key[t + 1] = key[t]
                idx[t + 1] = idx[t]
                t -= 1
            key[t + 1] = kj
            idx[t + 1] = ij
        flag = key[0] != -1.0
        if m > k:
            last = key[k - 1]
            if not key[k] > last + 1e-12 * abs(last) + 1e-300:
                flag = True
        needs_fallback[r] = flag
        for j in range(k):
            out[r, j] = idx[j]


def _rank_candidates(points, q, cand, k):
    """Exact (self, distance, index) order over an explicit candidate set."""
    cand = np.asarray(cand, dtype=np.int64)
    diff = points[cand] - points[q]
    d2 = (diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1]) + diff[:, 2] * diff[:, 2]
    d2 = np.where(cand == q, -1.0, d2)
    order = np.lexsort((cand, d2))
    return cand[order[:k]]


class KnnIndex:
    """Balanced kd-tree (axis-aligned median splits) over a fixed point set.

    The index is immutable after construction; concurrent queries are safe.
    """

    def __init__(self, points, threads: int | None = None):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError("expected a non-empty (n, 3) array of points")
        self.points = pts
        self.threads = threads
        self._tree = cKDTree(pts, leafsize=16, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return self.points.shape[0]

    def neighbors(self, query_indices, k: int) -> np.ndarray:
        """k-NN lists for many points at once, shape (len(query_indices), k)."""
        n = len(self)
        if not 1 <= k <= n:
            raise ValueError(f"k must be in [1, {n}], got {k}")
        q = np.ascontiguousarray(np.atleast_1d(query_indices), dtype=np.int64)
        if q.size and (q.min() < 0 or q.max() >= n):
            raise IndexError("query index out of range")
        out = np.empty((q.size, k), dtype=np.int64)
        if q.size == 0:
            return out
        kq = min(k + 1, n)
        workers = self.threads if self.threads is not None else default_threads()
        _, cand = self._tree.query(self.points[q], k=kq, workers=workers)
        cand = np.ascontiguousarray(cand.reshape(q.size, kq), dtype=np.int64)
        fallback = np.empty(q.size, dtype=np.bool_)
        _exact_order(self.points, q, cand, k, out, fallback)
        for r in np.flatnonzero(fallback):
            out[r] = self._exact_row(int(q[r]), k, out[r])
        return out

    def _exact_row(self, q, k, approx):
        # every point at least as close as the current k-th candidate
        far = approx[k - 1]
        diff = self.points[far] - self.points[q]
        radius = float(np.sqrt(diff @ diff))
        cand = self._tree.query_ball_point(self.points[q], radius * (1 + 1e-9) + 1e-300)
        cand = np.union1d(np.asarray(cand, dtype=np.int64), approx)
        return _rank_candidates(self.points, q, cand, k)

    def query(self, point_index: int, k: int) -> np.ndarray:
        return self.neighbors([point_index], k)[0]


def build_index(cloud, threads: int | None = None) -> KnnIndex:
    """Build a :class:`KnnIndex` over a :class:`PointCloud` or an (n, 3) array."""
    points = cloud.points if isinstance(cloud, PointCloud) else cloud
    return KnnIndex(points, threads=threads)


def query_knn(index: KnnIndex, point_index: int, k: int) -> np.ndarray:
    """Indices of the k nearest points to ``points[point_index]``, self first."""
    return index.query(point_index, k)


def brute_force_knn(points, point_index: int, k: int) -> np.ndarray:
    """Reference answer by scanning every point."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    return _rank_candidates(pts, point_index, np.arange(n), k)
