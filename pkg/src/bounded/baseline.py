"""Covariance-analysis (CA) baseline for sharp-edge detection.

Each point gets the surface-variation ratio ``s3 / (s1 + s2 + s3)`` of its
k-NN covariance eigenvalues; points above a threshold are called sharp edges.
The ratio lies in [0, 1/3]: 0 on a perfect plane, 1/3 for isotropic spread.
Boundary points are never predicted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import NON_EDGE, SHARP_EDGE, PointCloud
from .knn import KnnIndex, build_index
from .linalg import sym_eigvals3

# thresholds tuned for two reference datasets (hand-labeled scans, CAD models)
THRESHOLD_PRESETS = {"default": 0.025, "abc": 0.08}
DEFAULT_K = 64


@dataclass(frozen=True)
class CaConfig:
    k: int = DEFAULT_K
    threshold: float = THRESHOLD_PRESETS["default"]

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 4:
            raise ValueError(f"k must be an integer >= 4, got {self.k}")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


def surface_variation(cloud, k: int = DEFAULT_K, *, index: KnnIndex | None = None,
                      chunk_size: int = 16384) -> np.ndarray:
    """Per-point ratio of the smallest covariance eigenvalue to their sum."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(points)
    if n < k:
        raise ValueError(f"cloud has {n} points, fewer than k={k}")
    index = index or build_index(points)
    ratio = np.empty(n)
    for start in range(0, n, chunk_size):
        q = np.arange(start, min(start + chunk_size, n))
        nbr = index.neighbors(q, k)
        local = points[nbr] - points[q][:, None, :]
        local -= local.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", local, local) / k
        w = np.clip(sym_eigvals3(cov), 0.0, None)
        total = w.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio[q] = np.where(total > 0, w[:, 2] / total, 0.0)
    return ratio


def ca_classify(cloud, config: CaConfig | None = None, *, index: KnnIndex | None = None,
                ratio: np.ndarray | None = None) -> np.ndarray:
    """Binary per-point labels: SHARP_EDGE where the ratio exceeds the threshold.

    A precomputed ``ratio`` skips the neighborhood pass, which is handy for
    threshold sweeps.
    """
    config = config or CaConfig()
    if ratio is None:
        ratio = surface_variation(cloud, config.k, index=index)
    return np.where(np.asarray(ratio) > config.threshold, SHARP_EDGE, NON_EDGE).astype(np.uint8)
