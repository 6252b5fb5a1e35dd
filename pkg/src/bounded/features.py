"""Multi-scale neighborhood statistics.

For every point and every neighborhood size ``k`` twelve values are computed:

====  ==========================================================
0-2   descending covariance eigenvalues of the upper subset
3-5   descending covariance eigenvalues of the lower subset
6, 7  normal / tangential offset between the subset centroids
8, 9  normal / tangential offset of the point from the centroid
10,11 normal / tangential offset between the scale-``k`` centroid
      and the centroid of the remaining largest-scale points
====  ==========================================================

Columns 0-9 live in the neighborhood's own normalized frame (centered at the
centroid and scaled by ``2 / (sqrt(s1) + sqrt(s2))``). Columns 10-11 use the
largest scale's normal and scale factor and are zero on the largest scale.

The per-neighborhood functions below are the readable reference; the
compiled kernel behind :func:`extract_features` implements the same steps for
whole clouds.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numba as nb
import numpy as np

from .io import PointCloud, atomic_write_bytes
from .knn import KnnIndex, build_index, default_threads
from .linalg import eigh3_into, sym_eig3

if "NUMBA_THREADING_LAYER" not in os.environ:
    nb.config.THREADING_LAYER = "workqueue"

N_COLUMNS = 12
DEFAULT_SCALES = (128, 64, 32, 16)
SIGN_TOL = 1e-12
RANK_TOL = 1e-12

COLUMN_NAMES = (
    "sigma_upper_1", "sigma_upper_2", "sigma_upper_3",
    "sigma_lower_1", "sigma_lower_2", "sigma_lower_3",
    "d_perp", "d_par", "s_perp", "s_par", "c_perp", "c_par",
)

_GROUPS = {
    "sigma": (0, 1, 2, 3, 4, 5),
    "d": (6, 7),
    "s": (8, 9),
    "c": (10, 11),
}


def _bits(*groups: str) -> int:
    return sum(1 << c for g in groups for c in _GROUPS[g])


FULL_MASK = (1 << N_COLUMNS) - 1

# Feature subsets expressible over the 12 columns (ablation presets).
NAMED_MASKS = {
    "full": FULL_MASK,
    "no-sigma": _bits("d", "s", "c"),
    "sigma": _bits("sigma"),
    "sigma-s": _bits("sigma", "s"),
    "sigma-d-s": _bits("sigma", "d", "s"),
    "sigma-d-c": _bits("sigma", "d", "c"),
    "sigma-s-c": _bits("sigma", "s", "c"),
}


def parse_mask(spec) -> int:
    """Turn a preset name, a comma list of groups (``"sigma,d,s"``) or an int into a bitfield."""
    if isinstance(spec, (int, np.integer)):
        mask = int(spec)
    else:
        text = str(spec).strip().lower()
        if text in NAMED_MASKS:
            mask = NAMED_MASKS[text]
        elif text.startswith("0x"):
            mask = int(text, 16)
        else:
            parts = [p.strip() for p in text.split(",") if p.strip()]
            unknown = [p for p in parts if p not in _GROUPS]
            if not parts or unknown:
                raise ValueError(
                    f"unknown feature mask {spec!r}; use one of {sorted(NAMED_MASKS)} "
                    f"or a comma list of {sorted(_GROUPS)}")
            mask = _bits(*parts)
    if not 0 < mask <= FULL_MASK:
        raise ValueError(f"feature mask must select 1..12 columns, got {mask:#x}")
    return mask


def mask_columns(mask: int) -> np.ndarray:
    return np.array([(mask >> c) & 1 == 1 for c in range(N_COLUMNS)])


@dataclass(frozen=True)
class ScaleConfig:
    """Neighborhood sizes (strictly descending, each >= 4) and a column mask."""

    scales: tuple = DEFAULT_SCALES
    feature_mask: int = FULL_MASK

    def __post_init__(self):
        scales = tuple(int(s) for s in self.scales)
        if not scales:
            raise ValueError("at least one scale is required")
        if any(s < 4 for s in scales):
            raise ValueError("every scale must be >= 4")
        if any(a <= b for a, b in zip(scales, scales[1:])):
            raise ValueError(f"scales must be strictly descending, got {scales}")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "feature_mask", parse_mask(self.feature_mask))

    @property
    def max_scale(self) -> int:
        return self.scales[0]


def parse_scales(text: str) -> tuple:
    return tuple(int(t) for t in str(text).replace(" ", "").split(",") if t)


# --------------------------------------------------------------------------
# Per-neighborhood reference operations
# --------------------------------------------------------------------------

@dataclass
class NeighborhoodFrame:
    centroid: np.ndarray
    sigma: np.ndarray
    normal: np.ndarray
    scale_factor: float
    degenerate: bool = False


class ScaleStats(NamedTuple):
    sigma_upper: np.ndarray
    sigma_lower: np.ndarray
    d_perp: float
    d_par: float
    s_perp: float
    s_par: float
    c_perp: float
    c_par: float

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.sigma_upper, self.sigma_lower,
                               [self.d_perp, self.d_par, self.s_perp, self.s_par,
                                self.c_perp, self.c_par]])


def _population_cov(points):
    centered = points - points.mean(axis=0)
    return centered.T @ centered / len(points)


def _half_nearest_to(points, center, indices):
    """Rows of the floor(k/2) points closest to ``center``, ties by point index."""
    diff = points - center
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((indices, d2))
    return np.sort(order[: len(points) // 2])


def _canonical_sign(normal, offset):
    t = float(offset @ normal)
    if abs(t) <= SIGN_TOL:
        j = int(np.argmax(np.abs(normal)))
        return normal if normal[j] > 0 else -normal
    return normal if t > 0 else -normal


def neighborhood_frame(points, query=None, indices=None) -> NeighborhoodFrame:
    """Centroid, covariance eigenvalues, plane normal and scale factor of one neighborhood.

    ``points`` is (k, 3) with the query point first unless ``query`` is
    given. ``indices`` are the global point indices used to break distance
    ties when picking the floor(k/2) points nearest the centroid that define
    the normal.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 4:
        raise ValueError("a neighborhood needs at least 4 points of shape (k, 3)")
    query = pts[0] if query is None else np.asarray(query, dtype=np.float64)
    indices = np.arange(len(pts)) if indices is None else np.asarray(indices)
    centroid = pts.mean(axis=0)
    sigma, _ = sym_eig3(_population_cov(pts))
    sigma = np.maximum(sigma, 0.0)
    denom = np.sqrt(sigma[0]) + np.sqrt(sigma[1])
    with np.errstate(divide="ignore", over="ignore"):
        factor = 2.0 / denom if denom > 0 else np.inf
    if not np.isfinite(factor):
        return NeighborhoodFrame(centroid, sigma, np.array([0.0, 0.0, 1.0]), 0.0, degenerate=True)
    half = pts[_half_nearest_to(pts, centroid, indices)]
    half_sigma, vecs = sym_eig3(_population_cov(half))
    if half_sigma[1] <= RANK_TOL * half_sigma[0]:
        # collinear or coincident half set: its normal is undetermined
        _, vecs = sym_eig3(_population_cov(pts))
    normal = vecs[:, 2] / np.linalg.norm(vecs[:, 2])
    normal = _canonical_sign(normal, factor * (query - centroid))
    return NeighborhoodFrame(centroid, sigma, normal, float(factor))


def normalize_neighborhood(points, frame: NeighborhoodFrame) -> np.ndarray:
    """Map each point p to scale_factor * (p - centroid)."""
    if frame.degenerate:
        raise ValueError("cannot normalize a degenerate neighborhood")
    return frame.scale_factor * (np.asarray(points, dtype=np.float64) - frame.centroid)


def partition_by_plane(normalized, normal):
    """Split into (upper, lower) by the sign of <p, n>; zero goes to upper."""
    pts = np.asarray(normalized, dtype=np.float64)
    side = pts @ np.asarray(normal, dtype=np.float64) >= 0.0
    return pts[side], pts[~side]


def _subset_moments(subset):
    if len(subset) < 2:
        return np.zeros(3), np.zeros(3)
    sig, _ = sym_eig3(_population_cov(subset))
    return subset.mean(axis=0), np.maximum(sig, 0.0)


def subset_stats(upper, lower, normal):
    """Eigenvalues of both subsets plus the normal / tangential centroid offset.

    A subset with fewer than two points contributes zero eigenvalues and a
    centroid at the origin.
    """
    n = np.asarray(normal, dtype=np.float64)
    cu, su = _subset_moments(np.asarray(upper, dtype=np.float64).reshape(-1, 3))
    cl, sl = _subset_moments(np.asarray(lower, dtype=np.float64).reshape(-1, 3))
    d = cu - cl
    d_perp = float(d @ n)
    d_par = float(np.linalg.norm(d - d_perp * n))
    return su, sl, d_perp, d_par


def self_offset(point, frame: NeighborhoodFrame):
    """(s_perp, s_par) of a point relative to its neighborhood, in normalized units."""
    if frame.degenerate:
        raise ValueError("degenerate neighborhood")
    s = frame.scale_factor * (np.asarray(point, dtype=np.float64) - frame.centroid)
    s_perp = float(s @ frame.normal)
    return s_perp, float(np.linalg.norm(s - s_perp * frame.normal))


def cross_scale_offset(neighborhood, k: int, frame_k0: NeighborhoodFrame):
    """(c_perp, c_par) between the first ``k`` points and the rest of ``neighborhood``.

    ``neighborhood`` is the largest-scale k-NN list in order, so its first
    ``k`` rows are the scale-``k`` neighborhood. The offset is measured in raw
    coordinates, multiplied by the largest scale's factor and decomposed
    against its normal. Returns (0, 0) when nothing is left over.
    """
    pts = np.asarray(neighborhood, dtype=np.float64)
    if k >= len(pts) or frame_k0.degenerate:
        return 0.0, 0.0
    diff = frame_k0.scale_factor * (pts[:k].mean(axis=0) - pts[k:].mean(axis=0))
    c_perp = float(diff @ frame_k0.normal)
    return c_perp, float(np.linalg.norm(diff - c_perp * frame_k0.normal))


def scale_stats(neighborhood, k: int, indices=None, frame_k0: Optional[NeighborhoodFrame] = None) -> ScaleStats:
    """All twelve values for the scale-``k`` prefix of a largest-scale neighborhood.

    Coordinates are taken relative to the query point (row 0) first, as the
    compiled kernel does.
    """
    pts = np.asarray(neighborhood, dtype=np.float64)
    pts = pts - pts[0]
    indices = np.arange(len(pts)) if indices is None else np.asarray(indices)
    frame = neighborhood_frame(pts[:k], indices=indices[:k])
    if frame_k0 is None:
        frame_k0 = frame if k == len(pts) else neighborhood_frame(pts, indices=indices)
    c_perp, c_par = cross_scale_offset(pts, k, frame_k0)
    if frame.degenerate:
        z = np.zeros(3)
        return ScaleStats(z, z, 0.0, 0.0, 0.0, 0.0, c_perp, c_par)
    upper, lower = partition_by_plane(normalize_neighborhood(pts[:k], frame), frame.normal)
    su, sl, d_perp, d_par = subset_stats(upper, lower, frame.normal)
    s_perp, s_par = self_offset(pts[0], frame)
    return ScaleStats(su, sl, d_perp, d_par, s_perp, s_par, c_perp, c_par)


def feature_matrix(neighborhood, scales: Sequence[int] = DEFAULT_SCALES, indices=None) -> np.ndarray:
    """(m, 12) matrix for one point from its largest-scale neighborhood (query first)."""
    pts = np.asarray(neighborhood, dtype=np.float64)
    if len(pts) != scales[0]:
        raise ValueError("neighborhood length must equal the largest scale")
    indices = np.arange(len(pts)) if indices is None else np.asarray(indices)
    local = pts - pts[0]
    frame_k0 = neighborhood_frame(local, indices=indices)
    return np.stack([scale_stats(pts, k, indices, frame_k0).as_array() for k in scales])


# --------------------------------------------------------------------------
# Compiled kernel
# --------------------------------------------------------------------------

@nb.njit(cache=True, nogil=True)
def _subset_eig(local, mask, want, k, f, cx, cy, cz, w, v, centroid_out):
    """Centroid (normalized frame) and eigenvalues of the points where mask == want."""
    cnt = 0
    sx = 0.0
    sy = 0.0
    sz = 0.0
    for j in range(k):
        if mask[j] == want:
            cnt += 1
            sx += f * (local[j, 0] - cx)
            sy += f * (local[j, 1] - cy)
            sz += f * (local[j, 2] - cz)
    if cnt < 2:
        centroid_out[0] = 0.0
        centroid_out[1] = 0.0
        centroid_out[2] = 0.0
        w[0] = 0.0
        w[1] = 0.0
        w[2] = 0.0
        return
    mx = sx / cnt
    my = sy / cnt
    mz = sz / cnt
    xx = 0.0
    xy = 0.0
    xz = 0.0
    yy = 0.0
    yz = 0.0
    zz = 0.0
    for j in range(k):
        if mask[j] == want:
            ax = f * (local[j, 0] - cx) - mx
            ay = f * (local[j, 1] - cy) - my
            az = f * (local[j, 2] - cz) - mz
            xx += ax * ax
            xy += ax * ay
            xz += ax * az
            yy += ay * ay
            yz += ay * az
            zz += az * az
    eigh3_into(xx / cnt, xy / cnt, xz / cnt, yy / cnt, yz / cnt, zz / cnt, w, v)
    for t in range(3):
        if w[t] < 0.0:
            w[t] = 0.0
    centroid_out[0] = mx
    centroid_out[1] = my
    centroid_out[2] = mz


@nb.njit(cache=True, nogil=True)
def _scale_kernel(local, gidx, k, row, frame):
    """Columns 0-9 for the first ``k`` rows of ``local``; fills ``frame``.

    frame layout: [cx, cy, cz, nx, ny, nz, factor, degenerate]
    """
    w = np.empty(3)
    v = np.empty((3, 3))
    cx = 0.0
    cy = 0.0
    cz = 0.0
    for j in range(k):
        cx += local[j, 0]
        cy += local[j, 1]
        cz += local[j, 2]
    cx /= k
    cy /= k
    cz /= k
    xx = 0.0
    xy = 0.0
    xz = 0.0
    yy = 0.0
    yz = 0.0
    zz = 0.0
    d2 = np.empty(k)
    for j in range(k):
        ax = local[j, 0] - cx
        ay = local[j, 1] - cy
        az = local[j, 2] - cz
        xx += ax * ax
        xy += ax * ay
        xz += ax * az
        yy += ay * ay
        yz += ay * az
        zz += az * az
        d2[j] = ax * ax + ay * ay + az * az
    eigh3_into(xx / k, xy / k, xz / k, yy / k, yz / k, zz / k, w, v)
    fnx = v[0, 2]
    fny = v[1, 2]
    fnz = v[2, 2]
    s1 = max(w[0], 0.0)
    s2 = max(w[1], 0.0)
    denom = np.sqrt(s1) + np.sqrt(s2)
    frame[0] = cx
    frame[1] = cy
    frame[2] = cz
    f = 2.0 / denom if denom > 0.0 else np.inf
    if not np.isfinite(f):
        frame[3] = 0.0
        frame[4] = 0.0
        frame[5] = 1.0
        frame[6] = 0.0
        frame[7] = 1.0
        for t in range(10):
            row[t] = 0.0
        return

    # floor(k/2) points nearest the centroid, ties by global index
    h = k // 2
    cut = np.sort(d2)[h - 1]
    n_less = 0
    n_tie = 0
    for j in range(k):
        if d2[j] < cut:
            n_less += 1
        elif d2[j] == cut:
            n_tie += 1
    in_half = np.zeros(k, dtype=np.bool_)
    tie_idx = np.empty(n_tie, dtype=np.int64)
    t = 0
    for j in range(k):
        if d2[j] < cut:
            in_half[j] = True
        elif d2[j] == cut:
            tie_idx[t] = gidx[j]
            t += 1
    idx_cut = np.sort(tie_idx)[h - n_less - 1]
    for j in range(k):
        if d2[j] == cut and gidx[j] <= idx_cut:
            in_half[j] = True

    hx = 0.0
    hy = 0.0
    hz = 0.0
    for j in range(k):
        if in_half[j]:
            hx += local[j, 0]
            hy += local[j, 1]
            hz += local[j, 2]
    hx /= h
    hy /= h
    hz /= h
    xx = 0.0
    xy = 0.0
    xz = 0.0
    yy = 0.0
    yz = 0.0
    zz = 0.0
    for j in range(k):
        if in_half[j]:
            ax = local[j, 0] - hx
            ay = local[j, 1] - hy
            az = local[j, 2] - hz
            xx += ax * ax
            xy += ax * ay
            xz += ax * az
            yy += ay * ay
            yz += ay * az
            zz += az * az
    eigh3_into(xx / h, xy / h, xz / h, yy / h, yz / h, zz / h, w, v)
    if w[1] <= RANK_TOL * w[0]:
        nx = fnx
        ny = fny
        nz = fnz
    else:
        nx = v[0, 2]
        ny = v[1, 2]
        nz = v[2, 2]
    nn = np.sqrt(nx * nx + ny * ny + nz * nz)
    nx /= nn
    ny /= nn
    nz /= nn

    # the query sits at the local origin
    sx = -f * cx
    sy = -f * cy
    sz = -f * cz
    tdot = sx * nx + sy * ny + sz * nz
    flip = False
    if abs(tdot) <= SIGN_TOL:
        ax = abs(nx)
        ay = abs(ny)
        az = abs(nz)
        if ax >= ay and ax >= az:
            flip = nx < 0.0
        elif ay >= az:
            flip = ny < 0.0
        else:
            flip = nz < 0.0
    else:
        flip = tdot < 0.0
    if flip:
        nx = -nx
        ny = -ny
        nz = -nz

    upper = np.empty(k, dtype=np.bool_)
    for j in range(k):
        px = f * (local[j, 0] - cx)
        py = f * (local[j, 1] - cy)
        pz = f * (local[j, 2] - cz)
        upper[j] = px * nx + py * ny + pz * nz >= 0.0

    cu = np.empty(3)
    cl = np.empty(3)
    _subset_eig(local, upper, True, k, f, cx, cy, cz, w, v, cu)
    row[0] = w[0]
    row[1] = w[1]
    row[2] = w[2]
    _subset_eig(local, upper, False, k, f, cx, cy, cz, w, v, cl)
    row[3] = w[0]
    row[4] = w[1]
    row[5] = w[2]
    dx = cu[0] - cl[0]
    dy = cu[1] - cl[1]
    dz = cu[2] - cl[2]
    dp = dx * nx + dy * ny + dz * nz
    tx = dx - dp * nx
    ty = dy - dp * ny
    tz = dz - dp * nz
    row[6] = dp
    row[7] = np.sqrt(tx * tx + ty * ty + tz * tz)
    sp = sx * nx + sy * ny + sz * nz
    tx = sx - sp * nx
    ty = sy - sp * ny
    tz = sz - sp * nz
    row[8] = sp
    row[9] = np.sqrt(tx * tx + ty * ty + tz * tz)

    frame[3] = nx
    frame[4] = ny
    frame[5] = nz
    frame[6] = f
    frame[7] = 0.0


@nb.njit(cache=True, parallel=True)
def _features_kernel(points, queries, nbr, scales, out):
    k0 = nbr.shape[1]
    m = scales.shape[0]
    for r in nb.prange(queries.shape[0]):
        q = queries[r]
        local = np.empty((k0, 3))
        for j in range(k0):
            p = nbr[r, j]
            local[j, 0] = points[p, 0] - points[q, 0]
            local[j, 1] = points[p, 1] - points[q, 1]
            local[j, 2] = points[p, 2] - points[q, 2]
        gidx = nbr[r]
        frame0 = np.empty(8)
        frame = np.empty(8)
        # sums over prefixes, for the cross-scale offsets
        tot = np.zeros(3)
        for j in range(k0):
            tot[0] += local[j, 0]
            tot[1] += local[j, 1]
            tot[2] += local[j, 2]
        for s in range(m):
            k = scales[s]
            row = out[r, s]
            if s == 0:
                _scale_kernel(local, gidx, k, row, frame0)
                row[10] = 0.0
                row[11] = 0.0
                continue
            _scale_kernel(local, gidx, k, row, frame)
            if frame0[7] != 0.0:
                row[10] = 0.0
                row[11] = 0.0
                continue
            ax = 0.0
            ay = 0.0
            az = 0.0
            for j in range(k):
                ax += local[j, 0]
                ay += local[j, 1]
                az += local[j, 2]
            rest = k0 - k
            f0 = frame0[6]
            dx = f0 * (ax / k - (tot[0] - ax) / rest)
            dy = f0 * (ay / k - (tot[1] - ay) / rest)
            dz = f0 * (az / k - (tot[2] - az) / rest)
            cp = dx * frame0[3] + dy * frame0[4] + dz * frame0[5]
            tx = dx - cp * frame0[3]
            ty = dy - cp * frame0[4]
            tz = dz - cp * frame0[5]
            row[10] = cp
            row[11] = np.sqrt(tx * tx + ty * ty + tz * tz)


def _set_threads(threads: int) -> None:
    nb.set_num_threads(max(1, min(int(threads), nb.config.NUMBA_NUM_THREADS)))


def extract_features(cloud, config: ScaleConfig | None = None, *, index: KnnIndex | None = None,
                     indices=None, threads: int | None = None, chunk_size: int = 32768,
                     dtype=np.float64) -> np.ndarray:
    """Per-point (m, 12) feature matrices for a whole cloud, shape (n, m, 12).

    Rows run from the largest scale to the smallest. Columns excluded by the
    config's mask are zero. ``indices`` restricts the computation to a subset
    of query points (rows follow that order).
    """
    config = config or ScaleConfig()
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(points)
    if n < config.max_scale:
        raise ValueError(f"cloud has {n} points but the largest scale is {config.max_scale}")
    threads = threads or default_threads()
    _set_threads(threads)
    if index is None:
        index = build_index(points, threads=threads)
    queries = np.arange(n, dtype=np.int64) if indices is None else np.asarray(indices, dtype=np.int64)
    scales = np.asarray(config.scales, dtype=np.int64)
    out = np.empty((len(queries), len(scales), N_COLUMNS), dtype=dtype)
    buf = np.empty((min(chunk_size, max(len(queries), 1)), len(scales), N_COLUMNS))
    pts = np.ascontiguousarray(points, dtype=np.float64)
    for start in range(0, len(queries), chunk_size):
        q = queries[start:start + chunk_size]
        nbr = index.neighbors(q, config.max_scale)
        chunk = buf[: len(q)]
        _features_kernel(pts, q, nbr, scales, chunk)
        out[start:start + len(q)] = chunk
    if config.feature_mask != FULL_MASK:
        out[..., ~mask_columns(config.feature_mask)] = 0.0
    return out


# --------------------------------------------------------------------------
# Feature file ("BNDF")
# --------------------------------------------------------------------------

FEATURE_MAGIC = b"BNDF"
FEATURE_VERSION = 1


@dataclass
class FeatureFile:
    features: np.ndarray          # (n, m, 12) float32
    scales: tuple
    feature_mask: int
    labels: Optional[np.ndarray] = field(default=None)


def write_features(path, features, scales, feature_mask: int = FULL_MASK) -> None:
    """Serialize features as little-endian float32 after a small header."""
    feats = np.asarray(features)
    n, m, c = feats.shape
    if c != N_COLUMNS or m != len(scales):
        raise ValueError(f"features must be (n, {len(scales)}, {N_COLUMNS}), got {feats.shape}")
    header = FEATURE_MAGIC + struct.pack("<IQI", FEATURE_VERSION, n, m)
    header += struct.pack(f"<{m}I", *scales) + struct.pack("<H", feature_mask)
    atomic_write_bytes(path, header + feats.astype("<f4").tobytes())


def read_features(path) -> FeatureFile:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic)")
    if len(data) < 20:
        raise ValueError(f"{path}: truncated feature header")
    version, n, m = struct.unpack_from("<IQI", data, 4)
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature file version {version}")
    pos = 20
    if len(data) < pos + 4 * m + 2:
        raise ValueError(f"{path}: truncated feature header")
    scales = struct.unpack_from(f"<{m}I", data, pos)
    pos += 4 * m
    (mask,) = struct.unpack_from("<H", data, pos)
    pos += 2
    expected = n * m * N_COLUMNS * 4
    if len(data) - pos != expected:
        raise ValueError(f"{path}: expected {expected} bytes of feature data, found {len(data) - pos}")
    feats = np.frombuffer(data, dtype="<f4", offset=pos).reshape(n, m, N_COLUMNS).copy()
    return FeatureFile(feats, tuple(scales), int(mask))
