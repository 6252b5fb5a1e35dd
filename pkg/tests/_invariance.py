"""Random neighborhoods and the three geometric invariance checks."""
import numpy as np
from scipy.spatial.transform import Rotation

from bounded.features import (DEFAULT_SCALES, extract_features, neighborhood_frame,
                              normalize_neighborhood, partition_by_plane, subset_stats)
from bounded.knn import build_index

N_POINTS = 400


def random_cloud(rng):
    """A small noisy surface patch: plane, crease, curved sheet or rim."""
    kind = rng.integers(4)
    uv = rng.uniform(-1, 1, (N_POINTS, 2))
    if kind == 0:
        z = 0.02 * rng.standard_normal(N_POINTS)
    elif kind == 1:
        z = np.tan(np.radians(rng.uniform(10, 60))) * np.abs(uv[:, 0]) + 0.01 * rng.standard_normal(N_POINTS)
    elif kind == 2:
        z = rng.uniform(0.2, 1.0) * (uv ** 2).sum(axis=1) + 0.01 * rng.standard_normal(N_POINTS)
    else:
        uv[:, 1] = rng.uniform(0, 1, N_POINTS)
        z = 0.02 * rng.standard_normal(N_POINTS)
    pts = np.column_stack([uv, z]) * rng.uniform(0.5, 2.0, 3)
    return pts, int(np.argmin(np.linalg.norm(pts[:, :2], axis=1)))


def is_nondegenerate(points, q, scales=DEFAULT_SCALES, tol=1e-6):
    """Clear k-th neighbor gaps, no near-tied top eigenvalues, no points near
    the partition plane and a clear self offset, at every scale."""
    d = np.sort(np.linalg.norm(points - points[q], axis=1))
    nbr = build_index(points).query(q, scales[0])
    for k in scales:
        if k < len(d) and d[k] - d[k - 1] < tol * d[k]:
            return False
        local = points[nbr[:k]] - points[q]
        fr = neighborhood_frame(local, indices=nbr[:k])
        if fr.degenerate or fr.sigma[0] - fr.sigma[1] < tol * fr.sigma[0]:
            return False
        dots = normalize_neighborhood(local, fr) @ fr.normal
        if np.min(np.abs(dots)) < tol:
            return False
    return True


def nondegenerate_neighborhoods(rng, count):
    out = []
    while len(out) < count:
        pts, q = random_cloud(rng)
        if is_nondegenerate(pts, q):
            out.append((pts, q))
    return out


def rigid_error(pts, q, rng) -> float:
    R = Rotation.random(random_state=rng).as_matrix()
    t = rng.uniform(-100, 100, 3)
    a = extract_features(pts, indices=[q])
    b = extract_features(pts @ R.T + t, indices=[q])
    return float(np.max(np.abs(a - b)))


def scale_error(pts, q, rng) -> float:
    s = 10.0 ** rng.uniform(-3, 3)
    a = extract_features(pts, indices=[q])
    b = extract_features(pts * s, indices=[q])
    return float(np.max(np.abs(a - b)))


def flip_error(pts, q, scales=DEFAULT_SCALES) -> float:
    nbr = build_index(pts).query(q, scales[0])
    worst = 0.0
    for k in scales:
        local = pts[nbr[:k]] - pts[q]
        fr = neighborhood_frame(local, indices=nbr[:k])
        x = normalize_neighborhood(local, fr)
        d1 = subset_stats(*partition_by_plane(x, fr.normal), fr.normal)[2]
        d2 = subset_stats(*partition_by_plane(x, -fr.normal), -fr.normal)[2]
        worst = max(worst, abs(d1 - d2))
    return worst
