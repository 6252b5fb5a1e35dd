"""Symmetric 3x3 eigen-decomposition by cyclic Jacobi rotations.

The covariance matrices handled here are symmetric positive semi-definite, so
their SVD coincides with the eigen-decomposition.
"""
import numba as nb
import numpy as np

_MAX_SWEEPS = 32


@nb.njit(cache=True, nogil=True)
def eigh3_into(a00, a01, a02, a11, a12, a22, w, v):
    """Eigen-decompose a symmetric 3x3 matrix into preallocated outputs.

    ``w`` (3,) receives eigenvalues in descending order, ``v`` (3, 3) the
    matching unit eigenvectors as columns.
    """
    a = np.empty((3, 3))
    a[0, 0] = a00
    a[0, 1] = a01
    a[0, 2] = a02
    a[1, 0] = a01
    a[1, 1] = a11
    a[1, 2] = a12
    a[2, 0] = a02
    a[2, 1] = a12
    a[2, 2] = a22
    for i in range(3):
        for j in range(3):
            v[i, j] = 1.0 if i == j else 0.0

    for _ in range(_MAX_SWEEPS):
        off = a[0, 1] * a[0, 1] + a[0, 2] * a[0, 2] + a[1, 2] * a[1, 2]
        diag = a[0, 0] * a[0, 0] + a[1, 1] * a[1, 1] + a[2, 2] * a[2, 2]
        if off <= 1e-34 * diag or off == 0.0:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if apq == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            if abs(theta) > 1e150:
                t = 0.5 / theta
            else:
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            r = 3 - p - q
            arp = a[r, p]
            arq = a[r, q]
            a[p, p] -= t * apq
            a[q, q] += t * apq
            a[p, q] = 0.0
            a[q, p] = 0.0
            a[r, p] = c * arp - s * arq
            a[p, r] = a[r, p]
            a[r, q] = s * arp + c * arq
            a[q, r] = a[r, q]
            for k in range(3):
                vkp = v[k, p]
                vkq = v[k, q]
                v[k, p] = c * vkp - s * vkq
                v[k, q] = s * vkp + c * vkq

    d0 = a[0, 0]
    d1 = a[1, 1]
    d2 = a[2, 2]
    # descending order by a three-element sorting network
    i0, i1, i2 = 0, 1, 2
    if d0 < d1:
        d0, d1 = d1, d0
        i0, i1 = i1, i0
    if d1 < d2:
        d1, d2 = d2, d1
        i1, i2 = i2, i1
    if d0 < d1:
        d0, d1 = d1, d0
        i0, i1 = i1, i0
    w[0] = d0
    w[1] = d1
    w[2] = d2
    vv = v.copy()
    for k in range(3):
        v[k, 0] = vv[k, i0]
        v[k, 1] = vv[k, i1]
        v[k, 2] = vv[k, i2]


def sym_eig3(matrix):
    """Eigenvalues (descending) and column eigenvectors of a symmetric 3x3 matrix."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {m.shape}")
    w = np.empty(3)
    v = np.empty((3, 3))
    eigh3_into(m[0, 0], 0.5 * (m[0, 1] + m[1, 0]), 0.5 * (m[0, 2] + m[2, 0]),
               m[1, 1], 0.5 * (m[1, 2] + m[2, 1]), m[2, 2], w, v)
    return w, v


@nb.njit(cache=True, nogil=True)
def _batch_eigvals(cov, out):
    w = np.empty(3)
    v = np.empty((3, 3))
    for i in range(cov.shape[0]):
        c = cov[i]
        eigh3_into(c[0, 0], c[0, 1], c[0, 2], c[1, 1], c[1, 2], c[2, 2], w, v)
        out[i, 0] = w[0]
        out[i, 1] = w[1]
        out[i, 2] = w[2]


def sym_eigvals3(covs):
    """Descending eigenvalues for a stack of symmetric 3x3 matrices (..., 3, 3)."""
    c = np.ascontiguousarray(covs, dtype=np.float64)
    flat = c.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 3))
    _batch_eigvals(flat, out)
    return out.reshape(c.shape[:-2] + (3,))
