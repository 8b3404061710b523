"""Smallest singular values of many small dense matrices.

One-sided (Hestenes) Jacobi applied to the rows of each d x m matrix.  Rows
are rotated pairwise until mutually orthogonal; the singular values are then
the row norms.  Unlike an eigen-solve of A A^T this keeps high relative
accuracy when the rows live on wildly different scales (a row of size 1e-40
next to rows of size 1), which is exactly the situation near a set where
the fields degenerate to infinite order.
"""

from __future__ import annotations

import numpy as np

_EPS = np.finfo(np.float64).eps


def _scaled_norm(rows: np.ndarray) -> np.ndarray:
    # underflow-safe Euclidean norm over the last axis
    scale = np.max(np.abs(rows), axis=-1)
    safe = np.where(scale > 0, scale, 1.0)
    return scale * np.sqrt(np.sum((rows / safe[..., None]) ** 2, axis=-1))


def row_singular_values(mats: np.ndarray, max_sweeps: int = 60) -> np.ndarray:
    """Singular values of each matrix in a (P, d, m) batch, unsorted, shape (P, d).

    If ``m < d`` the surplus values are (numerically) zero.  Matrices with
    non-finite entries yield NaN.
    """
    a = np.array(mats, dtype=np.float64, copy=True)
    if a.ndim == 2:
        a = a[None]
    P, d, m = a.shape
    bad = ~np.all(np.isfinite(a), axis=(1, 2))
    a[bad] = 0.0
    tol = _EPS * max(d, m)
    with np.errstate(all="ignore"):
        for _ in range(max_sweeps):
            rotated = False
            for i in range(d - 1):
                for j in range(i + 1, d):
                    ri, rj = a[:, i, :], a[:, j, :]
                    alpha = np.einsum("pk,pk->p", ri, ri)
                    beta = np.einsum("pk,pk->p", rj, rj)
                    gamma = np.einsum("pk,pk->p", ri, rj)
                    need = np.abs(gamma) > tol * np.sqrt(alpha) * np.sqrt(beta)
                    if not need.any():
                        continue
                    rotated = True
                    idx = np.nonzero(need)[0]
                    al, be, ga = alpha[idx], beta[idx], gamma[idx]
                    zeta = (be - al) / (2.0 * ga)
                    t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                    t = np.where(zeta == 0, 1.0, t)
                    c = 1.0 / np.sqrt(1.0 + t * t)
                    s = c * t
                    xi, xj = ri[idx], rj[idx]
                    a[idx, i, :] = c[:, None] * xi - s[:, None] * xj
                    a[idx, j, :] = s[:, None] * xi + c[:, None] * xj
            if not rotated:
                break
    sv = _scaled_norm(a)
    sv[bad] = np.nan
    return sv


def smallest_singular_value(mats: np.ndarray) -> np.ndarray:
    """sigma_min for each matrix of a (P, d, m) batch, shape (P,)."""
    return np.min(row_singular_values(mats), axis=-1)
