"""Dense kernels shared by every other module.

Matrices are plain 2-D ``numpy.float32`` arrays (row-major, finite). Inner
products accumulate in float64 and are rounded back to float32 once.
"""

import numpy as np

from .exceptions import (
    DegenerateCovarianceError,
    DimensionMismatchError,
    ExactZeroRowError,
    NonFiniteValueError,
)

DEFAULT_EPS = 1e-12


def as_matrix(m, name="matrix", dtype=np.float32):
    """Validate ``m`` as a finite 2-D matrix and return it as ``dtype``.

    Returns the input object itself when it already satisfies the contract,
    so callers must treat the result as read-only.
    """
    arr = np.asarray(m)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 0)
    if arr.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValueError(f"{name} contains NaN or Inf")
    return np.ascontiguousarray(arr)


def unit_rows64(m, eps=DEFAULT_EPS, strict=False):
    """Float64 row normalization without validation; ``m`` must be float64."""
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    if strict and np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ExactZeroRowError(f"row {bad} has zero norm")
    return m / np.maximum(norms, eps)[:, None]


def l2_normalize_rows(m, eps=DEFAULT_EPS, strict=False):
    """Scale every row to unit Euclidean norm as ``row / max(norm, eps)``.

    With ``strict=True`` a row whose norm is exactly zero raises
    :class:`ExactZeroRowError` instead of passing through as zeros.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    src = np.asarray(m)
    dtype = np.float64 if src.dtype == np.float64 else np.float32
    m = as_matrix(src, dtype=dtype)
    return unit_rows64(m.astype(np.float64), eps, strict).astype(dtype)


def _canonical_first(a, b):
    if a.shape[0] != b.shape[0]:
        return a.shape[0] > b.shape[0]
    return a.tobytes() >= b.tobytes()


def dot_scores(a, b):
    """Score every row of ``b`` against every row of ``a``.

    Returns the ``len(b) x len(a)`` block ``out[i, j] = b[i] . a[j]``.
    The product is accumulated in float64 and always evaluated with the
    operands in a canonical order, so ``dot_scores(a, b)`` and the transpose
    of ``dot_scores(b, a)`` are bit-identical.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(
            f"dims differ: a has {a.shape[1]}, b has {b.shape[1]}"
        )
    if _canonical_first(a, b):
        out = (a.astype(np.float64) @ b.astype(np.float64).T).T
    else:
        out = b.astype(np.float64) @ a.astype(np.float64).T
    return np.ascontiguousarray(out.astype(np.float32))


def pca_project_2d(m):
    """Project rows onto the top two principal components.

    The sign of each component is fixed so that its first nonzero loading is
    positive. Raises :class:`DegenerateCovarianceError` when the data has no
    measurable spread at all.
    """
    m = as_matrix(m)
    if m.shape[0] < 3 or m.shape[1] < 2:
        raise DimensionMismatchError("pca_project_2d needs rows >= 3 and dims >= 2")
    centered = m.astype(np.float64)
    centered = centered - centered.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    eigvals = s**2 / (m.shape[0] - 1)
    if eigvals[0] <= 1e-9:
        raise DegenerateCovarianceError("covariance is numerically zero")
    comps = vt[:2].copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return (centered @ comps.T).astype(np.float32)
