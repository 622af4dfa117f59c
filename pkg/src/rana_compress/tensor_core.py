"""
Dense linear algebra substrate: validated float64 matrices and vectors, products,
thin SVD, order-statistic thresholds and seeded random generators.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The helpers here
validate them once at the boundary so the rest of the toolkit can assume
finite, correctly shaped inputs.
"""

import sys
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import NonFiniteError, ShapeMismatchError, SvdConvergenceError

# Singular values below this fraction of the largest are treated as zero
DEFAULT_RANK_CUTOFF = 1e-12

# The Gram (eigendecomposition) path squares the condition number, so it is only
# used while the estimated condition number stays below this limit
GRAM_CONDITION_LIMIT = 1e6

# Short-fat products with at least this many columns per row go through the Gram path
GRAM_ASPECT_RATIO = 4

# q * n products this close (relative) to an integer count as that integer
ORDER_RANK_TOLERANCE = 1e-9


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Returns ``values`` as a finite 2-D float64 array, raising on anything else."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeMismatchError(f"{name} must be a non-empty 2-D array", arr.shape, None)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf entries")
    return arr


def as_vector(values, name: str = "vector", dim: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise ShapeMismatchError(f"{name} must be a non-empty 1-D array", arr.shape, None)
    if dim is not None and arr.shape[0] != dim:
        raise ShapeMismatchError(f"{name} has the wrong length", arr.shape, (dim,))
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf entries")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix (or matrix-vector) product with an explicit shape check."""
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError("matmul inner dimensions differ", a.shape, b.shape)
    return np.matmul(a, b)


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # o x p, orthonormal columns
    s: np.ndarray  # p singular values, descending
    vt: np.ndarray  # p x k, orthonormal rows

    @property
    def rank_count(self) -> int:
        return int(self.s.shape[0])

    def truncate(self, r: int) -> "SvdResult":
        return SvdResult(u=self.u[:, :r], s=self.s[:r], vt=self.vt[:r, :])

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def _sign_convention(u: np.ndarray, vt: Optional[np.ndarray] = None):
    """Flips columns of ``u`` so their first nonzero component is nonnegative."""
    u = u.copy()
    vt = vt.copy() if vt is not None else None
    tiny = np.finfo(np.float64).eps
    for j in range(u.shape[1]):
        col = u[:, j]
        nonzero = np.flatnonzero(np.abs(col) > tiny)
        if nonzero.size and col[nonzero[0]] < 0:
            u[:, j] = -col
            if vt is not None:
                vt[j, :] = -vt[j, :]
    return u, vt


def thin_svd(m: np.ndarray) -> SvdResult:
    """
    Thin SVD via LAPACK. ``gesdd`` is tried first and ``gesvd`` (slower, more robust)
    as a fallback; if both fail to converge the attempt count is reported.
    """
    m = as_matrix(m)
    attempts = 0
    for driver in ("gesdd", "gesvd"):
        attempts += 1
        try:
            u, s, vt = scipy.linalg.svd(m, full_matrices=False, lapack_driver=driver)
        except np.linalg.LinAlgError:
            print(f"Warning: SVD driver '{driver}' did not converge, retrying", file=sys.stderr)
            continue
        u, vt = _sign_convention(u, vt)
        return SvdResult(u=u, s=np.maximum(s, 0.0), vt=vt)
    raise SvdConvergenceError("thin SVD did not converge", attempts)


def left_singular_vectors(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Returns ``(U, S)`` of ``m`` without materialising the right singular vectors.

    For short-fat matrices (calibration products are o x k with k >> o) the
    eigendecomposition of the o x o Gram matrix ``m mᵀ`` is used instead of a full
    SVD. That squares the condition number, so it is only trusted while the
    condition estimate stays below ``GRAM_CONDITION_LIMIT``; otherwise the thin SVD
    is computed.
    """
    m = as_matrix(m)
    rows, cols = m.shape
    if cols >= GRAM_ASPECT_RATIO * rows:
        gram = m @ m.T
        evals, evecs = scipy.linalg.eigh(gram)
        order = np.argsort(evals)[::-1]
        evals = np.maximum(evals[order], 0.0)
        s = np.sqrt(evals)
        if s[0] > 0 and s[-1] > 0 and s[0] / s[-1] < GRAM_CONDITION_LIMIT:
            u, _ = _sign_convention(evecs[:, order])
            return u, s
        # rank deficient or ill-conditioned: trailing Gram eigenvalues are noise
    result = thin_svd(m)
    return result.u, result.s


def numerical_rank(s: np.ndarray, cutoff: float = DEFAULT_RANK_CUTOFF) -> int:
    if s.size == 0 or s[0] <= 0:
        return 0
    return int(np.count_nonzero(s >= cutoff * s[0]))


def quantile(values: Sequence[float], q: float) -> float:
    """
    Lower order-statistic quantile: the smallest element ``v`` such that the
    fraction of elements ``<= v`` is at least ``q``. No interpolation.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("quantile of an empty array")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("quantile input contains NaN or Inf entries")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile level {q} outside [0, 1]")
    n = arr.size
    index = min(max(_order_rank(q * n) - 1, 0), n - 1)
    return float(np.partition(arr, index)[index])


def _order_rank(position: float) -> int:
    """``ceil(position)``, treating values within rounding noise of an integer as that integer."""
    nearest = round(position)
    if abs(position - nearest) <= ORDER_RANK_TOLERANCE * max(1.0, abs(position)):
        return int(nearest)
    return int(np.ceil(position))


def keep_threshold(values: np.ndarray, keep_fraction: float) -> float:
    """
    Threshold ``t`` such that ``values >= t`` keeps ``round(keep_fraction * n)``
    entries (more only when there are ties at ``t``). Keeping nothing returns the
    next float above the maximum.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("cannot calibrate a threshold on an empty array")
    n = arr.size
    keep = _nearest_count(keep_fraction * n)
    if keep <= 0:
        return float(np.nextafter(arr.max(), np.inf))
    if keep >= n:
        return float(arr.min())
    return float(np.partition(arr, n - keep)[n - keep])


def _nearest_count(position: float) -> int:
    """Round half up, with the same tolerance for products that should be exact."""
    shifted = position + 0.5
    nearest = round(shifted)
    if abs(shifted - nearest) <= ORDER_RANK_TOLERANCE * max(1.0, abs(shifted)):
        return int(nearest)
    return int(np.floor(shifted))
