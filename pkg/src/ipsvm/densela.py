"""Small dense kernels for the m x m side of the solver.

Symmetric matrices are kept in LAPACK packed lower storage (column-major), so the
packed vector is exactly ``A[np.triu_indices(m)]`` of the full matrix.  Factoring
and solving go through LAPACK ``dpptrf``/``dpptrs`` on that storage.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.linalg import blas, lapack

__all__ = [
    "NotPositiveDefinite",
    "SymMatrix",
    "packed_size",
    "syrk_accumulate",
    "syrk_block",
    "rank1_downdate",
    "cholesky_solve",
]

_RESIDUAL_RTOL = 1e-10


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a Cholesky pivot is not strictly positive."""


def packed_size(m: int) -> int:
    return m * (m + 1) // 2


@lru_cache(maxsize=32)
def _pack_index(m: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(m)


def _as_vec(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


class SymMatrix:
    """Symmetric m x m matrix in packed lower-triangle storage."""

    __slots__ = ("order", "packed", "_factor")

    def __init__(self, order: int, packed=None):
        if order < 0:
            raise ValueError("order must be non-negative")
        self.order = int(order)
        if packed is None:
            self.packed = np.zeros(packed_size(order))
        else:
            p = np.array(packed, dtype=np.float64)
            if p.shape != (packed_size(order),):
                raise ValueError(
                    f"packed storage for order {order} needs {packed_size(order)} entries, got {p.shape}"
                )
            if not np.all(np.isfinite(p)):
                raise ValueError("SymMatrix entries must be finite")
            self.packed = p
        self._factor = None

    @classmethod
    def zeros(cls, m: int) -> SymMatrix:
        return cls(m)

    @classmethod
    def identity(cls, m: int) -> SymMatrix:
        return cls.from_dense(np.eye(m))

    @classmethod
    def from_dense(cls, a) -> SymMatrix:
        """Build from a full matrix; only the lower triangle is read."""
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        r, c = _pack_index(a.shape[0])
        return cls(a.shape[0], a[c, r])

    def to_dense(self) -> np.ndarray:
        m = self.order
        r, c = _pack_index(m)
        out = np.empty((m, m))
        out[c, r] = self.packed
        out[r, c] = self.packed
        return out

    def copy(self) -> SymMatrix:
        return SymMatrix(self.order, self.packed)

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.order,):
            raise ValueError(f"dimension mismatch: matrix order {self.order}, vector {x.shape}")
        if self.order == 0:
            return np.zeros(0)
        return blas.dspmv(self.order, 1.0, self.packed, x, lower=1)

    def add_identity(self, scale: float = 1.0) -> SymMatrix:
        m = self.order
        # diagonal offsets of column-major packed lower storage
        diag = np.cumsum(np.r_[0, np.arange(m, 1, -1)]) if m else np.zeros(0, dtype=int)
        self.packed[diag] += scale
        self._factor = None
        return self

    def __iadd__(self, other: SymMatrix) -> SymMatrix:
        if other.order != self.order:
            raise ValueError(f"dimension mismatch: {self.order} vs {other.order}")
        self.packed += other.packed
        self._factor = None
        return self

    def __eq__(self, other) -> bool:
        if not isinstance(other, SymMatrix):
            return NotImplemented
        return self.order == other.order and np.array_equal(self.packed, other.packed)

    def __repr__(self) -> str:
        return f"SymMatrix(order={self.order})"

    def cholesky(self) -> np.ndarray:
        """Packed lower Cholesky factor, computed once and cached until the next update."""
        if self._factor is None:
            if self.order == 0:
                self._factor = np.zeros(0)
            else:
                factor, info = lapack.dpptrf(self.order, self.packed, lower=1)
                if info > 0:
                    raise NotPositiveDefinite(
                        f"matrix not positive definite (pivot {info} of {self.order})"
                    )
                if info < 0:
                    raise ValueError(f"dpptrf rejected argument {-info}")
                self._factor = factor
        return self._factor


def syrk_accumulate(a: SymMatrix, row, weight: float) -> SymMatrix:
    """In place ``a += weight * row row^T``; returns ``a``."""
    row = _as_vec(row, "row")
    if row.shape[0] != a.order:
        raise ValueError(f"dimension mismatch: matrix order {a.order}, row length {row.shape[0]}")
    if not weight > 0:
        raise ValueError("weight must be positive")
    r, c = _pack_index(a.order)
    a.packed += weight * (row[r] * row[c])
    a._factor = None
    return a


def syrk_block(a: SymMatrix, rows: np.ndarray, weights: np.ndarray) -> SymMatrix:
    """In place ``a += rows^T diag(weights) rows``, the blocked form of ``syrk_accumulate``."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != a.order:
        raise ValueError(f"dimension mismatch: matrix order {a.order}, rows shape {rows.shape}")
    if rows.shape[0] != np.shape(weights)[0]:
        raise ValueError("one weight per row is required")
    if rows.shape[0]:
        gram = (rows * weights[:, None]).T @ rows
        r, c = _pack_index(a.order)
        a.packed += gram[r, c]
        a._factor = None
    return a


def rank1_downdate(a: SymMatrix, u, c: float) -> SymMatrix:
    """In place ``a -= (1/c) u u^T``; returns ``a``."""
    u = _as_vec(u, "u")
    if u.shape[0] != a.order:
        raise ValueError(f"dimension mismatch: matrix order {a.order}, vector length {u.shape[0]}")
    if not c > 0:
        raise ValueError("c must be positive")
    r, cc = _pack_index(a.order)
    a.packed -= (u[r] * u[cc]) / c
    a._factor = None
    return a


def _solve_with_factor(m: int, factor: np.ndarray, b: np.ndarray) -> np.ndarray:
    x, info = lapack.dpptrs(m, factor, b.reshape(-1, 1), lower=1)
    if info != 0:
        raise ValueError(f"dpptrs rejected argument {-info}")
    return x[:, 0]


def cholesky_solve(a: SymMatrix, b) -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive definite ``a``.

    One step of iterative refinement is taken when the residual exceeds
    ``1e-10 * (||a|| ||x|| + ||b||)``.
    """
    b = _as_vec(b, "b")
    m = a.order
    if b.shape[0] != m:
        raise ValueError(f"dimension mismatch: matrix order {m}, rhs length {b.shape[0]}")
    if m == 0:
        return np.zeros(0)
    factor = a.cholesky()
    x = _solve_with_factor(m, factor, b)
    norm_a = np.linalg.norm(a.packed) * np.sqrt(2.0)
    resid = b - a.matvec(x)
    if np.linalg.norm(resid) > _RESIDUAL_RTOL * (norm_a * np.linalg.norm(x) + np.linalg.norm(b)):
        x = x + _solve_with_factor(m, factor, resid)
    return x
