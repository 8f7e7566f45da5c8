"""Dense linear-algebra substrate shared by the losses, the covariance bank and the oracle.

Vectors are plain float64 numpy arrays. Symmetric matrices are wrapped in
:class:`SymMatrix`, which keeps exact symmetry by mirroring one triangle and
supports a diagonal-only mode where off-diagonal entries are never stored.
"""
from __future__ import annotations

from typing import Sequence, Union

import numpy as np

FULL = "full"
DIAGONAL = "diagonal"


class SymMatrix:
    """Immutable symmetric matrix, stored dense (full) or as its diagonal."""

    __slots__ = ("_data", "mode", "dim")

    def __init__(self, data, mode: str = FULL):
        arr = np.array(data, dtype=np.float64)
        if mode == FULL:
            if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
                raise ValueError(f"full SymMatrix needs a square array, got shape {arr.shape}")
            # the lower triangle defines the matrix
            arr = np.tril(arr) + np.tril(arr, -1).T
        elif mode == DIAGONAL:
            if arr.ndim == 2:
                arr = np.diag(arr).copy()
            if arr.ndim != 1:
                raise ValueError(f"diagonal SymMatrix needs a vector, got shape {arr.shape}")
        else:
            raise ValueError(f"unknown mode {mode!r}")
        if arr.size == 0:
            raise ValueError("SymMatrix dimension must be positive")
        if not np.all(np.isfinite(arr)):
            raise ValueError("SymMatrix entries must be finite")
        arr.setflags(write=False)
        self._data = arr
        self.mode = mode
        self.dim = arr.shape[0]

    @classmethod
    def zeros(cls, dim: int, mode: str = FULL) -> "SymMatrix":
        shape = (dim, dim) if mode == FULL else (dim,)
        return cls(np.zeros(shape), mode)

    @classmethod
    def identity(cls, dim: int, mode: str = FULL) -> "SymMatrix":
        return cls(np.eye(dim) if mode == FULL else np.ones(dim), mode)

    @property
    def is_diagonal(self) -> bool:
        return self.mode == DIAGONAL

    @property
    def diag(self) -> np.ndarray:
        return self._data if self.is_diagonal else np.diag(self._data)

    def dense(self) -> np.ndarray:
        """Return a writable dense copy."""
        return np.diag(self._data) if self.is_diagonal else self._data.copy()

    def trace(self) -> float:
        return float(np.sum(self.diag))

    def right_multiply(self, rows: np.ndarray) -> np.ndarray:
        """Return ``rows @ S`` for a stack of row vectors (``S`` is symmetric)."""
        if self.is_diagonal:
            return rows * self._data
        return rows @ self._data

    def __repr__(self) -> str:
        return f"SymMatrix(dim={self.dim}, mode={self.mode!r})"


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-d array, got shape {arr.shape}")
    return arr


def quadratic_form(u, S: SymMatrix, v) -> float:
    """Return ``u^T S v``; O(f) when ``S`` is diagonal."""
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    if not (u.shape[0] == v.shape[0] == S.dim):
        raise ValueError(f"dimension mismatch: u={u.shape[0]}, S={S.dim}, v={v.shape[0]}")
    if S.is_diagonal:
        return float(np.sum(u * S.diag * v))
    return float(u @ S._data @ v)


def auto_jitter(S: SymMatrix) -> float:
    return 1e-9 * S.trace() / S.dim


def cholesky(S: SymMatrix, jitter: Union[float, str] = 0.0) -> np.ndarray:
    """Lower-triangular ``L`` with ``L L^T = S + jitter * I``.

    ``jitter="auto"`` uses ``1e-9 * trace(S) / dim``. Diagonal matrices get
    elementwise square roots. Raises ``np.linalg.LinAlgError`` naming the first
    non-positive pivot.
    """
    if isinstance(jitter, str):
        if jitter != "auto":
            raise ValueError(f"jitter must be a number or 'auto', got {jitter!r}")
        jitter = auto_jitter(S)
    if jitter < 0:
        raise ValueError("jitter must be non-negative")

    if S.is_diagonal:
        d = S.diag + jitter
        bad = np.flatnonzero(d <= 0)
        if bad.size:
            raise np.linalg.LinAlgError(
                f"matrix not positive definite: pivot {int(bad[0])} is {d[bad[0]]!r}")
        return np.diag(np.sqrt(d))

    A = S.dense()
    A[np.diag_indices_from(A)] += jitter
    n = S.dim
    L = np.zeros_like(A)
    for j in range(n):
        pivot = A[j, j] - L[j, :j] @ L[j, :j]
        if not pivot > 0:
            raise np.linalg.LinAlgError(
                f"matrix not positive definite: pivot {j} is {pivot!r}")
        L[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            L[j + 1:, j] = (A[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def log_sum_exp(xs: Sequence[float]) -> float:
    """Numerically stable ``log(sum(exp(xs)))``."""
    arr = np.asarray(xs, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    m = np.max(arr)
    return float(m + np.log(np.sum(np.exp(arr - m))))


def log_sum_exp_rows(X: np.ndarray) -> np.ndarray:
    """Row-wise stable log-sum-exp of a 2-d array."""
    m = np.max(X, axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(X - m), axis=1, keepdims=True)))[:, 0]


def softmax_rows(X: np.ndarray) -> np.ndarray:
    Z = np.exp(X - np.max(X, axis=1, keepdims=True))
    return Z / np.sum(Z, axis=1, keepdims=True)
