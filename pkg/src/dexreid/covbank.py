"""Streaming per-key mean/covariance estimation.

Each key (a domain id, or a class id for the ISDA variant) keeps a count, a
running mean and a scatter matrix (sum of centred outer products). Batches and
whole banks are combined with the pairwise merge of Chan et al., so any
partition of the data stream yields the same statistics as a single pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import snapshot
from .numerics import DIAGONAL, FULL, SymMatrix

DOMAIN = "domain"
CLASS = "class"


def _mirror_lower(M: np.ndarray) -> np.ndarray:
    """Exactly symmetric copy of a (stack of) square matrices from the lower triangle."""
    low = np.tril(M)
    return low + np.swapaxes(np.tril(M, -1), -1, -2)


@dataclass
class CovarianceBank:
    num_keys: int
    feature_dim: int
    mode: str = FULL
    key_space: str = DOMAIN
    counts: np.ndarray = field(default=None, repr=False)
    means: np.ndarray = field(default=None, repr=False)
    scatter: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.num_keys < 1 or self.feature_dim < 1:
            raise ValueError("num_keys and feature_dim must be positive")
        if self.mode not in (FULL, DIAGONAL):
            raise ValueError(f"unknown bank mode {self.mode!r}")
        if self.key_space not in (DOMAIN, CLASS):
            raise ValueError(f"unknown key space {self.key_space!r}")
        K, f = self.num_keys, self.feature_dim
        if self.counts is None:
            self.counts = np.zeros(K, dtype=np.int64)
        if self.means is None:
            self.means = np.zeros((K, f))
        if self.scatter is None:
            self.scatter = np.zeros((K, f, f) if self.mode == FULL else (K, f))

    @property
    def total_count(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> "CovarianceBank":
        return CovarianceBank(self.num_keys, self.feature_dim, self.mode, self.key_space,
                              self.counts.copy(), self.means.copy(), self.scatter.copy())

    def _check_key(self, key: int) -> None:
        if not 0 <= key < self.num_keys:
            raise IndexError(f"key {key} out of range [0, {self.num_keys})")

    def _merge_key(self, k: int, m: int, mean_b: np.ndarray, scatter_b: np.ndarray) -> None:
        n = int(self.counts[k])
        if m == 0:
            return
        total = n + m
        delta = self.means[k] - mean_b
        if self.mode == FULL:
            corr = np.outer(delta, delta)
        else:
            corr = delta * delta
        self.scatter[k] = self.scatter[k] + scatter_b + (n * m / total) * corr
        self.means[k] = (n * self.means[k] + m * mean_b) / total
        self.counts[k] = total

    def update(self, features, keys) -> "CovarianceBank":
        """Ingest a batch in place and return ``self``."""
        X = np.asarray(features, dtype=np.float64)
        keys = np.asarray(keys)
        if X.ndim != 2 or X.shape[1] != self.feature_dim:
            raise ValueError(f"features must have shape (N, {self.feature_dim}), got {X.shape}")
        if keys.shape != (X.shape[0],):
            raise ValueError("features and keys must have the same length")
        if keys.size and (keys.min() < 0 or keys.max() >= self.num_keys):
            raise IndexError(f"key out of range [0, {self.num_keys})")
        for k in np.unique(keys):
            Xk = X[keys == k]
            mean_b = Xk.mean(axis=0)
            centred = Xk - mean_b
            if self.mode == FULL:
                scatter_b = _mirror_lower(centred.T @ centred)
            else:
                scatter_b = np.sum(centred * centred, axis=0)
            self._merge_key(int(k), Xk.shape[0], mean_b, scatter_b)
        return self

    def covariance(self, key: int) -> SymMatrix:
        """Population covariance; keys with fewer than two samples report zero."""
        self._check_key(key)
        n = int(self.counts[key])
        if n <= 1:
            return SymMatrix.zeros(self.feature_dim, self.mode)
        return SymMatrix(self.scatter[key] / n, self.mode)

    def covariances(self) -> list:
        return [self.covariance(k) for k in range(self.num_keys)]

    def mean(self, key: int) -> np.ndarray:
        self._check_key(key)
        return self.means[key].copy()

    def memory_footprint(self) -> int:
        return memory_footprint(self.num_keys, self.feature_dim, self.mode)

    def stored_scalars(self) -> int:
        """Scalars actually held, counting one triangle of each full scatter matrix."""
        f = self.feature_dim
        per_scatter = f * (f + 1) // 2 if self.mode == FULL else f
        return self.counts.size + self.means.size + self.num_keys * per_scatter

    def compatible_with(self, other: "CovarianceBank") -> bool:
        return (self.num_keys, self.feature_dim, self.mode, self.key_space) == \
            (other.num_keys, other.feature_dim, other.mode, other.key_space)

    # snapshots

    def to_bytes(self) -> bytes:
        meta = {"key_space": self.key_space, "mode": self.mode,
                "num_keys": self.num_keys, "feature_dim": self.feature_dim}
        return snapshot.dumps("covbank", meta, {"counts": self.counts, "means": self.means,
                                                "scatter": self.scatter})

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CovarianceBank":
        meta, arrays = snapshot.loads(blob, "covbank")
        return cls(meta["num_keys"], meta["feature_dim"], meta["mode"], meta["key_space"],
                   arrays["counts"], arrays["means"], arrays["scatter"])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CovarianceBank":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def update_with_batch(bank: CovarianceBank, features, keys) -> CovarianceBank:
    return bank.update(features, keys)


def merge(a: CovarianceBank, b: CovarianceBank) -> CovarianceBank:
    """Combine two banks as if their data had been ingested into one."""
    if not a.compatible_with(b):
        raise ValueError("cannot merge banks with different key space, size, dimension or mode")
    out = a.copy()
    for k in range(a.num_keys):
        out._merge_key(k, int(b.counts[k]), b.means[k], b.scatter[k])
    return out


def memory_footprint(num_keys: int, feature_dim: int, mode: str) -> int:
    """Stored scalars: count, mean and one triangle (or the diagonal) of the scatter."""
    f = feature_dim
    if mode == FULL:
        return num_keys * (f * (f + 1) // 2 + f + 1)
    if mode == DIAGONAL:
        return num_keys * (2 * f + 1)
    raise ValueError(f"unknown bank mode {mode!r}")
