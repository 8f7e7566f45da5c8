"""Independent checks for the implicit losses: explicit sampling and finite differences."""
from __future__ import annotations

from typing import Callable, Tuple

import numpy as np

from .covbank import CovarianceBank
from .losses import ClassifierHead
from .numerics import cholesky, log_sum_exp_rows


def _cholesky_factors(bank: CovarianceBank, keys) -> dict:
    factors = {}
    for k in np.unique(keys):
        S = bank.covariance(int(k))
        # a zero covariance leaves its samples untouched
        factors[int(k)] = None if S.trace() == 0 else cholesky(S, "auto")
    return factors


def explicit_augment(features, domain_keys, bank: CovarianceBank, lam: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Draw ``a_i + sqrt(lam) L_d z`` with ``L_d L_d^T`` the domain covariance (plus auto jitter)."""
    if lam < 0:
        raise ValueError("augmentation strength must be non-negative")
    A = np.asarray(features, dtype=np.float64)
    if lam == 0:
        return A.copy()
    keys = np.asarray(domain_keys)
    factors = _cholesky_factors(bank, keys)
    Z = rng.standard_normal(A.shape)
    out = A.copy()
    for k, L in factors.items():
        if L is None:
            continue
        idx = keys == k
        out[idx] += np.sqrt(lam) * (Z[idx] @ L.T)
    return out


def plain_ce(features, labels, W) -> float:
    """Unsmoothed softmax cross-entropy averaged over the batch."""
    logits = np.asarray(features) @ np.asarray(W).T
    y = np.asarray(labels)
    return float(np.mean(log_sum_exp_rows(logits) - logits[np.arange(len(y)), y]))


def mc_expected_loss(features, labels, domain_keys, head: ClassifierHead, bank: CovarianceBank,
                     lam: float, n_samples: int, rng: np.random.Generator,
                     chunk: int = 2048) -> Tuple[float, float]:
    """Monte-Carlo mean and standard error of the plain softmax loss under explicit augmentation.

    Each replication perturbs the whole batch once. Replications are drawn in
    chunks, in replication order, so the result depends only on the rng state.
    """
    if n_samples < 2:
        raise ValueError("need at least two replications")
    A = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    keys = np.asarray(domain_keys)
    W = head.W
    if lam == 0:
        return plain_ce(A, y, W), 0.0

    N, f = A.shape
    factors = _cholesky_factors(bank, keys)
    # per-sample scaled factor; zero for untouched samples
    Ls = np.zeros((N, f, f))
    for k, L in factors.items():
        if L is not None:
            Ls[keys == k] = np.sqrt(lam) * L
    rows = np.arange(N)
    vals = np.empty(n_samples)
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        Z = rng.standard_normal((m, N, f))
        aug = A[None] + np.einsum("nij,mnj->mni", Ls, Z)
        logits = aug @ W.T                                  # m x N x C
        mx = logits.max(axis=2, keepdims=True)
        lse = mx[..., 0] + np.log(np.exp(logits - mx).sum(axis=2))
        vals[done:done + m] = np.mean(lse - logits[:, rows, y], axis=1)
        done += m
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_samples))


def finite_difference_grad(loss_fn: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(x)
        flat[i] = orig - h
        down = loss_fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad
