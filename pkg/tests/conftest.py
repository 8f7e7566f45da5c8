import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def naive_batch_cov(X):
    """Population covariance by explicit loops (independent of numpy's cov)."""
    X = np.asarray(X, float)
    n, f = X.shape
    mu = [sum(X[i, j] for i in range(n)) / n for j in range(f)]
    S = np.zeros((f, f))
    for a in range(f):
        for b in range(f):
            S[a, b] = sum((X[i, a] - mu[a]) * (X[i, b] - mu[b]) for i in range(n)) / n
    return np.array(mu), S


def jacobi_min_eig(S, sweeps=60):
    """Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations."""
    A = np.array(S, float)
    f = A.shape[0]
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off < 1e-14 * max(1.0, np.abs(A).max()):
            break
        for p in range(f - 1):
            for q in range(p + 1, f):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * A[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1)) if theta != 0 else 1.0
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                J = np.eye(f)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
    return float(np.min(np.diag(A)))
