"""Property certification run by ``dexreid verify``.

Each check returns a :class:`Check` with the measured quantity and the bound
it is held to, so the report shows margins rather than bare pass/fail.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from .covbank import CLASS, DOMAIN, CovarianceBank, merge
from .losses import (AugmentationSchedule, Centroids, ClassifierHead, LossWeights, center_loss,
                     combined_loss, dex_loss, dexlite_loss, isda_loss, softmax_ls, triplet_loss)
from .numerics import DIAGONAL, FULL
from .oracle import finite_difference_grad, mc_expected_loss


@dataclass
class Check:
    name: str
    passed: bool
    measured: float
    bound: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<34} measured={self.measured:.3e}  bound={self.bound:.3e}  {self.detail}"


def random_instance(rng, f=None, C=None, D=None, N=None, mode=FULL):
    """Random features, labels, domains, head and a domain bank filled from random data."""
    f = f or int(rng.integers(2, 17))
    C = C or int(rng.integers(2, 21))
    D = D or int(rng.integers(1, 5))
    N = N or int(rng.integers(2, 9))
    A = rng.normal(size=(N, f))
    y = rng.integers(0, C, N)
    d = rng.integers(0, D, N)
    head = ClassifierHead(rng.normal(scale=0.5, size=(C, f)))
    bank = CovarianceBank(D, f, mode, DOMAIN)
    mix = rng.normal(scale=0.4, size=(f, f))
    n_data = 6 * D + 3 * f
    bank.update(rng.normal(size=(n_data, f)) @ mix, np.arange(n_data) % D)
    return A, y, d, head, bank


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_jensen(seed: int, n_instances: int, n_samples: int, lams=(0.5, 2.0, 7.5)) -> List[Check]:
    rng = np.random.default_rng(seed)
    out = []
    for lam in lams:
        ok = 0
        worst = np.inf
        for _ in range(n_instances):
            A, y, d, head, bank = random_instance(rng)
            bound = dex_loss(A, y, d, head, bank, lam).value
            mean, se = mc_expected_loss(A, y, d, head, bank, lam, n_samples, rng)
            slack = bound - (mean - 3 * se)
            worst = min(worst, slack)
            ok += slack >= 0
        frac = ok / n_instances
        out.append(Check(f"jensen certificate lambda={lam}", frac >= 0.99, frac, 0.99,
                         f"min slack {worst:.3g}"))
    return out


def check_reductions(seed: int) -> List[Check]:
    rng = np.random.default_rng(seed)
    A, y, d, head, bank = random_instance(rng, f=8, C=12, D=3, N=8)
    eps = 0.1
    r1 = abs(dex_loss(A, y, d, head, bank, 0.0, eps).value - softmax_ls(A, y, head, eps).value)
    full = dex_loss(A, y, d, head, bank, 2.0, eps).value
    r2 = abs(dexlite_loss(A, y, d, head, bank, 2.0, np.arange(12), eps).value - full)
    # epoch 1 of the augmented objective equals the baseline objective
    labels = np.repeat(np.arange(4), 2)
    feats = rng.normal(size=(8, 8))
    cents = Centroids(rng.normal(size=(12, 8)))
    sched = AugmentationSchedule(7.5, 60)
    w = LossWeights()
    base = combined_loss("base", 1, feats, labels, head, sched, w, domain_keys=d, bank=bank, centroids=cents)
    dex = combined_loss("dex", 1, feats, labels, head, sched, w, domain_keys=d, bank=bank, centroids=cents)
    r3 = abs(base.value - dex.value)
    return [Check("dex(lambda=0) == softmax", r1 <= 1e-12, r1, 1e-12),
            Check("dexlite(all classes) == dex", r2 <= 1e-12, r2, 1e-12),
            Check("epoch-1 dex objective == base", r3 <= 1e-12, r3, 1e-12)]


def check_golden(seed: int) -> List[Check]:
    head = ClassifierHead(np.array([[1.0], [-1.0]]))
    bank = CovarianceBank(1, 1).update(np.array([[1.0], [-1.0]]), [0, 0])
    val = dex_loss([[0.0]], [1], [0], head, bank, 1.0).value
    err = abs(val - np.log1p(np.exp(2.0)))
    mean, se = mc_expected_loss([[0.0]], [1], [0], head, bank, 1.0, 50_000, np.random.default_rng(seed))
    return [Check("scalar closed form log(1+e^2)", err <= 1e-9, err, 1e-9),
            Check("scalar bound >= MC - 3se", val >= mean - 3 * se, val - (mean - 3 * se), 0.0)]


def _grad_check(name: str, fn: Callable[[np.ndarray], float], x, analytic, tol) -> Check:
    num = finite_difference_grad(fn, x, 1e-5)
    e = rel_err(num, analytic)
    return Check(f"gradient {name}", e <= tol, e, tol)


def check_gradients(seed: int) -> List[Check]:
    rng = np.random.default_rng(seed)
    A, y, d, head, bank = random_instance(rng, f=6, C=7, D=2, N=5)
    cls_bank = CovarianceBank(7, 6, DIAGONAL, CLASS).update(rng.normal(size=(40, 6)), np.arange(40) % 7)
    P = np.unique(np.concatenate([y, [0, 1, 2]]))
    checks = []
    out = softmax_ls(A, y, head, 0.1)
    checks.append(_grad_check("softmax features", lambda X: softmax_ls(X, y, head, 0.1).value, A, out.grad_features, 1e-6))
    for name, fn in [
        ("dex", lambda X, H: dex_loss(X, y, d, H, bank, 2.0, 0.1)),
        ("dexlite", lambda X, H: dexlite_loss(X, y, d, H, bank, 2.0, P, 0.1)),
        ("isda", lambda X, H: isda_loss(X, y, H, cls_bank, 2.0, 0.1)),
    ]:
        out = fn(A, head)
        checks.append(_grad_check(f"{name} features", lambda X: fn(X, head).value, A, out.grad_features, 1e-6))
        checks.append(_grad_check(f"{name} weights", lambda W: fn(A, ClassifierHead(W)).value, head.W,
                                  out.grad_weights, 1e-6))
    labels = np.repeat(np.arange(3), 3)
    X = rng.normal(size=(9, 4))
    out = triplet_loss(X, labels, 0.3)
    checks.append(_grad_check("triplet", lambda Z: triplet_loss(Z, labels, 0.3).value, X, out.grad_features, 1e-6))
    cents = Centroids(rng.normal(size=(3, 4)))
    out = center_loss(X, labels, cents)
    checks.append(_grad_check("center", lambda Z: center_loss(Z, labels, cents).value, X, out.grad_features, 1e-6))
    checks.append(check_composed(seed))
    return checks


def check_composed(seed: int) -> Check:
    """Full objective through the encoder (BNNeck taps) against finite differences in the first layer."""
    from .model import Encoder
    rng = np.random.default_rng(seed)
    enc = Encoder([5, 6, 4], rng)
    raw = rng.normal(size=(8, 5))
    labels = np.repeat(np.arange(4), 2)
    doms = np.arange(8) % 2
    head = ClassifierHead(rng.normal(size=(6, 4)))
    bank = CovarianceBank(2, 4).update(rng.normal(size=(30, 4)), np.arange(30) % 2)
    cents = Centroids(rng.normal(size=(6, 4)))
    sched = AugmentationSchedule(7.5, 10)

    def objective():
        feats, cache = enc.forward(raw, "train")
        out = combined_loss("dex", 6, feats, labels, head, sched, LossWeights(beta_cen=0.05),
                            domain_keys=doms, bank=bank, centroids=cents, metric_features=cache.pre_norm)
        return out, cache

    out, cache = objective()
    analytic = enc.backward(cache, out.grad_features, out.grad_metric_features)["layer0.W"]
    W0 = enc.weights[0]

    def f(W):
        saved = W0.copy()
        W0[...] = W
        val = objective()[0].value
        W0[...] = saved
        return val

    return _grad_check("composed encoder objective", f, W0.copy(), analytic, 1e-5)


def check_covariance(seed: int, corrupt: bool = False) -> List[Check]:
    rng = np.random.default_rng(seed)
    f, D = 12, 3
    X = rng.normal(size=(300, f)) @ rng.normal(size=(f, f))
    keys = rng.integers(0, D, 300)
    cuts = np.sort(rng.choice(np.arange(1, 300), 5, replace=False))
    a = CovarianceBank(D, f)
    b = CovarianceBank(D, f)
    for i, part in enumerate(np.split(np.arange(300), cuts)):
        (a if i % 2 else b).update(X[part], keys[part])
    bank = merge(a, b)
    worst = 0.0
    for k in range(D):
        ref = np.cov(X[keys == k].T, bias=True)
        worst = max(worst, rel_err(bank.covariance(k).dense(), ref))
    if corrupt:
        # negative control: a scatter matrix that is far from PSD
        bank.scatter[0] -= 10 * np.trace(bank.scatter[0]) * np.eye(f)
    psd = np.inf
    for k in range(D):
        S = bank.covariance(k).dense()
        psd = min(psd, np.linalg.eigvalsh(S).min() / max(abs(np.trace(S)), 1e-300))
    return [Check("streaming == batch covariance", worst <= 1e-10, worst, 1e-10),
            Check("covariance PSD (min eig / trace)", psd >= -1e-8, psd, -1e-8)]


def check_complexity(seed: int) -> List[Check]:
    rng = np.random.default_rng(seed)
    A, y, d, head, bank = random_instance(rng, f=8, C=20, D=4, N=8)
    P = np.unique(np.concatenate([y, rng.choice(20, 5, replace=False)]))
    n_lite = dexlite_loss(A, y, d, head, bank, 1.0, P).aux["qf_evals"]
    n_dex = dex_loss(A, y, d, head, bank, 1.0).aux["qf_evals"]
    full = CovarianceBank(4, 8, FULL).stored_scalars()
    diag = CovarianceBank(4, 8, DIAGONAL).stored_scalars()
    return [Check("dexlite evals == N*|P_s|", n_lite == 8 * P.size, n_lite, 8 * P.size),
            Check("dex evals == N*C", n_dex == 8 * 20, n_dex, 160),
            Check("full bank scalars", full == 180, full, 180),
            Check("diagonal bank scalars", diag == 68, diag, 68)]


def run_all(seed: int = 0, n_instances: int = 40, n_samples: int = 4000,
            corrupt_bank: bool = False) -> List[Check]:
    checks = []
    checks += check_reductions(seed)
    checks += check_golden(seed)
    checks += check_gradients(seed)
    checks += check_covariance(seed, corrupt_bank)
    checks += check_complexity(seed)
    checks += check_jensen(seed, n_instances, n_samples)
    return checks
