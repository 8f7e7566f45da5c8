"""Loss functions with analytic gradients.

Every loss returns a :class:`LossOutput` holding the scalar value, the gradient
with respect to the input features and, where a classifier is involved, the
gradient with respect to the classifier weights. Covariance banks are treated
as constants: no gradient flows into them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .covbank import CLASS, DOMAIN, CovarianceBank
from .numerics import SymMatrix, log_sum_exp_rows, softmax_rows

MODES = ("base", "dex", "dexlite", "isda")


@dataclass
class ClassifierHead:
    """Bias-free linear classifier, one weight row per identity."""

    W: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 2:
            raise ValueError("classifier weights must be a C x f matrix")
        if not np.all(np.isfinite(self.W)):
            raise ValueError("classifier weights must be finite")

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, num_classes: int, feature_dim: int, rng, std: float = 0.001) -> "ClassifierHead":
        return cls(rng.normal(0.0, std, size=(num_classes, feature_dim)))


@dataclass
class LossOutput:
    value: float
    grad_features: Any
    grad_weights: Any = None
    aux: Dict[str, Any] = field(default_factory=dict)
    # set by combined_loss when the metric losses see a different feature tap
    grad_metric_features: Optional[np.ndarray] = None


@dataclass(frozen=True)
class AugmentationSchedule:
    lambda_max: float = 7.5
    total_epochs: int = 60

    def __post_init__(self):
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be non-negative")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")


def lambda_at(schedule: AugmentationSchedule, t: int) -> float:
    """Linear ramp from 0 at epoch 1 to ``lambda_max`` at epoch ``T``."""
    T = schedule.total_epochs
    if not 1 <= t <= T:
        raise ValueError(f"epoch {t} outside [1, {T}]")
    if T == 1:
        return float(schedule.lambda_max)
    return (t - 1) / (T - 1) * schedule.lambda_max


@dataclass(frozen=True)
class LossWeights:
    beta_soft: float = 1.0
    beta_tri: float = 1.0
    beta_cen: float = 5e-4
    margin: float = 0.3
    epsilon: float = 0.1

    def __post_init__(self):
        vals = (self.beta_soft, self.beta_tri, self.beta_cen, self.margin, self.epsilon)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("loss weights must be finite")
        if self.margin < 0:
            raise ValueError("triplet margin must be non-negative")
        if not 0 <= self.epsilon < 1:
            raise ValueError("label smoothing must lie in [0, 1)")


def _check_batch(features, labels, num_classes: int):
    A = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if A.ndim != 2 or A.shape[0] < 1:
        raise ValueError("features must be a non-empty N x f array")
    if y.shape != (A.shape[0],):
        raise ValueError("labels must have one entry per feature row")
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"label out of range [0, {num_classes})")
    return A, y


def _augmented_ce(A: np.ndarray, y: np.ndarray, W: np.ndarray, group_keys: Optional[np.ndarray],
                  sigma_of: Optional[Callable[[int], SymMatrix]], lam: float, epsilon: float):
    """Smoothed cross-entropy on logits ``w_j.a + lam/2 (w_j-w_y)^T S_g (w_j-w_y)``.

    ``y`` indexes rows of ``W``. Returns (value, dA, dW).
    """
    N = A.shape[0]
    C = W.shape[0]
    logits = A @ W.T
    rows = np.arange(N)
    blocks = []
    if lam > 0:
        for g in np.unique(group_keys):
            idx = np.flatnonzero(group_keys == g)
            S = sigma_of(int(g))
            M = S.right_multiply(W)                      # W S, C x f
            self_q = np.sum(M * W, axis=1)               # w_j^T S w_j
            cross = M[y[idx]] @ W.T                      # w_y^T S w_j
            quad = self_q[None, :] - 2.0 * cross + self_q[y[idx]][:, None]
            quad[np.arange(idx.size), y[idx]] = 0.0
            logits[idx] += 0.5 * lam * quad
            blocks.append((idx, M))

    logp = logits - log_sum_exp_rows(logits)[:, None]
    target = np.full((N, C), epsilon / C)
    target[rows, y] += 1.0 - epsilon
    value = float(-np.sum(target * logp) / N)

    G = (softmax_rows(logits) - target) / N
    dA = G @ W
    dW = G.T @ A
    for idx, M in blocks:
        Gi = G[idx]
        yi = y[idx]
        dW += lam * Gi.sum(axis=0)[:, None] * M
        dW -= lam * (Gi.T @ M[yi])
        np.add.at(dW, yi, -lam * (Gi @ M - Gi.sum(axis=1)[:, None] * M[yi]))
    return value, dA, dW


def softmax_ls(features, labels, head: ClassifierHead, epsilon: float = 0.1) -> LossOutput:
    """Label-smoothed softmax cross-entropy over a bias-free classifier."""
    A, y = _check_batch(features, labels, head.num_classes)
    value, dA, dW = _augmented_ce(A, y, head.W, None, None, 0.0, epsilon)
    return LossOutput(value, dA, dW, {"qf_evals": 0})


def _check_bank(bank: CovarianceBank, key_space: str, head: ClassifierHead):
    if bank.key_space != key_space:
        raise ValueError(f"expected a {key_space}-keyed bank, got {bank.key_space}")
    if bank.feature_dim != head.feature_dim:
        raise ValueError("bank and classifier feature dimensions differ")


def _check_lambda(lam: float):
    if lam < 0:
        raise ValueError("augmentation strength must be non-negative")


def dex_loss(features, labels, domain_keys, head: ClassifierHead, bank: CovarianceBank,
             lam: float, epsilon: float = 0.0) -> LossOutput:
    """Implicit domain-covariance augmentation loss (full class denominator)."""
    _check_lambda(lam)
    _check_bank(bank, DOMAIN, head)
    A, y = _check_batch(features, labels, head.num_classes)
    d = np.asarray(domain_keys, dtype=np.int64)
    if d.shape != y.shape:
        raise ValueError("domain_keys must have one entry per feature row")
    covs = {}

    def sigma_of(k):
        if k not in covs:
            covs[k] = bank.covariance(k)
        return covs[k]

    value, dA, dW = _augmented_ce(A, y, head.W, d, sigma_of, lam, epsilon)
    return LossOutput(value, dA, dW, {"qf_evals": A.shape[0] * head.num_classes})


def dexlite_loss(features, labels, domain_keys, head: ClassifierHead, bank: CovarianceBank,
                 lam: float, sampled_classes, epsilon: float = 0.0) -> LossOutput:
    """Negative-sampled variant: the denominator runs over ``sampled_classes`` only.

    Label smoothing spreads ``epsilon`` over the sampled set.
    """
    _check_lambda(lam)
    _check_bank(bank, DOMAIN, head)
    A, y = _check_batch(features, labels, head.num_classes)
    d = np.asarray(domain_keys, dtype=np.int64)
    if d.shape != y.shape:
        raise ValueError("domain_keys must have one entry per feature row")
    P = np.asarray(sampled_classes, dtype=np.int64)
    if P.ndim != 1 or P.size == 0 or P.min() < 0 or P.max() >= head.num_classes:
        raise ValueError("sampled classes must be ids in [0, C)")
    if np.unique(P).size != P.size:
        raise ValueError("sampled classes must be distinct")
    local = np.full(head.num_classes, -1, dtype=np.int64)
    local[P] = np.arange(P.size)
    y_local = local[y]
    if np.any(y_local < 0):
        missing = sorted(set(y[y_local < 0].tolist()))
        raise ValueError(f"sampled classes miss batch labels {missing}")
    covs = {}

    def sigma_of(k):
        if k not in covs:
            covs[k] = bank.covariance(k)
        return covs[k]

    value, dA, dW_s = _augmented_ce(A, y_local, head.W[P], d, sigma_of, lam, epsilon)
    dW = np.zeros_like(head.W)
    dW[P] = dW_s
    return LossOutput(value, dA, dW, {"qf_evals": A.shape[0] * P.size})


def isda_loss(features, labels, head: ClassifierHead, class_bank: CovarianceBank, lam: float,
              epsilon: float = 0.0) -> LossOutput:
    """Class-conditional variant: each sample uses the covariance of its own class."""
    _check_lambda(lam)
    _check_bank(class_bank, CLASS, head)
    A, y = _check_batch(features, labels, head.num_classes)
    covs = {}

    def sigma_of(k):
        if k not in covs:
            covs[k] = class_bank.covariance(k)
        return covs[k]

    value, dA, dW = _augmented_ce(A, y, head.W, y, sigma_of, lam, epsilon)
    return LossOutput(value, dA, dW, {"qf_evals": A.shape[0] * head.num_classes})


def pairwise_euclidean(X: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def triplet_loss(features, labels, margin: float = 0.3) -> LossOutput:
    """Batch-hard triplet loss with Euclidean distance, averaged over anchors."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    N = X.shape[0]
    uniq, counts = np.unique(y, return_counts=True)
    if uniq.size < 2:
        raise ValueError("triplet loss needs at least two distinct labels")
    if counts.min() < 2:
        raise ValueError(f"label {uniq[counts.argmin()]} has a single sample; no positive exists")

    D = pairwise_euclidean(X)
    same = y[:, None] == y[None, :]
    pos_mask = same & ~np.eye(N, dtype=bool)
    hard_pos = np.argmax(np.where(pos_mask, D, -np.inf), axis=1)
    hard_neg = np.argmin(np.where(~same, D, np.inf), axis=1)
    rows = np.arange(N)
    d_ap = D[rows, hard_pos]
    d_an = D[rows, hard_neg]
    hinge = d_ap - d_an + margin
    active = hinge > 0
    value = float(np.sum(np.where(active, hinge, 0.0)) / N)

    grad = np.zeros_like(X)
    for a in np.flatnonzero(active):
        p, n = hard_pos[a], hard_neg[a]
        if d_ap[a] > 0:
            g = (X[a] - X[p]) / (d_ap[a] * N)
            grad[a] += g
            grad[p] -= g
        if d_an[a] > 0:
            g = (X[a] - X[n]) / (d_an[a] * N)
            grad[a] -= g
            grad[n] += g
    return LossOutput(value, grad, None, {"active_anchors": int(active.sum())})


@dataclass
class Centroids:
    centers: np.ndarray
    alpha: float = 0.5

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if not 0 < self.alpha <= 1:
            raise ValueError("centroid update rate must lie in (0, 1]")

    @classmethod
    def zeros(cls, num_classes: int, feature_dim: int, alpha: float = 0.5) -> "Centroids":
        return cls(np.zeros((num_classes, feature_dim)), alpha)


def center_loss(features, labels, centroids: Centroids) -> LossOutput:
    """Summed squared distance of each feature to its class centroid."""
    X, y = _check_batch(features, labels, centroids.centers.shape[0])
    diff = X - centroids.centers[y]
    return LossOutput(float(np.sum(diff * diff)), 2.0 * diff)


def update_centroids(centroids: Centroids, features, labels) -> Centroids:
    """``c_y <- c_y - alpha * sum_i (c_y - x_i) / (1 + n_y)`` for every class in the batch."""
    X, y = _check_batch(features, labels, centroids.centers.shape[0])
    centers = centroids.centers.copy()
    for k in np.unique(y):
        members = X[y == k]
        delta = np.sum(centers[k] - members, axis=0) / (1 + members.shape[0])
        centers[k] = centers[k] - centroids.alpha * delta
    return Centroids(centers, centroids.alpha)


@dataclass
class Branch:
    head: ClassifierHead
    bank: CovarianceBank
    lambda_scale: float = 1.0


@dataclass
class BranchEnsemble:
    branches: List[Branch]
    aggregation: str = "mean"

    def __post_init__(self):
        if not self.branches:
            raise ValueError("an ensemble needs at least one branch")
        if self.aggregation not in ("mean", "sum"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if len({b.head.num_classes for b in self.branches}) != 1:
            raise ValueError("all branches must share the number of classes")
        if len({id(b.bank) for b in self.branches}) != len(self.branches):
            raise ValueError("each branch must own its own covariance bank")

    def __len__(self):
        return len(self.branches)

    @property
    def num_classes(self) -> int:
        return self.branches[0].head.num_classes


def branch_loss(ensemble: BranchEnsemble, branch_features: Sequence, labels, domain_keys,
                lam_t: float, sampled_classes=None, epsilon: float = 0.0) -> LossOutput:
    """Per-branch augmentation loss, each branch against its own bank, then mean or sum.

    Returns per-branch lists in ``grad_features`` and ``grad_weights``.
    """
    if len(branch_features) != len(ensemble):
        raise ValueError(f"got {len(branch_features)} feature batches for {len(ensemble)} branches")
    scale = 1.0 / len(ensemble) if ensemble.aggregation == "mean" else 1.0
    if sampled_classes is None:
        sampled_classes = np.arange(ensemble.num_classes)
    value = 0.0
    gfeat, gw = [], []
    qf = 0
    for br, X in zip(ensemble.branches, branch_features):
        out = dexlite_loss(X, labels, domain_keys, br.head, br.bank, lam_t * br.lambda_scale,
                           sampled_classes, epsilon)
        value += scale * out.value
        gfeat.append(scale * out.grad_features)
        gw.append(scale * out.grad_weights)
        qf += out.aux["qf_evals"]
    return LossOutput(value, gfeat, gw, {"qf_evals": qf})


def combined_loss(mode: str, t: int, features, labels, head, schedule: AugmentationSchedule,
                  weights: LossWeights, *, domain_keys=None, bank: Optional[CovarianceBank] = None,
                  centroids: Optional[Centroids] = None, sampled_classes=None,
                  metric_features=None, smooth_augmented: bool = True) -> LossOutput:
    """Baseline or augmented training objective at epoch ``t``.

    ``base``: beta_soft * softmax + beta_tri * triplet + beta_cen * center.
    ``dex``/``dexlite``/``isda``: the softmax term is replaced, with coefficient 1,
    by the augmentation loss at ``lambda_at(schedule, t)``.

    ``head`` may be a :class:`BranchEnsemble`; features are then split into
    equal contiguous chunks, one per branch, and ``bank`` is ignored.
    When ``metric_features`` is given the triplet and center losses use it and
    their gradient is returned in ``grad_metric_features``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    A = np.asarray(features, dtype=np.float64)
    lam_t = 0.0 if mode == "base" else lambda_at(schedule, t)
    eps_aug = weights.epsilon if smooth_augmented else 0.0

    if isinstance(head, BranchEnsemble):
        if mode == "isda":
            raise ValueError("the class-conditional variant has no multi-branch form")
        chunks = np.split(A, len(head), axis=1)
        sampled = sampled_classes if mode == "dexlite" else None
        eps = weights.epsilon if mode == "base" else eps_aug
        cls = branch_loss(head, chunks, labels, domain_keys, lam_t, sampled, eps)
        cls.grad_features = np.concatenate(cls.grad_features, axis=1)
    elif mode == "base":
        cls = softmax_ls(A, labels, head, weights.epsilon)
    elif mode == "dex":
        cls = dex_loss(A, labels, domain_keys, head, bank, lam_t, eps_aug)
    elif mode == "dexlite":
        if sampled_classes is None:
            raise ValueError("dexlite mode needs sampled classes")
        cls = dexlite_loss(A, labels, domain_keys, head, bank, lam_t, sampled_classes, eps_aug)
    else:
        cls = isda_loss(A, labels, head, bank, lam_t, eps_aug)

    beta_cls = weights.beta_soft if mode == "base" else 1.0
    M = A if metric_features is None else np.asarray(metric_features, dtype=np.float64)
    value = beta_cls * cls.value
    g_cls = beta_cls * cls.grad_features
    if isinstance(cls.grad_weights, list):
        g_w = [beta_cls * g for g in cls.grad_weights]
    else:
        g_w = beta_cls * cls.grad_weights
    g_metric = np.zeros_like(M)
    aux = {"lambda_t": lam_t, "qf_evals": cls.aux["qf_evals"], "cls": cls.value,
           "tri": 0.0, "cen": 0.0, "active_anchors": 0}

    if weights.beta_tri != 0:
        tri = triplet_loss(M, labels, weights.margin)
        value += weights.beta_tri * tri.value
        g_metric += weights.beta_tri * tri.grad_features
        aux["tri"] = tri.value
        aux["active_anchors"] = tri.aux["active_anchors"]
    if weights.beta_cen != 0:
        if centroids is None:
            raise ValueError("center loss weight is non-zero but no centroids were given")
        cen = center_loss(M, labels, centroids)
        value += weights.beta_cen * cen.value
        g_metric += weights.beta_cen * cen.grad_features
        aux["cen"] = cen.value

    if metric_features is None:
        return LossOutput(value, g_cls + g_metric, g_w, aux)
    return LossOutput(value, g_cls, g_w, aux, grad_metric_features=g_metric)
