"""Small MLP encoder with manual backpropagation, Adam and the step learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

TRAIN = "train"
EVAL = "eval"


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]       # input to each linear layer
    pre_acts: List[np.ndarray]     # linear outputs before the rectifier
    pre_norm: np.ndarray           # metric-loss tap
    features: np.ndarray           # classifier tap (after normalization)
    xhat: Optional[np.ndarray]
    inv_std: Optional[np.ndarray]
    mode: str
    version: int


class Encoder:
    """``raw -> [Linear -> ReLU]* -> Linear -> bias-free normalization``.

    The normalization layer uses batch statistics in train mode (updating
    running estimates with ``momentum``) and the running estimates in eval
    mode. It has a learnable scale and no shift.
    """

    def __init__(self, widths: Sequence[int], rng=None, use_norm: bool = True,
                 momentum: float = 0.1, eps: float = 1e-5):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        self.widths = list(widths)
        self.use_norm = use_norm
        self.momentum = momentum
        self.eps = eps
        rng = np.random.default_rng(0) if rng is None else rng
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            self.weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        f = widths[-1]
        self.gamma = np.ones(f)
        self.running_mean = np.zeros(f)
        self.running_var = np.ones(f)
        self.version = 0

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def params(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layer{i}.W"] = W
            out[f"layer{i}.b"] = b
        if self.use_norm:
            out["norm.gamma"] = self.gamma
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"norm.running_mean": self.running_mean, "norm.running_var": self.running_var}

    def touch(self) -> None:
        """Mark parameters as changed; outstanding caches become stale."""
        self.version += 1

    def forward(self, raw, mode: str = TRAIN):
        X = np.asarray(raw, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.widths[0]:
            raise ValueError(f"expected inputs of shape (N, {self.widths[0]}), got {X.shape}")
        if mode not in (TRAIN, EVAL):
            raise ValueError(f"unknown mode {mode!r}")
        inputs, pre_acts = [], []
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ W.T + b
            pre_acts.append(z)
            h = np.maximum(z, 0.0) if i < last else z
        pre_norm = h
        xhat = inv_std = None
        if not self.use_norm:
            features = pre_norm
        elif mode == TRAIN:
            if X.shape[0] < 2:
                raise ValueError("train-mode normalization needs at least two samples")
            mu = pre_norm.mean(axis=0)
            centred = pre_norm - mu
            var = np.mean(centred * centred, axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = centred * inv_std
            features = self.gamma * xhat
            n = X.shape[0]
            self.running_mean *= 1 - self.momentum
            self.running_mean += self.momentum * mu
            self.running_var *= 1 - self.momentum
            self.running_var += self.momentum * var * n / (n - 1)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (pre_norm - self.running_mean) * inv_std
            features = self.gamma * xhat
        cache = ForwardCache(inputs, pre_acts, pre_norm, features, xhat, inv_std, mode, self.version)
        return features, cache

    def backward(self, cache: ForwardCache, grad_features, grad_pre_norm=None) -> Dict[str, np.ndarray]:
        """Parameter gradients given upstream gradients at the two feature taps."""
        if cache.version != self.version:
            raise RuntimeError("stale forward cache: parameters changed since the forward pass")
        g_out = np.asarray(grad_features, dtype=np.float64)
        grads: Dict[str, np.ndarray] = {}
        if not self.use_norm:
            g = g_out.copy()
        else:
            grads["norm.gamma"] = np.sum(g_out * cache.xhat, axis=0)
            g_xhat = g_out * self.gamma
            if cache.mode == TRAIN:
                n = g_xhat.shape[0]
                g = cache.inv_std / n * (n * g_xhat - g_xhat.sum(axis=0)
                                         - cache.xhat * np.sum(g_xhat * cache.xhat, axis=0))
            else:
                g = g_xhat * cache.inv_std
        if grad_pre_norm is not None:
            g = g + grad_pre_norm
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i < last:
                g = g * (cache.pre_acts[i] > 0)
            grads[f"layer{i}.W"] = g.T @ cache.inputs[i]
            grads[f"layer{i}.b"] = g.sum(axis=0)
            if i > 0:
                g = g @ self.weights[i]
        return grads

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {**self.params(), **self.buffers(), "norm.gamma": self.gamma}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for i in range(len(self.weights)):
            self.weights[i][...] = arrays[f"layer{i}.W"]
            self.biases[i][...] = arrays[f"layer{i}.b"]
        self.gamma[...] = arrays["norm.gamma"]
        self.running_mean[...] = arrays["norm.running_mean"]
        self.running_var[...] = arrays["norm.running_var"]
        self.touch()


@dataclass
class LRSchedule:
    base_lr: float = 1.75e-4
    warmup_epochs: int = 10
    decay_epochs: Sequence[int] = (30, 55)
    decay_factor: float = 0.1

    def lr_at(self, epoch: int) -> float:
        if epoch < 1:
            raise ValueError("epochs are numbered from 1")
        if self.warmup_epochs > 0 and epoch <= self.warmup_epochs:
            return self.base_lr * epoch / self.warmup_epochs
        n_decays = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.base_lr * self.decay_factor ** n_decays


class Adam:
    def __init__(self, schedule: Optional[LRSchedule] = None, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.schedule = schedule or LRSchedule()
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def lr_at(self, epoch: int) -> float:
        return self.schedule.lr_at(epoch)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> None:
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], t: int) -> None:
        self.t = t
        self.m = {k[len("adam.m."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v.")}


def lr_at(optimizer: Adam, epoch: int) -> float:
    return optimizer.lr_at(epoch)
