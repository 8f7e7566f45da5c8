"""Experiment configuration read from and written to INI-style text."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Tuple

from .data import SyntheticSpec
from .losses import LossWeights
from .model import LRSchedule

MODES = ("base", "dex", "dexlite", "isda")

# Augmentation strength for the 32-d desk encoder. The default 7.5 is tuned for
# 2048-d backbone features; the quadratic penalty grows relative to the logit
# margin as the feature dimension shrinks, so desk runs use a smaller value.
DESK_LAMBDA = 2.0


@dataclass(frozen=True)
class ExperimentConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    mode: str = "dex"
    lam: float = 7.5
    epochs: int = 30
    weights: LossWeights = field(default_factory=LossWeights)
    P: int = 8
    K: int = 4
    sample_size: int = 0            # dexlite negatives budget; 0 means all classes
    bank_mode: str = "full"
    branches: int = 1
    aggregate: str = "mean"
    branch_lambda_scale: Optional[float] = None   # None: 1/branches for sum, 1 for mean
    hidden: Tuple[int, ...] = (64,)
    feature_dim: int = 32
    bnneck: bool = True
    smooth_augmented: bool = True
    centroid_alpha: float = 0.5
    head_init_std: float = 0.01
    optim: LRSchedule = field(default_factory=lambda: LRSchedule(base_lr=3.5e-3))
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.bank_mode not in ("full", "diagonal"):
            raise ValueError("bank mode must be 'full' or 'diagonal'")
        if self.aggregate not in ("mean", "sum"):
            raise ValueError("aggregate must be 'mean' or 'sum'")
        if self.branches < 1 or self.feature_dim % self.branches:
            raise ValueError("feature_dim must be divisible by the number of branches")
        if self.epochs < 1 or self.P < 2 or self.K < 2:
            raise ValueError("need epochs >= 1, P >= 2 and K >= 2")
        if self.mode == "isda" and self.branches > 1:
            raise ValueError("the class-conditional variant is single-branch only")

    @property
    def batch_size(self) -> int:
        return self.P * self.K

    @property
    def lambda_scale(self) -> float:
        if self.branch_lambda_scale is not None:
            return self.branch_lambda_scale
        return 1.0 / self.branches if self.aggregate == "sum" else 1.0

    def with_overrides(self, **kw) -> "ExperimentConfig":
        data_kw = {k[5:]: kw.pop(k) for k in list(kw) if k.startswith("data_")}
        cfg = replace(self, **{k: v for k, v in kw.items() if v is not None})
        if data_kw:
            cfg = replace(cfg, data=replace(cfg.data, **data_kw))
        return cfg

    # text round trip

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp["data"] = {f.name: str(getattr(self.data, f.name)) for f in fields(self.data)}
        cp["train"] = {
            "mode": self.mode, "lambda": repr(self.lam), "epochs": str(self.epochs),
            "P": str(self.P), "K": str(self.K), "sample_size": str(self.sample_size),
            "bank": self.bank_mode, "branches": str(self.branches), "aggregate": self.aggregate,
            "branch_lambda_scale": "" if self.branch_lambda_scale is None else repr(self.branch_lambda_scale),
            "smooth_augmented": str(self.smooth_augmented), "seed": str(self.seed),
        }
        cp["loss"] = {f.name: repr(getattr(self.weights, f.name)) for f in fields(self.weights)}
        cp["loss"]["centroid_alpha"] = repr(self.centroid_alpha)
        cp["model"] = {"hidden": ",".join(map(str, self.hidden)), "feature_dim": str(self.feature_dim),
                       "bnneck": str(self.bnneck), "head_init_std": repr(self.head_init_std)}
        cp["optim"] = {"base_lr": repr(self.optim.base_lr), "warmup_epochs": str(self.optim.warmup_epochs),
                       "decay_epochs": ",".join(map(str, self.optim.decay_epochs)),
                       "decay_factor": repr(self.optim.decay_factor)}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in cp[sec].items())
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        base = cls()
        data_kw = {}
        if cp.has_section("data"):
            types = {f.name: f.type for f in fields(SyntheticSpec)}
            for k, v in cp["data"].items():
                if k not in types:
                    raise ValueError(f"unknown [data] key {k!r}")
                data_kw[k] = float(v) if types[k] in (float, "float") else int(v)
        data = replace(base.data, **data_kw)

        kw = {}
        if cp.has_section("train"):
            t = cp["train"]
            kw["mode"] = t.get("mode", base.mode)
            kw["lam"] = t.getfloat("lambda", base.lam)
            kw["epochs"] = t.getint("epochs", base.epochs)
            kw["P"] = t.getint("p", base.P)
            kw["K"] = t.getint("k", base.K)
            kw["sample_size"] = t.getint("sample_size", base.sample_size)
            kw["bank_mode"] = {"diag": "diagonal"}.get(t.get("bank", base.bank_mode), t.get("bank", base.bank_mode))
            kw["branches"] = t.getint("branches", base.branches)
            kw["aggregate"] = t.get("aggregate", base.aggregate)
            bls = t.get("branch_lambda_scale", "")
            kw["branch_lambda_scale"] = float(bls) if bls.strip() else None
            kw["smooth_augmented"] = t.getboolean("smooth_augmented", base.smooth_augmented)
            kw["seed"] = t.getint("seed", base.seed)
        weights = base.weights
        if cp.has_section("loss"):
            l = cp["loss"]
            weights = LossWeights(**{f.name: l.getfloat(f.name.lower(), getattr(base.weights, f.name))
                                     for f in fields(LossWeights)})
            kw["centroid_alpha"] = l.getfloat("centroid_alpha", base.centroid_alpha)
        if cp.has_section("model"):
            m = cp["model"]
            hid = m.get("hidden", ",".join(map(str, base.hidden))).strip()
            kw["hidden"] = tuple(int(h) for h in hid.split(",") if h.strip())
            kw["feature_dim"] = m.getint("feature_dim", base.feature_dim)
            kw["bnneck"] = m.getboolean("bnneck", base.bnneck)
            kw["head_init_std"] = m.getfloat("head_init_std", base.head_init_std)
        optim = base.optim
        if cp.has_section("optim"):
            o = cp["optim"]
            dec = o.get("decay_epochs", ",".join(map(str, optim.decay_epochs)))
            optim = LRSchedule(o.getfloat("base_lr", optim.base_lr), o.getint("warmup_epochs", optim.warmup_epochs),
                               tuple(int(e) for e in dec.split(",") if e.strip()),
                               o.getfloat("decay_factor", optim.decay_factor))
        return cls(data=data, weights=weights, optim=optim, **kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())
