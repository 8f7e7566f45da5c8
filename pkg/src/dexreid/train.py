"""Training loop: PK batch -> encoder -> bank update -> objective -> backprop -> Adam."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import snapshot
from .config import ExperimentConfig
from .covbank import CLASS, DOMAIN, CovarianceBank
from .data import GeneratedData, PKSampler, negative_sample
from .evaluation import RetrievalMetrics, cmc_map, distance_matrix
from .losses import (AugmentationSchedule, Branch, BranchEnsemble, Centroids, ClassifierHead,
                     branch_loss, combined_loss, lambda_at, softmax_ls, update_centroids)
from .model import EVAL, TRAIN, Adam, Encoder

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lambda_t", "lr", "loss_total", "loss_cls", "loss_tri", "loss_cen",
               "qf_evals", "dex_softmax_gap")


class Trainer:
    def __init__(self, cfg: ExperimentConfig, data: GeneratedData):
        self.cfg = cfg
        self.data = data
        C = data.num_classes
        D = data.spec.num_source_domains
        f = cfg.feature_dim
        init_rng = np.random.default_rng([cfg.seed, 0])
        self.encoder = Encoder([data.spec.raw_dim, *cfg.hidden, f], init_rng)
        self.schedule = AugmentationSchedule(cfg.lam, cfg.epochs)
        self.optimizer = Adam(cfg.optim)
        self.centroids = Centroids.zeros(C, f, cfg.centroid_alpha)
        if cfg.branches > 1:
            fb = f // cfg.branches
            self.head = BranchEnsemble(
                [Branch(ClassifierHead.init(C, fb, init_rng, cfg.head_init_std),
                        CovarianceBank(D, fb, cfg.bank_mode, DOMAIN), cfg.lambda_scale)
                 for _ in range(cfg.branches)], cfg.aggregate)
            self.bank = None
        else:
            self.head = ClassifierHead.init(C, f, init_rng, cfg.head_init_std)
            if cfg.mode == "isda":
                self.bank = CovarianceBank(C, f, cfg.bank_mode, CLASS)
            else:
                self.bank = CovarianceBank(D, f, cfg.bank_mode, DOMAIN)
        self.sampler = PKSampler(data.train.pids, cfg.P, cfg.K)
        self.batch_rng = np.random.default_rng([cfg.seed, 1])
        self.neg_rng = np.random.default_rng([cfg.seed, 2])
        self.epoch = 0
        self.history: List[Dict[str, float]] = []

    # parameters seen by the optimizer

    def parameters(self) -> Dict[str, np.ndarray]:
        params = dict(self.encoder.params())
        if isinstance(self.head, BranchEnsemble):
            for i, br in enumerate(self.head.branches):
                params[f"head{i}.W"] = br.head.W
        else:
            params["head.W"] = self.head.W
        return params

    def _head_grads(self, g) -> Dict[str, np.ndarray]:
        if isinstance(g, list):
            return {f"head{i}.W": gi for i, gi in enumerate(g)}
        return {"head.W": g}

    def _update_banks(self, feats, labels, domains):
        if isinstance(self.head, BranchEnsemble):
            for br, chunk in zip(self.head.branches, np.split(feats, len(self.head), axis=1)):
                br.bank.update(chunk, domains)
        elif self.bank.key_space == CLASS:
            self.bank.update(feats, labels)
        else:
            self.bank.update(feats, domains)

    def _plain_softmax(self, feats, labels) -> float:
        eps = self.cfg.weights.epsilon
        if isinstance(self.head, BranchEnsemble):
            chunks = np.split(feats, len(self.head), axis=1)
            return branch_loss(self.head, chunks, labels, np.zeros(len(labels), int), 0.0, None, eps).value
        return softmax_ls(feats, labels, self.head, eps).value

    def train_step(self, idx: np.ndarray, t: int, lr: float) -> Dict[str, float]:
        cfg = self.cfg
        train = self.data.train
        X, y, d = train.raw[idx], train.pids[idx], train.domains[idx]
        feats, cache = self.encoder.forward(X, TRAIN)
        self._update_banks(feats, y, d)
        sampled = None
        if cfg.mode == "dexlite":
            size = cfg.sample_size if cfg.sample_size > 0 else self.data.num_classes
            sampled = negative_sample(self.data.num_classes, y, size, self.neg_rng)
        out = combined_loss(cfg.mode, t, feats, y, self.head, self.schedule, cfg.weights,
                            domain_keys=d, bank=self.bank, centroids=self.centroids,
                            sampled_classes=sampled,
                            metric_features=cache.pre_norm if cfg.bnneck else None,
                            smooth_augmented=cfg.smooth_augmented)
        grads = self.encoder.backward(cache, out.grad_features, out.grad_metric_features)
        grads.update(self._head_grads(out.grad_weights))
        gap = out.aux["cls"] - self._plain_softmax(feats, y)
        self.optimizer.step(self.parameters(), grads, lr)
        self.encoder.touch()
        metric = cache.pre_norm if cfg.bnneck else feats
        self.centroids = update_centroids(self.centroids, metric, y)
        return {"loss_total": out.value, "loss_cls": out.aux["cls"], "loss_tri": out.aux["tri"],
                "loss_cen": out.aux["cen"], "qf_evals": out.aux["qf_evals"], "gap": gap,
                "lambda_t": out.aux["lambda_t"]}

    def train_epoch(self) -> Dict[str, float]:
        t = self.epoch + 1
        lr = self.optimizer.lr_at(t)
        lam_t = 0.0 if self.cfg.mode == "base" else lambda_at(self.schedule, t)
        stats = [self.train_step(idx, t, lr) for idx in self.sampler.epoch(self.batch_rng)]
        self.epoch = t
        row = {"epoch": t, "lambda_t": lam_t, "lr": lr,
               "loss_total": float(np.mean([s["loss_total"] for s in stats])),
               "loss_cls": float(np.mean([s["loss_cls"] for s in stats])),
               "loss_tri": float(np.mean([s["loss_tri"] for s in stats])),
               "loss_cen": float(np.mean([s["loss_cen"] for s in stats])),
               "qf_evals": int(sum(s["qf_evals"] for s in stats)),
               "dex_softmax_gap": float(np.mean([s["gap"] for s in stats]))}
        self.history.append(row)
        log.info("epoch %d lambda %.4f lr %.3g loss %.4f", t, lam_t, lr, row["loss_total"])
        return row

    def fit(self, stop_after: Optional[int] = None,
            on_epoch: Optional[Callable[["Trainer", dict], None]] = None) -> List[dict]:
        last = self.cfg.epochs if stop_after is None else min(stop_after, self.cfg.epochs)
        while self.epoch < last:
            row = self.train_epoch()
            if on_epoch is not None:
                on_epoch(self, row)
        return self.history

    def embed(self, raw) -> np.ndarray:
        feats, _ = self.encoder.forward(raw, EVAL)
        return feats

    def evaluate(self, ranks=(1, 5, 10)) -> RetrievalMetrics:
        return evaluate_encoder(self.encoder, self.data, ranks)

    # checkpoints

    def _arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"encoder.{k}": v for k, v in self.encoder.state_arrays().items()}
        arrays.update({f"param.{k}": v for k, v in self.parameters().items() if k.startswith("head")})
        arrays["centroids"] = self.centroids.centers
        for name, bank in self._banks().items():
            arrays[f"{name}.counts"] = bank.counts
            arrays[f"{name}.means"] = bank.means
            arrays[f"{name}.scatter"] = bank.scatter
        arrays.update(self.optimizer.state_arrays())
        return arrays

    def _banks(self) -> Dict[str, CovarianceBank]:
        if isinstance(self.head, BranchEnsemble):
            return {f"bank{i}": br.bank for i, br in enumerate(self.head.branches)}
        return {"bank": self.bank}

    def checkpoint_bytes(self) -> bytes:
        meta = {"config": self.cfg.to_text(), "epoch": self.epoch, "adam_t": self.optimizer.t,
                "batch_rng": self.batch_rng.bit_generator.state,
                "neg_rng": self.neg_rng.bit_generator.state, "history": self.history}
        return snapshot.dumps("checkpoint", meta, self._arrays())

    def save_checkpoint(self, path) -> None:
        Path(path).write_bytes(self.checkpoint_bytes())

    @classmethod
    def from_checkpoint(cls, path, data: GeneratedData) -> "Trainer":
        meta, arrays = snapshot.load(path, "checkpoint")
        cfg = ExperimentConfig.from_text(meta["config"])
        if data.spec != cfg.data:
            raise ValueError("checkpoint was trained on a different dataset specification")
        tr = cls(cfg, data)
        tr.encoder.load_state_arrays({k[len("encoder."):]: v for k, v in arrays.items()
                                      if k.startswith("encoder.")})
        for k, p in tr.parameters().items():
            if k.startswith("head"):
                p[...] = arrays[f"param.{k}"]
        tr.centroids = Centroids(arrays["centroids"], cfg.centroid_alpha)
        for name, bank in tr._banks().items():
            bank.counts = arrays[f"{name}.counts"]
            bank.means = arrays[f"{name}.means"]
            bank.scatter = arrays[f"{name}.scatter"]
        tr.optimizer.load_state_arrays({k: v for k, v in arrays.items() if k.startswith("adam.")},
                                       meta["adam_t"])
        tr.batch_rng.bit_generator.state = meta["batch_rng"]
        tr.neg_rng.bit_generator.state = meta["neg_rng"]
        tr.epoch = meta["epoch"]
        tr.history = meta["history"]
        return tr


def evaluate_encoder(encoder: Encoder, data: GeneratedData, ranks=(1, 5, 10)) -> RetrievalMetrics:
    q, _ = encoder.forward(data.query.raw, EVAL)
    g, _ = encoder.forward(data.gallery.raw, EVAL)
    dist = distance_matrix(q, g)
    return cmc_map(dist, data.query.pids, data.gallery.pids, data.query.cameras,
                   data.gallery.cameras, ranks)


def history_csv(history: List[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for row in history:
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in LOG_COLUMNS])
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, data: Optional[GeneratedData] = None) -> RetrievalMetrics:
    """Generate (if needed), train to completion and evaluate on the target domain."""
    from .data import generate
    data = generate(cfg.data) if data is None else data
    tr = Trainer(cfg, data)
    tr.fit()
    return tr.evaluate()
