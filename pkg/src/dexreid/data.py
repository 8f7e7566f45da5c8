"""Synthetic multi-domain identity data and the batch samplers.

Identities are latent prototypes. Each domain pushes its samples through its
own affine map and adds a low-rank domain-specific "style" component plus a
per-camera offset, so features from different domains have genuinely
different covariance structure. Source domains are pooled for training; a
held-out target domain is split into query and gallery for retrieval.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import snapshot


@dataclass(frozen=True)
class SyntheticSpec:
    num_source_domains: int = 3
    classes_per_domain: int = 50
    target_classes: int = 50
    raw_dim: int = 48
    latent_dim: int = 32
    prototype_scale: float = 1.0
    domain_shift: float = 0.2
    style_rank: int = 6
    style_scale: float = 2.5
    style_shared: float = 1.0
    noise: float = 0.6
    camera_shift: float = 0.3
    cameras_per_domain: int = 4
    samples_min: int = 10
    samples_max: int = 25
    max_condition: float = 20.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_source_domains", "classes_per_domain", "target_classes", "raw_dim",
                     "latent_dim", "cameras_per_domain", "samples_min"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.samples_max < self.samples_min:
            raise ValueError("samples_max must be >= samples_min")
        if self.latent_dim > self.raw_dim or self.style_rank > self.raw_dim:
            raise ValueError("latent_dim and style_rank cannot exceed raw_dim")
        if min(self.prototype_scale, self.domain_shift, self.style_scale, self.noise,
               self.camera_shift) < 0:
            raise ValueError("scales must be non-negative")
        if not 0 <= self.style_shared <= 1:
            raise ValueError("style_shared must lie in [0, 1]")
        if self.max_condition < 1:
            raise ValueError("max_condition must be >= 1")

    @property
    def num_source_classes(self) -> int:
        return self.num_source_domains * self.classes_per_domain

    @property
    def degenerate(self) -> bool:
        return self.noise == 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Dataset:
    raw: np.ndarray
    pids: np.ndarray
    domains: np.ndarray
    cameras: np.ndarray

    def __len__(self):
        return self.raw.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.raw[idx], self.pids[idx], self.domains[idx], self.cameras[idx])

    def domain(self, d: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.domains == d))

    @property
    def unique_pids(self) -> np.ndarray:
        return np.unique(self.pids)


@dataclass
class GeneratedData:
    spec: SyntheticSpec
    train: Dataset
    query: Dataset
    gallery: Dataset

    @property
    def num_classes(self) -> int:
        return self.spec.num_source_classes

    @property
    def sources(self) -> List[Dataset]:
        return [self.train.domain(d) for d in range(self.spec.num_source_domains)]

    def header(self) -> dict:
        return {"spec": self.spec.to_dict(), "num_source_domains": self.spec.num_source_domains,
                "num_target_domains": 1, "num_classes": self.num_classes,
                "num_train": len(self.train), "num_query": len(self.query),
                "num_gallery": len(self.gallery), "degenerate": self.spec.degenerate}

    def to_bytes(self, config_text: str = "") -> bytes:
        arrays = {}
        for split in ("train", "query", "gallery"):
            ds = getattr(self, split)
            for name in ("raw", "pids", "domains", "cameras"):
                arrays[f"{split}_{name}"] = getattr(ds, name)
        meta = dict(self.header(), config=config_text)
        return snapshot.dumps("dataset", meta, arrays)

    def save(self, path, config_text: str = "") -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(config_text))

    @classmethod
    def load(cls, path) -> "GeneratedData":
        meta, arrays = snapshot.load(path, "dataset")
        splits = {s: Dataset(*(arrays[f"{s}_{n}"] for n in ("raw", "pids", "domains", "cameras")))
                  for s in ("train", "query", "gallery")}
        return cls(SyntheticSpec.from_dict(meta["spec"]), **splits)


def _orthonormal(rng, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def _domain_map(rng, spec: SyntheticSpec) -> np.ndarray:
    """Rotation times axis scaling; identity at zero shift, condition number <= max_condition."""
    n = spec.raw_dim
    G = rng.standard_normal((n, n)) / np.sqrt(n)
    K = spec.domain_shift * (G - G.T) / 2
    I = np.eye(n)
    Q = np.linalg.solve(I - K, I + K)     # Cayley transform: orthogonal
    u = rng.uniform(-1.0, 1.0, size=n)
    scales = np.exp(min(spec.domain_shift, 1.0) * u * np.log(spec.max_condition) / 2)
    return Q * scales


def _cameras_for(rng, n: int, cams: int) -> np.ndarray:
    # cycle through a shuffled camera order so every identity spans several cameras
    order = rng.permutation(cams)
    return order[np.arange(n) % cams][rng.permutation(n)]


def generate(spec: SyntheticSpec) -> GeneratedData:
    """Pure function of ``spec`` (including its seed)."""
    if spec.cameras_per_domain < 2:
        raise ValueError("cross-camera evaluation needs at least two cameras per domain")
    if spec.samples_min < 2:
        raise ValueError("every identity needs at least two samples (query plus a match)")
    rng = np.random.default_rng(spec.seed)
    n_dom = spec.num_source_domains + 1
    lift = _orthonormal(rng, spec.raw_dim, spec.latent_dim)

    # nuisance directions: a pool shared by all domains blended with a domain-unique part,
    # each direction with a domain-specific strength
    rank = spec.style_rank
    pool = _orthonormal(rng, spec.raw_dim, max(rank, 1))[:, :rank]
    maps, offsets, styles, cams = [], [], [], []
    for _ in range(n_dom):
        maps.append(_domain_map(rng, spec))
        offsets.append(spec.domain_shift * rng.standard_normal(spec.raw_dim))
        unique = _orthonormal(rng, spec.raw_dim, max(rank, 1))[:, :rank]
        basis = spec.style_shared * pool + (1 - spec.style_shared) * unique
        strength = spec.style_scale * np.exp(0.5 * rng.standard_normal(rank))
        styles.append(basis * strength)
        cams.append(spec.camera_shift * rng.standard_normal((spec.cameras_per_domain, spec.raw_dim)))

    raws, pids, doms, camids = [], [], [], []
    pid = 0
    for d in range(n_dom):
        n_cls = spec.classes_per_domain if d < spec.num_source_domains else spec.target_classes
        protos = spec.prototype_scale * rng.standard_normal((n_cls, spec.latent_dim))
        for k in range(n_cls):
            n = int(rng.integers(spec.samples_min, spec.samples_max + 1))
            latent = protos[k] + spec.noise * rng.standard_normal((n, spec.latent_dim))
            style = rng.standard_normal((n, spec.style_rank)) @ styles[d].T
            cam = _cameras_for(rng, n, spec.cameras_per_domain)
            x = latent @ lift.T + style + cams[d][cam]
            raws.append(x @ maps[d].T + offsets[d])
            pids.append(np.full(n, pid))
            doms.append(np.full(n, d))
            camids.append(cam)
            pid += 1

    everything = Dataset(np.concatenate(raws), np.concatenate(pids), np.concatenate(doms),
                         np.concatenate(camids))
    src = everything.domains < spec.num_source_domains
    train = everything.subset(np.flatnonzero(src))
    target = everything.subset(np.flatnonzero(~src))

    q_idx, g_idx = [], []
    for p in np.unique(target.pids):
        members = np.flatnonzero(target.pids == p)
        qi = members[int(rng.integers(members.size))]
        q_idx.append(qi)
        g_idx.extend(members[target.cameras[members] != target.cameras[qi]].tolist())
    return GeneratedData(spec, train, target.subset(np.array(q_idx)), target.subset(np.array(sorted(g_idx))))


class PKSampler:
    """P identities x K samples per batch; identities with fewer than K samples repeat."""

    def __init__(self, pids, P: int = 8, K: int = 4):
        pids = np.asarray(pids)
        self.P, self.K = P, K
        self.pid_list = np.unique(pids)
        if self.pid_list.size < P:
            raise ValueError(f"need at least P={P} identities, dataset has {self.pid_list.size}")
        self.members: Dict[int, np.ndarray] = {int(p): np.flatnonzero(pids == p) for p in self.pid_list}

    def _draw(self, pid: int, rng) -> np.ndarray:
        m = self.members[int(pid)]
        return rng.choice(m, size=self.K, replace=m.size < self.K)

    def batch_for(self, chosen, rng) -> np.ndarray:
        return np.concatenate([self._draw(p, rng) for p in chosen])

    def sample(self, rng) -> np.ndarray:
        chosen = rng.choice(self.pid_list, size=self.P, replace=False)
        return self.batch_for(chosen, rng)

    def epoch(self, rng) -> List[np.ndarray]:
        """Batches covering every identity at least once; the last group is padded."""
        order = rng.permutation(self.pid_list)
        batches = []
        for start in range(0, order.size, self.P):
            group = order[start:start + self.P]
            if group.size < self.P:
                rest = np.setdiff1d(self.pid_list, group)
                group = np.concatenate([group, rng.choice(rest, self.P - group.size, replace=False)])
            batches.append(self.batch_for(group, rng))
        return batches


def pk_sample(dataset: Dataset, P: int, K: int, rng) -> np.ndarray:
    """Indices of one PK batch drawn from ``dataset``."""
    return PKSampler(dataset.pids, P, K).sample(rng)


def negative_sample(num_classes: int, batch_labels, sample_size: int, rng) -> np.ndarray:
    """Batch positives plus uniformly drawn negatives, ``min(sample_size, C)`` classes in total (sorted)."""
    pos = np.unique(np.asarray(batch_labels))
    if sample_size < pos.size:
        raise ValueError(f"sample size {sample_size} is smaller than the {pos.size} batch positives")
    target = min(sample_size, num_classes)
    if target == pos.size:
        return pos
    rest = np.setdiff1d(np.arange(num_classes), pos)
    neg = rng.choice(rest, size=target - pos.size, replace=False)
    return np.sort(np.concatenate([pos, neg]))
