"""Retrieval metrics under the single-query ReID protocol."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Sequence

import numpy as np


def distance_matrix(queries, gallery) -> np.ndarray:
    Q = np.asarray(queries, dtype=np.float64)
    G = np.asarray(gallery, dtype=np.float64)
    if Q.ndim != 2 or G.ndim != 2 or Q.shape[1] != G.shape[1]:
        raise ValueError(f"feature dimensions differ: {Q.shape} vs {G.shape}")
    # exact differences rather than the expanded |q|^2 + |g|^2 - 2qg form
    out = np.empty((Q.shape[0], G.shape[0]))
    for i, q in enumerate(Q):
        diff = G - q
        out[i] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return out


@dataclass
class RetrievalMetrics:
    cmc: Dict[int, float]
    mAP: float
    skipped_queries: int
    num_queries: int
    aps: np.ndarray = field(default=None, repr=False)

    def rank(self, k: int) -> float:
        return self.cmc[k]

    def record(self) -> dict:
        rec = {f"rank_{k}": v for k, v in sorted(self.cmc.items())}
        rec.update(mAP=self.mAP, skipped_queries=self.skipped_queries,
                   num_queries=self.num_queries)
        return rec

    def to_json(self) -> str:
        return json.dumps(self.record(), indent=2, sort_keys=True)


def cmc_map(distmat, q_pids, g_pids, q_cams, g_cams, ranks: Sequence[int] = (1, 5, 10)) -> RetrievalMetrics:
    """CMC at ``ranks`` and mAP with same-identity/same-camera junk removal.

    Ties in distance are broken by gallery index. Queries without any valid
    match are skipped and counted in ``skipped_queries``.
    """
    distmat = np.asarray(distmat, dtype=np.float64)
    q_pids, g_pids = np.asarray(q_pids), np.asarray(g_pids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    nq, ng = distmat.shape
    order = np.argsort(distmat, axis=1, kind="stable")
    max_rank = max(ranks)
    hits = np.zeros(max(max_rank, 1))
    aps = []
    skipped = 0
    for i in range(nq):
        idx = order[i]
        junk = (g_pids[idx] == q_pids[i]) & (g_cams[idx] == q_cams[i])
        idx = idx[~junk]
        matches = g_pids[idx] == q_pids[i]
        if not matches.any():
            skipped += 1
            continue
        first = int(np.argmax(matches))
        if first < max_rank:
            hits[first:] += 1
        positions = np.flatnonzero(matches) + 1
        precision = np.arange(1, positions.size + 1) / positions
        aps.append(precision.mean())
    valid = nq - skipped
    if valid == 0:
        raise ValueError("no query has a valid gallery match")
    cmc = {k: float(hits[k - 1] / valid) for k in ranks}
    aps = np.asarray(aps)
    return RetrievalMetrics(cmc, float(aps.mean()), skipped, nq, aps)
