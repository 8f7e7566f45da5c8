import itertools

import numpy as np
import pytest

from dexreid.evaluation import cmc_map, distance_matrix


def brute_force(dist, qp, gp, qc, gc, ranks=(1, 5, 10)):
    """AP and CMC by enumerating positions one at a time."""
    aps, hits, skipped = [], {k: 0 for k in ranks}, 0
    for i in range(len(qp)):
        keep = [j for j in range(len(gp)) if not (gp[j] == qp[i] and gc[j] == qc[i])]
        order = sorted(keep, key=lambda j: (dist[i, j], j))
        rel = [gp[j] == qp[i] for j in order]
        if not any(rel):
            skipped += 1
            continue
        found, prec = 0, []
        for pos, r in enumerate(rel, start=1):
            if r:
                found += 1
                prec.append(found / pos)
        aps.append(sum(prec) / len(prec))
        first = rel.index(True) + 1
        for k in ranks:
            hits[k] += first <= k
    n = len(aps)
    return {k: hits[k] / n for k in ranks}, sum(aps) / n, skipped


def test_distance_examples(rng):
    assert distance_matrix([[1.0, 2.0]], [[1.0, 2.0]])[0, 0] == 0.0
    assert distance_matrix([[0.0, 0.0]], [[3.0, 4.0]])[0, 0] == 5.0
    Q, G = rng.normal(size=(20, 7)), rng.normal(size=(30, 7))
    D = distance_matrix(Q, G)
    for i, j in itertools.product(range(20), range(30)):
        assert D[i, j] == pytest.approx(np.sqrt(sum((Q[i] - G[j]) ** 2)), rel=1e-12)
    with pytest.raises(ValueError):
        distance_matrix(Q, G[:, :3])


def test_nearest_neighbour_perfect():
    dist = np.array([[0.1, 2.0, 3.0], [2.0, 0.1, 3.0], [3.0, 2.0, 0.1]])
    m = cmc_map(dist, [0, 1, 2], [0, 1, 2], [0, 0, 0], [1, 1, 1])
    assert m.rank(1) == 1.0 and m.mAP == 1.0 and m.skipped_queries == 0


def test_hand_ap():
    m = cmc_map(np.array([[1.0, 2.0, 3.0]]), [7], [7, 8, 7], [0], [1, 1, 1])
    assert m.mAP == pytest.approx(5 / 6, abs=1e-15)


def test_junk_removal_and_skips():
    # gallery 0 shares pid and camera with query 0 and must be ignored
    dist = np.array([[0.0, 1.0, 2.0], [0.5, 0.2, 0.1]])
    m = cmc_map(dist, [1, 5], [1, 2, 1], [0, 0], [0, 1, 1])
    assert m.skipped_queries == 1 and m.num_queries == 2
    assert m.rank(1) == 0.0 and m.mAP == pytest.approx(0.5)
    with pytest.raises(ValueError):
        cmc_map(np.array([[1.0]]), [1], [1], [0], [0])


def test_random_instances_match_brute_force(rng):
    for _ in range(20):
        nq, ng = int(rng.integers(1, 11)), int(rng.integers(2, 21))
        dist = rng.integers(0, 6, size=(nq, ng)).astype(float)  # ties on purpose
        qp, gp = rng.integers(0, 4, nq), rng.integers(0, 4, ng)
        qc, gc = rng.integers(0, 2, nq), rng.integers(0, 2, ng)
        try:
            m = cmc_map(dist, qp, gp, qc, gc)
        except ValueError:
            continue
        cmc, mAP, skipped = brute_force(dist, qp, gp, qc, gc)
        assert abs(m.mAP - mAP) <= 1e-12 and m.skipped_queries == skipped
        for k in (1, 5, 10):
            assert abs(m.rank(k) - cmc[k]) <= 1e-12


def test_invariants_and_gallery_permutation(rng):
    dist = rng.uniform(size=(8, 15))
    qp, gp = rng.integers(0, 3, 8), rng.integers(0, 3, 15)
    qc, gc = rng.integers(0, 3, 8), rng.integers(0, 3, 15)
    m = cmc_map(dist, qp, gp, qc, gc, ranks=(1, 2, 5, 10))
    assert m.rank(1) <= m.rank(2) <= m.rank(5) <= m.rank(10)
    assert 0.0 <= m.mAP <= 1.0
    p = rng.permutation(15)
    m2 = cmc_map(dist[:, p], qp, gp[p], qc, gc[p], ranks=(1, 2, 5, 10))
    assert m2.mAP == pytest.approx(m.mAP, abs=1e-15) and m2.cmc == m.cmc


def test_record_schema():
    m = cmc_map(np.array([[1.0, 2.0]]), [0], [0, 1], [0], [1, 1])
    rec = m.record()
    assert {"rank_1", "rank_5", "rank_10", "mAP", "skipped_queries"} <= set(rec)
    assert m.to_json() == m.to_json()
