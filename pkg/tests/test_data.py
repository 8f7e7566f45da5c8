import dataclasses

import numpy as np
import pytest

from dexreid.data import (Dataset, GeneratedData, PKSampler, SyntheticSpec, generate, negative_sample,
                          pk_sample)

SMALL = SyntheticSpec(num_source_domains=2, classes_per_domain=10, target_classes=8, raw_dim=12,
                      latent_dim=6, style_rank=3, samples_min=4, samples_max=8, seed=3)


def test_same_seed_identical_bytes():
    assert generate(SMALL).to_bytes("x") == generate(SMALL).to_bytes("x")
    other = dataclasses.replace(SMALL, seed=4)
    assert generate(other).to_bytes("x") != generate(SMALL).to_bytes("x")


def test_default_spec_layout():
    data = generate(SyntheticSpec())
    h = data.header()
    assert h["num_source_domains"] == 3 and h["num_target_domains"] == 1
    assert set(np.unique(data.train.domains)) == {0, 1, 2}
    assert set(np.unique(data.query.domains)) == {3}
    assert data.num_classes == 150
    assert not h["degenerate"]
    counts = np.bincount(data.train.pids)
    assert counts.min() >= 10 and counts.max() <= 25
    tgt = np.concatenate([data.query.pids, data.gallery.pids])
    t_counts = np.unique(tgt, return_counts=True)[1]
    assert t_counts.max() <= 25


def test_target_split_is_cross_camera():
    data = generate(SMALL)
    assert data.query.pids.size == np.unique(data.query.pids).size == 8
    for p, c in zip(data.query.pids, data.query.cameras):
        g = data.gallery.pids == p
        assert g.any() and np.all(data.gallery.cameras[g] != c)
    assert np.intersect1d(data.train.pids, data.query.pids).size == 0


def test_degenerate_spec():
    spec = dataclasses.replace(SMALL, domain_shift=0.0, noise=0.0, style_scale=0.0, camera_shift=0.0)
    data = generate(spec)
    assert data.header()["degenerate"]
    # every domain is the same embedding of its prototypes: one point per pid, one shared subspace
    for p in np.unique(data.train.pids):
        rows = data.train.raw[data.train.pids == p]
        assert np.allclose(rows, rows[0], atol=1e-12)
    allraw = np.concatenate([data.train.raw, data.query.raw, data.gallery.raw])
    s = np.linalg.svd(allraw, compute_uv=False)
    assert np.sum(s > 1e-9 * s[0]) <= spec.latent_dim


def test_infeasible_specs():
    with pytest.raises(ValueError):
        generate(dataclasses.replace(SMALL, cameras_per_domain=1))
    with pytest.raises(ValueError):
        generate(dataclasses.replace(SMALL, samples_min=1))
    with pytest.raises(ValueError):
        SyntheticSpec(samples_min=10, samples_max=5)


def test_dataset_round_trip(tmp_path):
    data = generate(SMALL)
    data.save(tmp_path / "d.bin", "cfg")
    back = GeneratedData.load(tmp_path / "d.bin")
    assert back.spec == SMALL
    assert np.array_equal(back.train.raw, data.train.raw)
    assert np.array_equal(back.gallery.cameras, data.gallery.cameras)


def test_pk_batch_structure(rng):
    data = generate(SyntheticSpec())
    idx = pk_sample(data.train, 8, 4, rng)
    assert idx.size == 32
    pids = data.train.pids[idx]
    assert np.unique(pids).size == 8
    assert np.all(np.unique(pids, return_counts=True)[1] == 4)


def test_pk_singleton_cover(rng):
    pids = np.arange(12)
    idx = PKSampler(pids, 12, 1).sample(rng)
    assert sorted(idx.tolist()) == list(range(12))


def test_pk_too_few_pids():
    with pytest.raises(ValueError):
        PKSampler(np.arange(5), 8, 4)


def test_pk_histogram_uniform():
    rng = np.random.default_rng(7)
    pids = np.repeat(np.arange(20), 5)
    sampler = PKSampler(pids, 8, 4)
    n = 10_000
    counts = np.zeros(20)
    for _ in range(n):
        counts[np.unique(pids[sampler.sample(rng)])] += 1
    p = 8 / 20
    mu, sd = n * p, np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - mu) <= 3 * sd)
    chi2 = float(np.sum((counts - mu) ** 2 / mu))
    # df = 19; mean 19, sd sqrt(38); inclusion draws are negatively correlated so this is conservative
    assert chi2 <= 19 + 4 * np.sqrt(38)


def test_pk_epoch_covers_all(rng):
    pids = np.repeat(np.arange(19), 3)
    batches = PKSampler(pids, 8, 4).epoch(rng)
    assert len(batches) == 3
    seen = np.unique(np.concatenate([pids[b] for b in batches]))
    assert seen.size == 19


def test_negative_sample_examples(rng):
    labels = np.array([3, 3, 7, 1])
    assert np.array_equal(negative_sample(10, labels, 10, rng), np.arange(10))
    assert np.array_equal(negative_sample(10, labels, 3, rng), [1, 3, 7])
    big = negative_sample(10_000, rng.integers(0, 10_000, 32), 2000, rng)
    assert big.size == 2000 and np.unique(big).size == 2000
    with pytest.raises(ValueError):
        negative_sample(10, labels, 2, rng)


def test_negative_sample_contains_positives(rng):
    labels = rng.choice(150, 8, replace=False)
    P = negative_sample(150, labels, 37, rng)
    assert P.size == 37 and set(labels) <= set(P.tolist())
    assert np.all(np.diff(P) > 0)


def test_dataset_subset():
    ds = Dataset(np.arange(8.0).reshape(4, 2), np.array([0, 0, 1, 1]), np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1]))
    assert len(ds.subset([1, 2])) == 2
    assert np.array_equal(ds.domain(1).pids, [1, 1])
