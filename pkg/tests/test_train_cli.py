import csv
import dataclasses
import io
import json

import numpy as np
import pytest

from dexreid.cli import main
from dexreid.config import DESK_LAMBDA, ExperimentConfig
from dexreid.data import SyntheticSpec, generate
from dexreid.losses import AugmentationSchedule, lambda_at
from dexreid.train import LOG_COLUMNS, Trainer

SPEC = SyntheticSpec(num_source_domains=2, classes_per_domain=12, target_classes=10, raw_dim=16,
                     latent_dim=8, style_rank=3, samples_min=5, samples_max=9, seed=1)


@pytest.fixture(scope="module")
def data():
    return generate(SPEC)


def cfg(**kw):
    base = ExperimentConfig(data=SPEC, epochs=4, hidden=(16,), feature_dim=8)
    return base.with_overrides(**kw)


def test_config_defaults():
    c = ExperimentConfig()
    w = c.weights
    assert (c.lam, c.P, c.K, c.batch_size) == (7.5, 8, 4, 32)
    assert (w.beta_soft, w.beta_tri, w.beta_cen, w.margin, w.epsilon) == (1.0, 1.0, 5e-4, 0.3, 0.1)
    assert ExperimentConfig.from_text(c.to_text()) == c
    assert DESK_LAMBDA < c.lam


def test_config_text_round_trip_with_overrides():
    c = cfg(mode="dexlite", sample_size=9, bank_mode="diagonal", branches=2, aggregate="sum", lam=3.0)
    assert ExperimentConfig.from_text(c.to_text()) == c
    assert c.lambda_scale == 0.5


def test_base_log_lambda_zero(data):
    tr = Trainer(cfg(mode="base"), data)
    hist = tr.fit()
    assert [r["lambda_t"] for r in hist] == [0.0] * 4
    assert all(r["dex_softmax_gap"] == 0.0 for r in hist)


@pytest.mark.parametrize("mode", ["dex", "dexlite", "isda"])
def test_lambda_column_follows_schedule(data, mode):
    c = cfg(mode=mode, lam=2.0, sample_size=12)
    hist = Trainer(c, data).fit()
    sched = AugmentationSchedule(2.0, 4)
    assert [r["lambda_t"] for r in hist] == [lambda_at(sched, t) for t in range(1, 5)]
    assert all(np.isfinite(r["loss_total"]) for r in hist)


def test_dexlite_eval_count(data):
    c = cfg(mode="dexlite", sample_size=12)
    tr = Trainer(c, data)
    steps = len(tr.sampler.pid_list) // 8 + (len(tr.sampler.pid_list) % 8 > 0)
    hist = tr.fit(stop_after=1)
    # the log reports the per-epoch total
    assert hist[0]["qf_evals"] == steps * 32 * 12


def test_multibranch_trains(data):
    for agg in ("mean", "sum"):
        c = cfg(mode="dex", branches=2, aggregate=agg, lam=2.0)
        hist = Trainer(c, data).fit()
        assert np.isfinite(hist[-1]["loss_total"])


def test_training_is_deterministic(data):
    a = Trainer(cfg(mode="dex"), data)
    b = Trainer(cfg(mode="dex"), data)
    a.fit()
    b.fit()
    assert a.checkpoint_bytes() == b.checkpoint_bytes()


def test_resume_bit_identical(data, tmp_path):
    full = Trainer(cfg(mode="dexlite", sample_size=10), data)
    full.fit()
    part = Trainer(cfg(mode="dexlite", sample_size=10), data)
    part.fit(stop_after=2)
    part.save_checkpoint(tmp_path / "ck.bin")
    resumed = Trainer.from_checkpoint(tmp_path / "ck.bin", data)
    resumed.fit()
    assert resumed.checkpoint_bytes() == full.checkpoint_bytes()
    assert resumed.history == full.history


def test_checkpoint_data_mismatch(data, tmp_path):
    tr = Trainer(cfg(), data)
    tr.save_checkpoint(tmp_path / "ck.bin")
    other = generate(dataclasses.replace(SPEC, seed=2))
    with pytest.raises(ValueError):
        Trainer.from_checkpoint(tmp_path / "ck.bin", other)


def test_separable_target_reaches_perfect_map():
    spec = dataclasses.replace(SPEC, noise=0.0, style_scale=0.0, camera_shift=0.0, domain_shift=0.0,
                               prototype_scale=5.0)
    data = generate(spec)
    tr = Trainer(cfg(data=None).with_overrides(**{f"data_{k}": v for k, v in spec.to_dict().items()}), data)
    assert tr.evaluate().mAP == 1.0


def test_untrained_encoder_near_chance(data):
    tr = Trainer(cfg(), data)
    # bypass learned structure: random features for every target sample
    rng = np.random.default_rng(0)
    from dexreid.evaluation import cmc_map
    q, g = data.query, data.gallery
    maps = []
    for _ in range(200):
        perm = rng.permutation(len(g))
        dist = np.tile(np.argsort(perm).astype(float), (len(q), 1))
        maps.append(cmc_map(dist, q.pids, g.pids, q.cameras, g.cameras).mAP)
    chance = float(np.mean(maps))
    feats = rng.normal(size=(len(q) + len(g), 8))
    from dexreid.evaluation import distance_matrix
    m = cmc_map(distance_matrix(feats[:len(q)], feats[len(q):]), q.pids, g.pids, q.cameras, g.cameras)
    assert abs(m.mAP - chance) <= 4 * np.std(maps)
    assert tr.evaluate().mAP > chance


# command-line interface


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture
def out(tmp_path):
    d = tmp_path / "run"
    cfg_path = tmp_path / "small.ini"
    cfg_path.write_text(cfg().to_text())
    assert run("gen", "--config", cfg_path, "--out", d) == 0
    return d, cfg_path


def test_cli_gen_deterministic(out, tmp_path):
    d, cfg_path = out
    d2 = tmp_path / "again"
    run("gen", "--config", cfg_path, "--out", d2)
    assert (d / "dataset.bin").read_bytes() == (d2 / "dataset.bin").read_bytes()
    assert ExperimentConfig.load(d / "config.ini") == cfg()


def test_cli_gen_degenerate_flag(tmp_path, capsys):
    c = cfg().with_overrides(data_noise=0.0)
    (tmp_path / "c.ini").write_text(c.to_text())
    run("gen", "--config", tmp_path / "c.ini", "--out", tmp_path / "g")
    assert json.loads(capsys.readouterr().out)["degenerate"] is True


def test_cli_train_resume_eval(out, capsys):
    d, cfg_path = out
    assert run("train", "--config", cfg_path, "--out", d, "--mode", "dex", "--lambda", 2.0,
               "--stop-after", 2) == 0
    rows = list(csv.DictReader(io.StringIO((d / "train_log.csv").read_text())))
    assert len(rows) == 2 and tuple(rows[0]) == LOG_COLUMNS
    assert run("train", "--out", d, "--resume") == 0
    resumed = (d / "checkpoint.bin").read_bytes()
    log = (d / "train_log.csv").read_text()

    d2 = d.parent / "straight"
    run("gen", "--config", cfg_path, "--out", d2)
    run("train", "--config", cfg_path, "--out", d2, "--mode", "dex", "--lambda", 2.0)
    assert (d2 / "checkpoint.bin").read_bytes() == resumed
    assert (d2 / "train_log.csv").read_text() == log

    capsys.readouterr()
    assert run("eval", "--out", d) == 0
    first = capsys.readouterr().out
    run("eval", "--out", d)
    assert capsys.readouterr().out == first
    rec = json.loads((d / "metrics.json").read_text())
    assert {"rank_1", "rank_5", "rank_10", "mAP", "skipped_queries"} <= set(rec)
    assert "[train]" in rec["config"]


def test_cli_train_mismatch(out, tmp_path):
    d, _ = out
    other = cfg().with_overrides(data_seed=99)
    (tmp_path / "o.ini").write_text(other.to_text())
    with pytest.raises(SystemExit):
        run("train", "--config", tmp_path / "o.ini", "--out", d)


def test_cli_missing_files(tmp_path):
    with pytest.raises(SystemExit):
        run("train", "--out", tmp_path / "nothing")
    with pytest.raises(SystemExit):
        run("eval", "--out", tmp_path / "nothing")


def test_cli_bench(out):
    d, cfg_path = out
    assert run("bench", "--config", cfg_path, "--out", d, "--steps", 3, "--sample-sizes", 8, 12, 24) == 0
    rows = list(csv.DictReader(io.StringIO((d / "bench.csv").read_text())))
    assert [int(r["sample_size"]) for r in rows] == [8, 12, 24]
    assert [float(r["qf_evals_per_step"]) for r in rows] == [32 * 8, 32 * 12, 32 * 24]
    c = cfg(mode="dex")
    tr = Trainer(c, generate(SPEC))
    assert tr.train_step(tr.sampler.sample(tr.batch_rng), 1, 1e-3)["qf_evals"] == 32 * 24
    assert len({r["peak_bank_scalars"] for r in rows}) == 1


def test_cli_verify(capsys):
    assert run("verify", "--instances", 3, "--mc-samples", 500) == 0
    text = capsys.readouterr().out
    line = next(l for l in text.splitlines() if "dex(lambda=0) == softmax" in l)
    assert line.startswith("PASS")
    assert float(line.split("measured=")[1].split()[0]) <= 1e-12
    assert run("verify", "--instances", 3, "--mc-samples", 500, "--corrupt-bank") == 1
    text = capsys.readouterr().out
    assert next(l for l in text.splitlines() if "PSD" in l).startswith("FAIL")
