"""Command-line entry point: ``dexreid {gen,train,eval,verify,bench}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import GeneratedData, generate
from .train import Trainer, evaluate_encoder, history_csv

DATASET_FILE = "dataset.bin"
CHECKPOINT_FILE = "checkpoint.bin"
LOG_FILE = "train_log.csv"
METRICS_FILE = "metrics.json"
BENCH_COLUMNS = ("sample_size", "qf_evals_per_step", "wall_time_per_step", "peak_bank_scalars", "mAP")


def load_config(args, data_seed: bool = False) -> ExperimentConfig:
    """Config file (or defaults) with command-line overrides applied.

    ``--seed`` sets the training seed; with ``data_seed`` it also seeds the generator.
    """
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
        if data_seed:
            overrides["data_seed"] = args.seed
    for flag, key in (("mode", "mode"), ("sample_size", "sample_size"), ("branches", "branches"),
                      ("aggregate", "aggregate"), ("lam", "lam"), ("epochs", "epochs")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "bank", None) is not None:
        overrides["bank_mode"] = {"diag": "diagonal"}.get(args.bank, args.bank)
    return cfg.with_overrides(**overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(args, out: Path) -> GeneratedData:
    path = Path(args.data) if getattr(args, "data", None) else out / DATASET_FILE
    if not path.exists():
        raise SystemExit(f"dataset not found: {path} (run 'dexreid gen' first)")
    return GeneratedData.load(path)


def cmd_gen(args) -> int:
    cfg = load_config(args, data_seed=True)
    out = _out_dir(args)
    data = generate(cfg.data)
    data.save(out / DATASET_FILE, cfg.to_text())
    (out / "config.ini").write_text(cfg.to_text())
    print(json.dumps(data.header(), indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    ckpt = out / CHECKPOINT_FILE
    data = _load_data(args, out)
    if args.resume:
        trainer = Trainer.from_checkpoint(ckpt, data)
        cfg = trainer.cfg
    else:
        cfg = load_config(args)
        if cfg.data != data.spec:
            raise SystemExit("config [data] section does not match the dataset file")
        trainer = Trainer(cfg, data)
    (out / "config.ini").write_text(cfg.to_text())

    def on_epoch(tr, row):
        tr.save_checkpoint(ckpt)
        (out / LOG_FILE).write_text(history_csv(tr.history))

    trainer.fit(stop_after=args.stop_after, on_epoch=on_epoch)
    (out / LOG_FILE).write_text(history_csv(trainer.history))
    print(f"trained {trainer.epoch}/{cfg.epochs} epochs; checkpoint {ckpt}")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_FILE
    if not ckpt.exists():
        raise SystemExit(f"checkpoint not found: {ckpt}")
    data = _load_data(args, out)
    trainer = Trainer.from_checkpoint(ckpt, data)
    metrics = evaluate_encoder(trainer.encoder, data)
    record = dict(metrics.record(), epoch=trainer.epoch, config=trainer.cfg.to_text())
    text = json.dumps(record, indent=2, sort_keys=True)
    (out / METRICS_FILE).write_text(text + "\n")
    print(text)
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all
    seed = 0 if args.seed is None else args.seed
    checks = run_all(seed, args.instances, args.mc_samples, corrupt_bank=args.corrupt_bank)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} properties passed")
    return 1 if failed else 0


def bench_rows(cfg: ExperimentConfig, data: GeneratedData, sample_sizes, steps: int,
               with_eval: bool):
    C = data.num_classes
    rows = []
    for size in sample_sizes:
        size = min(int(size), C)
        run_cfg = cfg.with_overrides(mode="dexlite", sample_size=size)
        tr = Trainer(run_cfg, data)
        batches = []
        while len(batches) < steps:
            batches.extend(tr.sampler.epoch(tr.batch_rng))
        evals = []
        start = time.perf_counter()
        for idx in batches[:steps]:
            evals.append(tr.train_step(idx, run_cfg.epochs, tr.optimizer.lr_at(run_cfg.epochs))["qf_evals"])
        wall = (time.perf_counter() - start) / steps
        peak = sum(b.stored_scalars() for b in tr._banks().values())
        mAP = ""
        if with_eval:
            full = Trainer(run_cfg, data)
            full.fit()
            mAP = repr(full.evaluate().mAP)
        rows.append((size, float(np.mean(evals)), wall, peak, mAP))
    return rows


def cmd_bench(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    data = _load_data(args, out)
    C = data.num_classes
    sizes = args.sample_sizes or [cfg.P, C // 4, C // 2, C]
    rows = bench_rows(cfg, data, sizes, args.steps, args.with_eval)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        w.writerows(rows)
    print((out / "bench.csv").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dexreid", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, training=True):
        sp.add_argument("--config", help="INI experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default="runs/default")
        if training:
            sp.add_argument("--mode", choices=("base", "dex", "dexlite", "isda"))
            sp.add_argument("--sample-size", dest="sample_size", type=int)
            sp.add_argument("--bank", choices=("full", "diag", "diagonal"))
            sp.add_argument("--branches", type=int)
            sp.add_argument("--aggregate", choices=("mean", "sum"))
            sp.add_argument("--lambda", dest="lam", type=float)
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--data", help="dataset file (default OUT/dataset.bin)")

    sp = sub.add_parser("gen", help="generate the synthetic multi-domain dataset")
    common(sp, training=False)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train an encoder and write checkpoint plus CSV log")
    common(sp)
    sp.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.bin")
    sp.add_argument("--stop-after", dest="stop_after", type=int, help="stop after this epoch")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="retrieval metrics on the target domain")
    common(sp, training=False)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("verify", help="run the invariant certification suite")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--instances", type=int, default=40, help="random instances per lambda")
    sp.add_argument("--mc-samples", dest="mc_samples", type=int, default=4000)
    sp.add_argument("--corrupt-bank", dest="corrupt_bank", action="store_true",
                    help="negative control: inject a non-PSD covariance")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("bench", help="cost (and optionally mAP) per negative sample size")
    common(sp)
    sp.add_argument("--sample-sizes", dest="sample_sizes", type=int, nargs="+")
    sp.add_argument("--steps", type=int, default=20)
    sp.add_argument("--with-eval", dest="with_eval", action="store_true")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
