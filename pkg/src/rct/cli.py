"""Command-line entry point: ``rct <command> [options]``.

Commands write every output under ``--out`` with fixed names (metrics.csv,
scores.json, table.csv, sweep.csv, run.json). Each command records a run
manifest with the configuration, the seed and a content hash of its inputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from .errors import FormatError, IoError, RCTError
from .features import extract, load_wav, read_feature, write_feature
from .model import Predictions, load_checkpoint, predict
from .synthdata import GenConfig, gen_dataset, labels_from_annotation, read_manifest, save_dataset
from .train import STRATEGIES, TrainConfig, build_data, load_config, train, validation_bce, write_metrics

log = logging.getLogger("rct")

TRAIN_MANIFESTS = ("weak.jsonl", "strong.jsonl", "unlabeled.jsonl")
VAL_MANIFEST = "validation.jsonl"
VAL_SEED_OFFSET = 1000
FEATURE_DIR = "features"
FEATURE_INDEX = "index.json"
METRICS = ("psds1", "psds2", "macro_f1", "val_bce")


# ---------------------------------------------------------------- run manifest

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None = None
    inputs: dict = field(default_factory=dict)   # path -> sha256
    outputs: list = field(default_factory=list)
    duration_s: float = 0.0
    version: str = __version__

    @property
    def input_hash(self) -> str:
        """One digest over the sorted (path, content hash) pairs, like a tree hash."""
        h = hashlib.sha256()
        for name in sorted(self.inputs):
            h.update(f"{name}\0{self.inputs[name]}\n".encode())
        return h.hexdigest()

    def add_input(self, path):
        self.inputs[str(path)] = sha256_file(path)

    def write(self, out_dir) -> Path:
        rec = dataclasses.asdict(self)
        rec["input_hash"] = self.input_hash
        return write_text(Path(out_dir) / "run.json", json.dumps(rec, indent=2, sort_keys=True) + "\n")


def write_text(path, text: str) -> Path:
    """Write via a temporary sibling so a failed command never leaves half a file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text)
        tmp.replace(path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def make_out_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise IoError(f"output directory {path} is not writable")
    return path


def n_workers(n_jobs: int) -> int:
    cap = os.environ.get("RCT_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


def run_parallel(fn, jobs):
    """Map ``fn`` over ``jobs`` in worker processes; results come back in job order."""
    jobs = list(jobs)
    workers = n_workers(len(jobs))
    if workers == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------- data + features

def _extract_one(job):
    wav_path, out_path = job
    try:
        write_feature(out_path, extract(load_wav(wav_path)))
        return None
    except (FormatError, ValueError) as exc:
        return str(exc)


def cache_features(annotations, audio_dir, cache_dir):
    """Extract missing or stale feature records; returns (n_extracted, failures).

    A record is reused when the WAV's sha256 matches the hash stored in the
    cache index. A missing WAV raises IoError; unreadable ones are reported in
    ``failures`` (clip_id -> message) while the other clips proceed.
    """
    audio_dir, cache_dir = Path(audio_dir), Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    index_path = cache_dir / FEATURE_INDEX
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    jobs, hashes = [], {}
    for ann in annotations:
        wav = audio_dir / f"{ann.clip_id}.wav"
        if not wav.exists():
            raise IoError(f"missing audio for clip {ann.clip_id}: {wav}")
        digest = sha256_file(wav)
        rec = cache_dir / f"{ann.clip_id}.feat"
        if index.get(ann.clip_id) == digest and rec.exists():
            continue
        index.pop(ann.clip_id, None)
        hashes[ann.clip_id] = digest
        jobs.append((ann.clip_id, (str(wav), str(rec))))
    results = run_parallel(_extract_one, [j for _, j in jobs])
    failures = {}
    for (clip_id, _), err in zip(jobs, results):
        if err is None:
            index[clip_id] = hashes[clip_id]
        else:
            failures[clip_id] = err
            log.error("clip %s: %s", clip_id, err)
    write_text(index_path, json.dumps(index, indent=1, sort_keys=True) + "\n")
    return len(jobs) - len(failures), failures


def load_features(annotations, cache_dir) -> dict:
    return {a.clip_id: read_feature(Path(cache_dir) / f"{a.clip_id}.feat") for a in annotations}


@dataclass
class Dataset:
    train_anns: list
    val_anns: list
    train: object
    val: object
    median_lengths: list
    inputs: list


def load_dataset(data_dir, n_classes: int, n_frames: int = 624, cache_dir=None) -> Dataset:
    """Read the manifests under ``data_dir``, make sure features are cached, assemble arrays."""
    data_dir = Path(data_dir)
    cache_dir = Path(cache_dir) if cache_dir else data_dir / FEATURE_DIR
    paths = [data_dir / name for name in TRAIN_MANIFESTS]
    for p in paths + [data_dir / VAL_MANIFEST]:
        if not p.exists():
            raise IoError(f"missing manifest {p}")
    train_anns = [a for p in paths for a in read_manifest(p)]
    val_anns = read_manifest(data_dir / VAL_MANIFEST)
    _, failures = cache_features(train_anns + val_anns, data_dir / "audio", cache_dir)
    if failures:
        raise FormatError(f"feature extraction failed for {len(failures)} clip(s): {sorted(failures)}")
    clips = load_features(train_anns + val_anns, cache_dir)
    strong = [a for a in train_anns if a.split == "strong"]
    return Dataset(train_anns, val_anns,
                   build_data(train_anns, clips, n_classes, n_frames),
                   build_data(val_anns, clips, n_classes, n_frames),
                   ev.median_lengths_from_annotations(strong, n_classes),
                   paths + [data_dir / VAL_MANIFEST])


def score_params(params, mcfg, ds: Dataset, temperature=ev.TEMPERATURE) -> dict:
    """Evaluate one parameter set on the validation split."""
    preds = predict(params, ds.val.x, mcfg)
    scores = ev.score_predictions(preds, ds.val.clip_ids, ds.val_anns, mcfg.n_classes, ds.median_lengths,
                                  temperature)
    scores["val_bce"] = validation_bce(params, ds.val.x, ds.val.strong, mcfg)
    return scores


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    out = make_out_dir(args.out)
    counts = dict(n_weak=args.n_weak, n_strong=args.n_strong, n_unlabeled=args.n_unlabeled)
    n_val = args.n_val
    if args.clips is not None:
        counts = dict(n_weak=args.clips, n_strong=args.clips, n_unlabeled=4 * args.clips)
        n_val = args.clips
    cfg = GenConfig(n_classes=args.classes, seed=args.seed, **counts)
    man = RunManifest("gen-data", {**dataclasses.asdict(cfg), "n_val": n_val}, args.seed)
    t0 = time.perf_counter()
    try:
        waves, anns = gen_dataset(cfg)
        paths = save_dataset(out, waves, anns)
        vcfg = dataclasses.replace(cfg, seed=args.seed + VAL_SEED_OFFSET, n_weak=0, n_strong=n_val,
                                   n_unlabeled=0, id_prefix="val_")
        vwaves, vanns = gen_dataset(vcfg)
        paths["validation"] = save_dataset(out, vwaves, vanns, {"strong": VAL_MANIFEST})["strong"]
    except OSError as exc:
        raise IoError(f"cannot write dataset to {out}: {exc}") from exc
    sizes = {**cfg.counts(), "validation": n_val}
    print(" ".join(f"{k}={v}" for k, v in sizes.items()))
    man.outputs = sorted(str(p.relative_to(out)) for p in paths.values()) + ["audio/"]
    man.duration_s = time.perf_counter() - t0
    man.write(out)
    return 0


def cmd_features(args) -> int:
    data = Path(args.data)
    cache = Path(args.cache) if args.cache else data / FEATURE_DIR
    manifests = [Path(m) for m in args.manifest] if args.manifest else \
        [data / n for n in TRAIN_MANIFESTS + (VAL_MANIFEST,) if (data / n).exists()]
    man = RunManifest("features", {"manifests": [str(m) for m in manifests], "cache": str(cache)})
    t0 = time.perf_counter()
    anns = []
    for m in manifests:
        man.add_input(m)
        anns.extend(read_manifest(m))
    n_done, failures = cache_features(anns, data / "audio", cache)
    print(f"extracted={n_done} cached={len(anns) - n_done - len(failures)} failed={len(failures)}")
    man.outputs = [str(cache / FEATURE_INDEX)]
    man.duration_s = time.perf_counter() - t0
    make_out_dir(cache)
    man.write(cache)
    return 1 if failures else 0


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    changes = {"strategy": args.strategy, "seed": args.seed}
    if args.epochs is not None:
        changes["epochs"] = args.epochs
        changes["warmup_epochs"] = min(cfg.warmup_epochs, args.epochs)
    return cfg.replace(**changes)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = make_out_dir(args.out)
    t0 = time.perf_counter()
    ds = load_dataset(args.data, cfg.n_classes, cfg.n_frames)
    man = RunManifest("train", dataclasses.asdict(cfg), cfg.seed)
    for p in ds.inputs:
        man.add_input(p)
    if args.config:
        man.add_input(args.config)
    result = train(cfg, ds.train, ds.val, out_dir=out)
    write_metrics(out / "metrics.csv", result.reports, result.val_curve)
    write_text(out / "config.txt", cfg.to_text())
    man.outputs = ["metrics.csv", "config.txt"] + sorted(p.name for p in result.checkpoints.values())
    man.duration_s = time.perf_counter() - t0
    man.write(out)
    return 0


def _oracle_predictions(ds_anns, n_out, n_classes) -> Predictions:
    strong = np.stack([labels_from_annotation(a, n_out, n_classes)[1] for a in ds_anns])
    return Predictions(strong, strong.max(axis=1))


def write_scores(out, scores, n_classes) -> None:
    keep = {k: scores[k] for k in ("psds1", "psds2", "macro_f1", "f1_per_class") if k in scores}
    if "val_bce" in scores:
        keep["val_bce"] = scores["val_bce"]
    write_text(out / "scores.json", json.dumps(keep, indent=2, sort_keys=True) + "\n")
    rows = ["metric,class,value"]
    for k in ("psds1", "psds2", "macro_f1", "val_bce"):
        if k in scores:
            rows.append(f"{k},all,{float(scores[k])!r}")
    for c, v in enumerate(scores["f1_per_class"]):
        rows.append(f"f1,{c},{'' if v is None else repr(float(v))}")
    write_text(out / "scores.csv", "\n".join(rows) + "\n")
    for name in ("psds1", "psds2"):
        curve = scores.get(f"{name}_curve")
        if curve is not None:
            lines = ["threshold,class,tpr,efpr"] + [f"{t!r},{c},{tp!r},{fp!r}" for t, c, tp, fp in curve]
            write_text(out / f"roc_{name}.csv", "\n".join(lines) + "\n")


def cmd_eval(args) -> int:
    out = make_out_dir(args.out)
    t0 = time.perf_counter()
    data = Path(args.data)
    manifest = Path(args.manifest) if args.manifest else data / VAL_MANIFEST
    man = RunManifest("eval", {"checkpoints": [str(c) for c in args.checkpoint], "manifest": str(manifest),
                               "temperature": args.temperature, "oracle": args.oracle})
    man.add_input(manifest)
    anns = read_manifest(manifest)
    strong_anns = read_manifest(data / "strong.jsonl") if (data / "strong.jsonl").exists() else anns
    models = []
    for c in args.checkpoint:
        man.add_input(c)
        mcfg, student, teacher, _ = load_checkpoint(c)
        models.append((mcfg, teacher if args.teacher else student))
    if not models and not args.oracle:
        raise RCTError("give at least one --checkpoint (or --oracle)")
    n_classes = models[0][0].n_classes if models else args.classes
    lengths = args.median or ev.median_lengths_from_annotations(strong_anns, n_classes)
    n_frames = models[0][0].n_frames if models else 624
    if args.oracle:
        preds = _oracle_predictions(anns, n_frames // 4, n_classes)
    else:
        if len({m.digest() for m, _ in models}) != 1:
            log.info("ensembling checkpoints with different architectures")
        _, failures = cache_features(anns, manifest.parent / "audio", manifest.parent / FEATURE_DIR)
        if failures:
            raise FormatError(f"feature extraction failed for {sorted(failures)}")
        clips = load_features(anns, manifest.parent / FEATURE_DIR)
        per_model = []
        for mcfg, params in models:
            x = build_data(anns, clips, mcfg.n_classes, mcfg.n_frames).x
            p = predict(params, x, mcfg)
            per_model.append(ev.temperature_scale(p, args.temperature) if args.temperature != 1.0 else p)
        preds = ev.ensemble(per_model)
    clip_ids = [a.clip_id for a in anns]
    scores = ev.score_predictions(preds, clip_ids, anns, n_classes, lengths, temperature=1.0,
                                  strict=not args.median, with_curves=True)
    write_scores(out, scores, n_classes)
    print(f"psds1={scores['psds1']:.4f} psds2={scores['psds2']:.4f} macro_f1={scores['macro_f1']:.4f}")
    man.outputs = ["scores.json", "scores.csv", "roc_psds1.csv", "roc_psds2.csv"]
    man.duration_s = time.perf_counter() - t0
    man.write(out)
    return 0


def _cell(job):
    """Train one (strategy, seed[, d_max]) cell and score the final student."""
    data_dir, cfg = job
    ds = load_dataset(data_dir, cfg.n_classes, cfg.n_frames)
    res = train(cfg, ds.train, ds.val)
    scores = score_params(res.student, res.model_config, ds)
    return {k: float(scores[k]) for k in METRICS}


def _mean_std(values):
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def _cells_csv(rows, keys):
    lines = [",".join(keys + list(METRICS))]
    for key, sc in rows:
        lines.append(",".join([str(k) for k in key] + [repr(sc[m]) for m in METRICS]))
    return "\n".join(lines) + "\n"


def _base_cfg(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs, warmup_epochs=min(cfg.warmup_epochs, args.epochs))
    return cfg


def cmd_ablate(args) -> int:
    out = make_out_dir(args.out)
    t0 = time.perf_counter()
    base = _base_cfg(args)
    strategies = args.strategies or list(STRATEGIES)
    seeds = list(range(args.seed, args.seed + args.seeds))
    man = RunManifest("ablate", {**dataclasses.asdict(base), "strategies": strategies, "seeds": seeds}, args.seed)
    for p in TRAIN_MANIFESTS + (VAL_MANIFEST,):
        man.add_input(Path(args.data) / p)
    load_dataset(args.data, base.n_classes, base.n_frames)  # cache features once, before the workers start
    keys = [(s, seed) for s in strategies for seed in seeds]
    results = run_parallel(_cell, [(args.data, base.replace(strategy=s, seed=seed)) for s, seed in keys])
    write_text(out / "cells.csv", _cells_csv(list(zip(keys, results)), ["strategy", "seed"]))
    header = ["strategy", "n_seeds"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
    lines = [",".join(header)]
    for s in strategies:
        vals = [r for (st, _), r in zip(keys, results) if st == s]
        row = [s, str(len(vals))]
        for m in METRICS:
            mu, sd = _mean_std([v[m] for v in vals])
            row += [repr(mu), repr(sd)]
        lines.append(",".join(row))
    write_text(out / "table.csv", "\n".join(lines) + "\n")
    man.outputs = ["table.csv", "cells.csv"]
    man.duration_s = time.perf_counter() - t0
    man.write(out)
    return 0


def parse_values(text: str) -> list[int]:
    """``1..9`` or ``1,3,5``."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_sweep_dmax(args) -> int:
    out = make_out_dir(args.out)
    t0 = time.perf_counter()
    base = _base_cfg(args)
    values = parse_values(args.values)
    seeds = list(range(args.seed, args.seed + args.seeds))
    for v in values:
        base.replace(d_max=v)  # validates the range before any training
    man = RunManifest("sweep-dmax", {**dataclasses.asdict(base), "values": values, "seeds": seeds,
                                     "metric": args.metric}, args.seed)
    for p in TRAIN_MANIFESTS + (VAL_MANIFEST,):
        man.add_input(Path(args.data) / p)
    load_dataset(args.data, base.n_classes, base.n_frames)
    keys = [("baseline", 0, s) for s in seeds] + [("randwarp", v, s) for v in values for s in seeds]
    jobs = [(args.data, base.replace(strategy=st, seed=s, d_max=v or base.d_max)) for st, v, s in keys]
    results = run_parallel(_cell, jobs)
    write_text(out / "cells.csv", _cells_csv(list(zip(keys, results)), ["strategy", "d_max", "seed"]))
    base_score = {s: r[args.metric] for (st, _, s), r in zip(keys, results) if st == "baseline"}
    lines = ["d_max,n_seeds,score_mean,score_std,gain_mean,gain_std"]
    rows = [("baseline", [base_score[s] for s in seeds], [0.0] * len(seeds))]
    for v in values:
        sc = [r[args.metric] for (st, dv, _), r in zip(keys, results) if st == "randwarp" and dv == v]
        gains = [(x - base_score[s]) / base_score[s] if base_score[s] else float("nan") for x, s in zip(sc, seeds)]
        rows.append((str(v), sc, gains))
    for name, sc, gains in rows:
        sm, ss = _mean_std(sc)
        gm, gs = _mean_std(gains)
        lines.append(f"{name},{len(sc)},{sm!r},{ss!r},{gm!r},{gs!r}")
    write_text(out / "sweep.csv", "\n".join(lines) + "\n")
    man.outputs = ["sweep.csv", "cells.csv"]
    man.duration_s = time.perf_counter() - t0
    man.write(out)
    return 0


# ---------------------------------------------------------------- argument parsing

def _add_training_args(p, with_strategy):
    p.add_argument("--data", required=True, help="dataset directory written by gen-data")
    if with_strategy:
        p.add_argument("--strategy", required=True, choices=STRATEGIES, metavar="STRATEGY",
                       help=f"one of: {', '.join(STRATEGIES)}")
    p.add_argument("--config", help="key=value training configuration file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rct", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--n-weak", type=int, default=60)
    p.add_argument("--n-strong", type=int, default=60)
    p.add_argument("--n-unlabeled", type=int, default=240)
    p.add_argument("--n-val", type=int, default=60, help="strongly labelled validation clips")
    p.add_argument("--clips", type=int, help="shorthand: N weak, N strong, 4N unlabeled, N validation")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("features", help="extract and cache log-mel features")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", nargs="*", help="manifests to process (default: all under --data)")
    p.add_argument("--cache", help="cache directory (default: DATA/features)")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train one strategy")
    _add_training_args(p, True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score checkpoints on a strongly labelled manifest")
    p.add_argument("--checkpoint", nargs="*", default=[], help="one or more checkpoints; several are ensembled")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", help="manifest to score (default: DATA/validation.jsonl)")
    p.add_argument("--temperature", type=float, default=ev.TEMPERATURE)
    p.add_argument("--median", type=lambda s: [int(v) for v in s.split(",")],
                   help="comma-separated median filter lengths per class (default: from strong.jsonl)")
    p.add_argument("--teacher", action="store_true", help="score the teacher weights instead of the student")
    p.add_argument("--oracle", action="store_true", help="use the ground truth as predictions")
    p.add_argument("--classes", type=int, default=4, help="class count for --oracle without a checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every strategy over several seeds")
    _add_training_args(p, False)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--strategies", nargs="*", choices=STRATEGIES, metavar="STRATEGY")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-dmax", help="relative gain of randwarp over baseline per d_max")
    _add_training_args(p, False)
    p.add_argument("--values", default="1..9")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--metric", default="macro_f1", choices=METRICS[:3])
    p.set_defaults(func=cmd_sweep_dmax)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RCTError as exc:
        print(f"rct {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
