"""Command-line entry point: ``ganomaly {prepare,train,evaluate,reproduce-mnist,score}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import datasets as ds
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, GanomalyError, SingleClassError
from .evalmetrics import (
    auc_summary,
    evaluate_scores,
    per_digit_auc_table,
    scatter_svg,
    sweep_threshold,
    write_auc_table,
)
from .scoring import (
    ScoreSet,
    apply_scaling,
    flag_novel,
    score_samples,
    write_scores_csv,
)
from .trainer import train

log = logging.getLogger("ganomaly")

SPLIT_FILE = "split.json"
REFERENCE_FILE = "reference_range.json"


# --------------------------------------------------------------------------
# run directories


def new_run_dir(cfg: RunConfig) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = cfg.output_dir / f"{cfg.dataset['kind']}-{cfg.digest()}-{stamp}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{k}")
        k += 1
    path.mkdir(parents=True)
    (path / "config.json").write_text(json.dumps(cfg.raw, indent=2, sort_keys=True))
    return path


def latest_run_dir(cfg: RunConfig) -> Path | None:
    if not cfg.output_dir.is_dir():
        return None
    prefix = f"{cfg.dataset['kind']}-{cfg.digest()}-"
    runs = sorted(p for p in cfg.output_dir.iterdir() if p.is_dir() and p.name.startswith(prefix))
    return runs[-1] if runs else None


def resolve_run_dir(cfg: RunConfig, explicit: str | None, create: bool) -> Path:
    if explicit:
        path = Path(explicit)
        if not path.is_dir():
            if not create:
                raise ConfigError(f"run directory not found: {path}")
            path.mkdir(parents=True)
        return path
    path = latest_run_dir(cfg)
    if path is None:
        if not create:
            raise ConfigError(f"no run directory for this config under {cfg.output_dir}; run 'prepare' or 'train' first")
        path = new_run_dir(cfg)
    return path


# --------------------------------------------------------------------------
# datasets from config


def _idx_samples(cfg: RunConfig):
    d = cfg.dataset
    train_s = ds.load_idx(cfg.resolve(d["train_images"]), cfg.resolve(d["train_labels"]))
    test_s = ds.load_idx(cfg.resolve(d["test_images"]), cfg.resolve(d["test_labels"]))
    return train_s, test_s


def build_split(cfg: RunConfig, novel_digit: int | None = None) -> ds.DatasetSplit:
    d, arch = cfg.dataset, cfg.arch()
    if d["kind"] == "synthetic":
        return ds.generate_synthetic_scenes(cfg.scene_config())
    if d["kind"] == "idx":
        train_s, test_s = _idx_samples(cfg)
        return ds.make_idx_protocol_split(
            train_s,
            test_s,
            d["novel_digit"] if novel_digit is None else novel_digit,
            max_train_normal=d["max_train_normal"],
            seed=cfg.seed,
            target_size=arch.input_size,
            channels=arch.channels,
        )
    manifest = ds.load_manifest(cfg.resolve(d["manifest"]))
    return ds.make_manifest_split(
        manifest,
        d["novel_classes"],
        test_normal=d["test_normal"],
        test_abnormal=d["test_abnormal"],
        seed=cfg.seed,
        target_size=arch.input_size,
        channels=arch.channels,
    )


def load_prepared_split(cfg: RunConfig, run_dir: Path) -> ds.DatasetSplit:
    """Rebuild the split and check it against the manifest written by ``prepare``."""
    split = build_split(cfg)
    path = run_dir / SPLIT_FILE
    if path.exists():
        stored = json.loads(path.read_text())
        current = split.manifest()
        for part in ("train_normal", "test"):
            if [r["id"] for r in stored[part]] != [r["id"] for r in current[part]]:
                raise DataError(f"{path}: dataset no longer matches the prepared split ({part} differs)")
    else:
        _write_split(split, run_dir)
    return split


def _write_split(split: ds.DatasetSplit, run_dir: Path) -> None:
    (run_dir / SPLIT_FILE).write_text(json.dumps(split.manifest(), indent=2))


# --------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: RunConfig, args) -> int:
    run_dir = resolve_run_dir(cfg, args.run_dir, create=True) if args.run_dir else new_run_dir(cfg)
    split = build_split(cfg)
    _write_split(split, run_dir)
    counts = split.counts()
    print(json.dumps({"run_dir": str(run_dir), "split_rule": split.split_rule, **counts}, indent=2, default=str))
    return 0


def _find_checkpoint(run_dir: Path, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    latest = run_dir / "checkpoints" / "latest"
    if not latest.exists():
        raise ConfigError(f"no checkpoint found in {run_dir}; run 'train' first")
    return run_dir / "checkpoints" / latest.read_text().strip()


def cmd_train(cfg: RunConfig, args) -> int:
    run_dir = resolve_run_dir(cfg, args.run_dir, create=True)
    split = load_prepared_split(cfg, run_dir)
    resume = _find_checkpoint(run_dir, None) if args.resume else None
    tcfg = cfg.train_config()
    bundle, records = train(split, cfg.arch(), tcfg, out_dir=run_dir, resume=resume, run_info={"config_digest": cfg.digest()})

    sq = tcfg.squared_latent_norms
    ref = {}
    for v in ("v1", "v2"):
        raw = score_samples(bundle, split.train_normal, v, sq, cfg.scoring["batch_size"]).raw
        ref[v] = {"min": float(raw.min()), "max": float(raw.max())}
    (run_dir / REFERENCE_FILE).write_text(json.dumps(ref, indent=2))
    print(json.dumps({"run_dir": str(run_dir), "epochs_run": len(records), "checkpoint": str(_find_checkpoint(run_dir, None))}, indent=2))
    return 0


def _reference_range(run_dir: Path, variant: str):
    path = run_dir / REFERENCE_FILE
    if not path.exists():
        return None
    r = json.loads(path.read_text())[variant]
    return r["min"], r["max"]


def cmd_evaluate(cfg: RunConfig, args) -> int:
    run_dir = resolve_run_dir(cfg, args.run_dir, create=False)
    split = load_prepared_split(cfg, run_dir)
    ckpt = load_checkpoint(_find_checkpoint(run_dir, args.checkpoint))
    bundle = ckpt.bundle
    sc, ev = cfg.scoring, cfg.eval
    variant, scaling = sc["variant"], sc["scaling"]
    sq = cfg.train_config().squared_latent_norms
    if not any(s.anomaly_label for s in split.test) or all(s.anomaly_label for s in split.test):
        raise SingleClassError("test set holds a single class; evaluation needs normal and abnormal samples")

    test_raw = score_samples(bundle, split.test, variant, sq, sc["batch_size"])
    ref_range = None
    if scaling == "reference-range":
        ref_range = _reference_range(run_dir, variant)
        if ref_range is None:
            train_raw = score_samples(bundle, split.train_normal, variant, sq, sc["batch_size"]).raw
            ref_range = (float(train_raw.min()), float(train_raw.max()))

    lo, hi = ev["threshold_range"]
    cal = sc["calibration"]
    calibration = {"mode": cal["mode"]}
    eval_raw = test_raw
    sweep = None
    if cal["mode"] == "holdout":
        abn_ids = sorted(s.id for s in test_raw.samples if s.anomaly_label)
        n = cal["holdout_abnormal"]
        if n >= len(abn_ids):
            raise ConfigError(
                f"scoring.calibration.holdout_abnormal={n} leaves no abnormal test samples (have {len(abn_ids)})"
            )
        rng = np.random.default_rng(cfg.seed)
        held = sorted(abn_ids[i] for i in rng.permutation(len(abn_ids))[:n])
        train_raw = score_samples(bundle, split.train_normal, variant, sq, sc["batch_size"])
        cal_set = ScoreSet(train_raw.samples + test_raw.subset(held).samples)
        sweep = sweep_threshold(apply_scaling(cal_set, scaling, ref_range), lo, hi, ev["step"], ev["criterion"])
        if not cal["include_holdout_in_eval"]:
            eval_raw = test_raw.without(held)
        calibration.update(
            holdout_ids=held,
            n_train_normal=len(train_raw),
            included_in_eval=cal["include_holdout_in_eval"],
        )
    scored = apply_scaling(eval_raw, scaling, ref_range)
    if cal["mode"] == "test":
        sweep = sweep_threshold(scored, lo, hi, ev["step"], ev["criterion"])
    tau = ev["threshold"] if sweep is None else sweep.best_threshold

    report = evaluate_scores(scored, tau, variant, sweep, calibration)
    out = run_dir / f"eval-{variant}-{scaling}"
    out.mkdir(exist_ok=True)
    report.write(out / "report.json")
    write_scores_csv(scored, out / "scores.csv")
    scatter_svg(scored, tau, out / "scatter.svg")
    summary = {
        "report": str(out / "report.json"),
        "threshold": tau,
        "confusion": report.to_dict()["confusion"],
        "accuracy": report.metrics_normal_positive.accuracy,
        "auc": report.auc,
        "label_dependent": report.label_dependent,
    }
    print(json.dumps(summary, indent=2))
    for w in report.warnings:
        print(f"WARNING {w}", file=sys.stderr)
    return 0


def cmd_reproduce_mnist(cfg: RunConfig, args) -> int:
    if cfg.dataset["kind"] != "idx":
        raise ConfigError("reproduce-mnist needs dataset.kind = idx")
    digits = [int(d) for d in args.digits.split(",")] if args.digits else cfg.dataset["digits"]
    if any(not 0 <= d <= 9 for d in digits):
        raise ConfigError(f"--digits must be within 0..9, got {digits}")
    run_dir = resolve_run_dir(cfg, args.run_dir, create=True)
    train_s, test_s = _idx_samples(cfg)
    rows = per_digit_auc_table(
        train_s,
        test_s,
        cfg.arch(),
        cfg.train_config(),
        digits=digits,
        max_train_normal=cfg.dataset["max_train_normal"],
        out_dir=run_dir,
    )
    write_auc_table(rows, run_dir / "auc_table.csv")
    summary = auc_summary(rows)
    (run_dir / "auc_summary.json").write_text(json.dumps(summary, indent=2))
    print("digit  auc_v1  auc_v2")
    for r in rows:
        marks = "".join("*" if r[f"auc_{v}"] is not None and r[f"auc_{v}"] >= summary["threshold"] else " " for v in ("v1", "v2"))
        print(f"{r['digit']:>5}  {r['auc_v1']:.4f}  {r['auc_v2']:.4f}  {marks}")
    print(f"* AUC >= {summary['threshold']}; results in {run_dir}")
    return 0


def cmd_score(cfg: RunConfig, args) -> int:
    run_dir = resolve_run_dir(cfg, args.run_dir, create=False) if (args.run_dir or not args.checkpoint) else None
    ckpt_path = _find_checkpoint(run_dir, args.checkpoint) if run_dir else Path(args.checkpoint)
    bundle = load_checkpoint(ckpt_path).bundle
    variant = cfg.scoring["variant"]
    sq = cfg.train_config().squared_latent_norms
    raws = []
    for f in args.images:
        raw = ds._load_image_file(Path(f), Path(f).name) if Path(f).is_file() else None
        if raw is None:
            raise ds.DataIOError(f"image not found: {f}")
        raws.append(raw)
    samples = [
        ds.LabeledSample(ds.preprocess(r, bundle.arch.input_size, bundle.arch.channels), False, "", r.id) for r in raws
    ]
    scores = score_samples(bundle, samples, variant, sq)
    rng = _reference_range(ckpt_path.parent.parent, variant)
    rows = []
    if rng is not None:
        scaled = apply_scaling(scores, "reference-range", rng)
        flags = flag_novel(scaled, cfg.eval["threshold"])
        for s, flag in zip(scaled.samples, flags):
            rows.append({"id": s.id, "raw_score": s.raw_score, "scaled_score": s.scaled_score, "novel": bool(flag)})
    else:
        rows = [{"id": s.id, "raw_score": s.raw_score} for s in scores.samples]
    print(json.dumps({"variant": variant, "threshold": cfg.eval["threshold"], "scores": rows}, indent=2))
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "reproduce-mnist": cmd_reproduce_mnist,
    "score": cmd_score,
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--run-dir", help="use this run directory instead of the latest one for the config")
    common.add_argument("--variant", choices=("v1", "v2"))
    common.add_argument("--scaling", choices=("none", "global", "partitioned", "reference-range"))
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. train.epochs=5")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ganomaly", description="GANomaly anomaly detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="materialise the dataset split")
    p = sub.add_parser("train", parents=[common], help="train and checkpoint")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in the run directory")
    p = sub.add_parser("evaluate", parents=[common], help="score, scale, calibrate and report")
    p.add_argument("--checkpoint")
    p = sub.add_parser("reproduce-mnist", parents=[common], help="per-digit leave-one-out AUC table")
    p.add_argument("--digits", help="comma-separated digits, default all ten")
    p = sub.add_parser("score", parents=[common], help="score individual image files")
    p.add_argument("--checkpoint")
    p.add_argument("images", nargs="+")
    return parser


def overrides_from_args(args) -> dict:
    ov = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        ov[key] = _parse_value(value)
    if args.seed is not None:
        ov["seed"] = args.seed
    if args.variant:
        ov["scoring.variant"] = args.variant
    if args.scaling:
        ov["scoring.scaling"] = args.scaling
    return ov


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, overrides_from_args(args))
        return COMMANDS[args.command](cfg, args)
    except GanomalyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
