"""Threshold calibration, confusion matrices, derived metrics and ROC-AUC.

Confusion matrices use Normal as the positive class, matching the layout of
the published result tables; ``ConfusionMatrix.novel_positive`` gives the
usual anomaly-detection orientation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, ContractError, SingleClassError
from .scoring import LABEL_DEPENDENT_WARNING, ScoreSet

CRITERIA = ("accuracy", "f1")
HIGH_AUC = 0.8


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int
    orientation: str = "normal-positive"

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def novel_positive(self) -> "ConfusionMatrix":
        if self.orientation != "normal-positive":
            raise ContractError("matrix is already novel-positive")
        return ConfusionMatrix(self.tn, self.fn, self.fp, self.tp, "novel-positive")


@dataclass(frozen=True)
class DerivedMetrics:
    f1: float
    accuracy: float
    precision: float
    sensitivity: float
    undefined: tuple[str, ...] = ()


def confusion_at(scores: ScoreSet, tau: float) -> ConfusionMatrix:
    """Predict Novel iff scaled score > tau; tally with Normal as positive."""
    scaled = scores.scaled
    if scores.scaling == "none" or np.isnan(scaled).any():
        raise ContractError("confusion_at needs scaled scores on every sample")
    novel_pred = scaled > tau
    novel_true = scores.labels
    return ConfusionMatrix(
        tp=int(np.sum(~novel_pred & ~novel_true)),
        fp=int(np.sum(~novel_pred & novel_true)),
        fn=int(np.sum(novel_pred & ~novel_true)),
        tn=int(np.sum(novel_pred & novel_true)),
    )


def _ratio(num: float, den: float, name: str, undefined: list) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def derived_metrics(cm: ConfusionMatrix) -> DerivedMetrics:
    """Precision, sensitivity, F1 and accuracy; zero-denominator ratios report 0 and are listed in ``undefined``."""
    if cm.total <= 0:
        raise ContractError("confusion matrix is empty")
    undefined: list[str] = []
    p = _ratio(cm.tp, cm.tp + cm.fp, "precision", undefined)
    sn = _ratio(cm.tp, cm.tp + cm.fn, "sensitivity", undefined)
    f1 = _ratio(2 * p * sn, p + sn, "f1", undefined)
    acc = (cm.tp + cm.tn) / cm.total
    return DerivedMetrics(f1, acc, p, sn, tuple(undefined))


@dataclass
class ThresholdSweepResult:
    thresholds: list[float]
    metrics: list[DerivedMetrics]
    best_threshold: float
    selection_criterion: str

    @property
    def best_value(self) -> float:
        return getattr(self.metrics[self.thresholds.index(self.best_threshold)], self.selection_criterion)


def threshold_grid(lo: float, hi: float, step: float) -> list[float]:
    """Inclusive grid lo, lo+step, ..., hi (rounded to kill float drift)."""
    if step <= 0:
        raise ConfigError(f"step must be > 0, got {step}")
    if lo > hi:
        raise ConfigError(f"empty threshold range [{lo}, {hi}]")
    n = int(math.floor((hi - lo) / step + 1e-9))
    return [round(lo + k * step, 10) for k in range(n + 1)]


def sweep_threshold(
    scores: ScoreSet,
    lo: float = 0.4,
    hi: float = 0.6,
    step: float = 0.01,
    criterion: str = "accuracy",
) -> ThresholdSweepResult:
    """Evaluate every grid threshold; keep the best by ``criterion`` (ties: smallest threshold)."""
    if criterion not in CRITERIA:
        raise ConfigError(f"unknown criterion {criterion!r}; choose from {CRITERIA}")
    grid = threshold_grid(lo, hi, step)
    metrics = [derived_metrics(confusion_at(scores, t)) for t in grid]
    values = [getattr(m, criterion) for m in metrics]
    best = int(np.argmax(values))  # first maximum = smallest threshold
    return ThresholdSweepResult(grid, metrics, grid[best], criterion)


def roc_auc(scores: ScoreSet, use: str = "raw") -> float:
    """Rank-statistic AUC with Novel as positive (higher score = more anomalous); ties get midranks."""
    if use == "raw":
        values = scores.raw
    elif use == "scaled":
        values = scores.scaled
        if np.isnan(values).any():
            raise ContractError("roc_auc(use='scaled') needs scaled scores")
    else:
        raise ConfigError(f"use must be 'raw' or 'scaled', got {use!r}")
    labels = scores.labels
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC undefined: test set holds a single class")
    ranks = rankdata(values, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    metrics_normal_positive: DerivedMetrics
    metrics_novel_positive: DerivedMetrics
    auc: float
    threshold: float
    scaling: str
    variant: str
    label_dependent: bool
    n_samples: int
    sweep: dict | None = None
    calibration: dict | None = None
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion_novel_positive"] = asdict(self.confusion.novel_positive())
        for key in ("metrics_normal_positive", "metrics_novel_positive"):
            d[key]["undefined"] = list(d[key]["undefined"])
        return d

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def evaluate_scores(scores: ScoreSet, tau: float, variant: str, sweep: ThresholdSweepResult | None = None, calibration: dict | None = None) -> EvalReport:
    cm = confusion_at(scores, tau)
    report = EvalReport(
        confusion=cm,
        metrics_normal_positive=derived_metrics(cm),
        metrics_novel_positive=derived_metrics(cm.novel_positive()),
        auc=roc_auc(scores),
        threshold=tau,
        scaling=scores.scaling,
        variant=variant,
        label_dependent=scores.label_dependent,
        n_samples=len(scores),
        sweep=None
        if sweep is None
        else {
            "thresholds": sweep.thresholds,
            "criterion": sweep.selection_criterion,
            "values": [getattr(m, sweep.selection_criterion) for m in sweep.metrics],
            "best_threshold": sweep.best_threshold,
        },
        calibration=calibration,
    )
    if scores.label_dependent:
        report.warnings.append("label_dependent: " + LABEL_DEPENDENT_WARNING)
    return report


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": [
        "confusion",
        "confusion_novel_positive",
        "metrics_normal_positive",
        "metrics_novel_positive",
        "auc",
        "threshold",
        "scaling",
        "variant",
        "label_dependent",
        "n_samples",
        "warnings",
    ],
    "properties": {
        "confusion": {"$ref": "#/$defs/confusion"},
        "confusion_novel_positive": {"$ref": "#/$defs/confusion"},
        "metrics_normal_positive": {"$ref": "#/$defs/metrics"},
        "metrics_novel_positive": {"$ref": "#/$defs/metrics"},
        "auc": {"type": "number", "minimum": 0, "maximum": 1},
        "threshold": {"type": "number"},
        "scaling": {"enum": ["global", "partitioned", "reference-range"]},
        "variant": {"enum": ["v1", "v2"]},
        "label_dependent": {"type": "boolean"},
        "n_samples": {"type": "integer", "minimum": 1},
        "sweep": {"type": ["object", "null"]},
        "calibration": {"type": ["object", "null"]},
        "warnings": {"type": "array", "items": {"type": "string"}},
    },
    "$defs": {
        "confusion": {
            "type": "object",
            "required": ["tp", "fp", "fn", "tn", "orientation"],
            "properties": {
                "tp": {"type": "integer", "minimum": 0},
                "fp": {"type": "integer", "minimum": 0},
                "fn": {"type": "integer", "minimum": 0},
                "tn": {"type": "integer", "minimum": 0},
                "orientation": {"enum": ["normal-positive", "novel-positive"]},
            },
        },
        "metrics": {
            "type": "object",
            "required": ["f1", "accuracy", "precision", "sensitivity", "undefined"],
            "properties": {
                k: {"type": "number", "minimum": 0, "maximum": 1} for k in ("f1", "accuracy", "precision", "sensitivity")
            },
        },
    },
}


def scatter_svg(scores: ScoreSet, tau: float, path, width: int = 640, height: int = 320) -> None:
    """Static scatter of scaled scores (x = sample index, y = score), coloured by ground truth."""
    pad = 30
    scaled = scores.scaled
    n = max(len(scores) - 1, 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]

    def y(v):
        return height - pad - v * (height - 2 * pad)

    for i, (v, lab) in enumerate(zip(scaled, scores.labels)):
        x = pad + i / n * (width - 2 * pad)
        color = "#d6336c" if lab else "#1c7ed6"
        parts.append(f'<circle cx="{x:.1f}" cy="{y(v):.1f}" r="2" fill="{color}" fill-opacity="0.7"/>')
    parts.append(
        f'<line x1="{pad}" y1="{y(tau):.1f}" x2="{width - pad}" y2="{y(tau):.1f}" stroke="gray" stroke-dasharray="4 3"/>'
    )
    parts.append(f'<text x="{width - pad}" y="{y(tau) - 4:.1f}" font-size="10" text-anchor="end">threshold {tau:g}</text>')
    parts.append(f'<text x="{pad + 4}" y="{pad - 8}" font-size="11">scaled score ({scores.scaling}); blue normal, pink novel</text>')
    if scores.label_dependent:
        parts.append(f'<text x="{pad + 4}" y="{height - 8}" font-size="10" fill="#c92a2a">label_dependent: diagnostic only</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


# --------------------------------------------------------------------------
# per-digit AUC table

AUC_FIELDS = ("digit", "auc_v1", "auc_v2", "n_train", "n_test", "epochs")


def per_digit_auc_table(
    train_samples,
    test_samples,
    arch,
    train_cfg,
    variants: Sequence[str] = ("v1", "v2"),
    digits: Sequence[int] = tuple(range(10)),
    max_train_normal: int | None = None,
    out_dir=None,
) -> list[dict]:
    """Leave-one-digit-out: for each digit, train on the others and report AUC per score variant."""
    from .datasets import make_idx_protocol_split
    from .scoring import score_samples
    from .trainer import train

    rows = []
    for digit in digits:
        split = make_idx_protocol_split(
            train_samples,
            test_samples,
            digit,
            max_train_normal=max_train_normal,
            seed=train_cfg.seed,
            target_size=arch.input_size,
            channels=arch.channels,
        )
        run_dir = None if out_dir is None else Path(out_dir) / f"digit_{digit}"
        bundle, _ = train(split, arch, train_cfg, out_dir=run_dir, run_info={"novel_digit": digit})
        row = {"digit": digit, "n_train": len(split.train_normal), "n_test": len(split.test), "epochs": train_cfg.epochs}
        for v in ("v1", "v2"):
            row[f"auc_{v}"] = (
                roc_auc(score_samples(bundle, split.test, v, train_cfg.squared_latent_norms)) if v in variants else None
            )
        rows.append(row)
    return rows


def write_auc_table(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=AUC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in AUC_FIELDS})


def auc_summary(rows: Sequence[dict], threshold: float = HIGH_AUC) -> dict:
    """Mark digits whose AUC reaches ``threshold`` under each variant."""
    out = {"threshold": threshold, "high_auc_digits": {}, "reference_high_auc_digits": [0, 1, 2, 8]}
    for v in ("v1", "v2"):
        key = f"auc_{v}"
        out["high_auc_digits"][v] = [r["digit"] for r in rows if r.get(key) is not None and r[key] >= threshold]
    out["rows"] = list(rows)
    return out
