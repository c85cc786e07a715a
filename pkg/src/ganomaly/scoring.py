"""Latent-space anomaly scores and their scaling to [0, 1].

Two score variants:

* ``v1``: ``||G_E(x) - E(G_D(G_E(x)))||`` (generator encoder vs. standalone encoder)
* ``v2``: ``||G_E(x) - G_E(G_D(G_E(x)))||`` (generator encoder applied twice)

Scaling modes: ``none``; ``global`` min-max over the scored set;
``partitioned`` min-max inside each ground-truth partition (uses labels, so
diagnostic only); ``reference-range`` min-max against a stored range, e.g.
the training-set scores, which is the only mode usable on unlabelled data.
"""

from __future__ import annotations

import csv
import json
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datasets import DatasetSplit, LabeledSample, stack_images
from .errors import (
    ConfigError,
    DegenerateRangeError,
    LabelDependentError,
    PartitionError,
    ShapeError,
)
from .model import ModelBundle, as_batch, check_images

VARIANTS = ("v1", "v2")
SCALINGS = ("none", "global", "partitioned", "reference-range")

LABEL_DEPENDENT_WARNING = (
    "partitioned scaling uses ground-truth labels to choose each sample's scaling range; "
    "its accuracy does not measure anomaly detection on unlabelled data"
)


class LabelDependentScalingWarning(UserWarning):
    pass


@dataclass
class ScoredSample:
    id: str
    raw_score: float
    anomaly_label: bool
    variant: str
    scaled_score: float | None = None


@dataclass
class ScoreSet:
    samples: list[ScoredSample]
    scaling: str = "none"
    scaling_stats: dict | None = None
    label_dependent: bool = False

    def __len__(self):
        return len(self.samples)

    @property
    def raw(self) -> np.ndarray:
        return np.array([s.raw_score for s in self.samples], dtype=np.float64)

    @property
    def scaled(self) -> np.ndarray:
        return np.array([np.nan if s.scaled_score is None else s.scaled_score for s in self.samples])

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.anomaly_label for s in self.samples], dtype=bool)

    def subset(self, ids) -> "ScoreSet":
        keep = set(ids)
        return ScoreSet([s for s in self.samples if s.id in keep], "none")

    def without(self, ids) -> "ScoreSet":
        drop = set(ids)
        return ScoreSet([s for s in self.samples if s.id not in drop], "none")


def from_arrays(raw, labels, ids=None, variant="v1") -> ScoreSet:
    raw = np.asarray(raw, dtype=np.float64)
    ids = ids if ids is not None else [f"s{i:05d}" for i in range(len(raw))]
    return ScoreSet([ScoredSample(i, float(r), bool(l), variant) for i, r, l in zip(ids, raw, labels)])


# --------------------------------------------------------------------------
# raw scores


@contextmanager
def inference_mode(bundle: ModelBundle):
    """Evaluate with running batch-norm statistics and no autograd; restores the prior mode."""
    was_training = bundle.training
    bundle.eval()
    try:
        with torch.no_grad():
            yield
    finally:
        bundle.train(was_training)


def latent_pair(bundle: ModelBundle, x, variant: str = "v1") -> tuple[torch.Tensor, torch.Tensor]:
    """Return the two latent codes whose distance is the anomaly score."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown score variant {variant!r}; choose from {VARIANTS}")
    x = as_batch(x)
    check_images(bundle.arch, x)
    with inference_mode(bundle):
        z = bundle.gen_encoder(x)
        x_hat = bundle.gen_decoder(z)
        second = bundle.encoder if variant == "v1" else bundle.gen_encoder
        z_hat = second(x_hat)
    if z.shape != z_hat.shape:
        raise ShapeError(f"latent codes differ in shape: {tuple(z.shape)} vs {tuple(z_hat.shape)}")
    return z, z_hat


def anomaly_scores(bundle: ModelBundle, x, variant: str = "v1", squared: bool = False, batch_size: int = 256) -> np.ndarray:
    """Per-sample scores for a batch of images, computed in chunks."""
    x = as_batch(x)
    out = []
    for start in range(0, len(x), batch_size):
        z, z_hat = latent_pair(bundle, x[start : start + batch_size], variant)
        d = (z - z_hat).flatten(1).double()
        out.append((d.pow(2).sum(1) if squared else torch.linalg.vector_norm(d, dim=1)).numpy())
    return np.concatenate(out) if out else np.zeros(0)


def anomaly_score_v1(bundle: ModelBundle, x, squared: bool = False) -> float:
    return float(anomaly_scores(bundle, x, "v1", squared)[0])


def anomaly_score_v2(bundle: ModelBundle, x, squared: bool = False) -> float:
    return float(anomaly_scores(bundle, x, "v2", squared)[0])


# --------------------------------------------------------------------------
# scaling


def _minmax(values: np.ndarray, what: str, error=DegenerateRangeError) -> tuple[float, float]:
    lo, hi = float(values.min()), float(values.max())
    if not hi > lo:
        raise error(f"{what}: all {len(values)} scores equal ({lo}); cannot min-max scale")
    return lo, hi


def _with_scaled(scores: ScoreSet, scaled: np.ndarray, **kw) -> ScoreSet:
    samples = [replace(s, scaled_score=float(v)) for s, v in zip(scores.samples, scaled)]
    return ScoreSet(samples, **kw)


def scale_global(scores: ScoreSet) -> ScoreSet:
    """Min-max over the whole set: (s - min S) / (max S - min S)."""
    if len(scores) < 2:
        raise DegenerateRangeError(f"need at least 2 scores to scale, got {len(scores)}")
    raw = scores.raw
    lo, hi = _minmax(raw, "global scaling")
    return _with_scaled(scores, (raw - lo) / (hi - lo), scaling="global", scaling_stats={"min": lo, "max": hi})


def scale_partitioned(scores: ScoreSet, warn: bool = True) -> ScoreSet:
    """Min-max within the normal partition and within the abnormal partition separately.

    The result is flagged ``label_dependent``; it cannot be computed without
    ground truth.
    """
    raw, labels = scores.raw, scores.labels
    scaled = np.empty_like(raw)
    stats = {}
    for name, mask in (("normal", ~labels), ("abnormal", labels)):
        if not mask.any():
            raise PartitionError(f"{name} partition is empty")
        lo, hi = _minmax(raw[mask], f"{name} partition", PartitionError)
        scaled[mask] = (raw[mask] - lo) / (hi - lo)
        stats[name] = {"min": lo, "max": hi}
    if warn:
        warnings.warn(LABEL_DEPENDENT_WARNING, LabelDependentScalingWarning, stacklevel=2)
    return _with_scaled(scores, scaled, scaling="partitioned", scaling_stats=stats, label_dependent=True)


def scale_reference_range(scores: ScoreSet, lo: float, hi: float) -> ScoreSet:
    """Min-max against a stored range, clipped into [0, 1]."""
    if not hi > lo:
        raise DegenerateRangeError(f"reference range [{lo}, {hi}] is empty")
    scaled = np.clip((scores.raw - lo) / (hi - lo), 0.0, 1.0)
    return _with_scaled(scores, scaled, scaling="reference-range", scaling_stats={"min": lo, "max": hi})


def apply_scaling(scores: ScoreSet, scaling: str, reference_range: tuple[float, float] | None = None) -> ScoreSet:
    if scaling == "none":
        return ScoreSet([replace(s, scaled_score=None) for s in scores.samples], "none")
    if scaling == "global":
        return scale_global(scores)
    if scaling == "partitioned":
        return scale_partitioned(scores)
    if scaling == "reference-range":
        if reference_range is None:
            raise ConfigError("reference-range scaling needs a stored (min, max) range")
        return scale_reference_range(scores, *reference_range)
    raise ConfigError(f"unknown scaling {scaling!r}; choose from {SCALINGS}")


def require_deployable(scores: ScoreSet) -> None:
    """Guard for anything that acts on scores without ground truth."""
    if scores.label_dependent:
        raise LabelDependentError("score set was scaled with ground-truth labels; " + LABEL_DEPENDENT_WARNING)


def flag_novel(scores: ScoreSet, tau: float) -> np.ndarray:
    """Deployment decision: True where the scaled score exceeds ``tau``."""
    require_deployable(scores)
    if scores.scaling == "none":
        raise ConfigError("flag_novel needs scaled scores")
    return scores.scaled > tau


# --------------------------------------------------------------------------
# datasets


def score_samples(
    bundle: ModelBundle,
    samples: Sequence[LabeledSample],
    variant: str = "v1",
    squared: bool = False,
    batch_size: int = 256,
) -> ScoreSet:
    raw = anomaly_scores(bundle, stack_images(samples), variant, squared, batch_size) if samples else []
    return ScoreSet([ScoredSample(s.id, float(r), s.anomaly_label, variant) for s, r in zip(samples, raw)])


def score_dataset(
    bundle: ModelBundle,
    split: DatasetSplit,
    variant: str = "v1",
    scaling: str = "global",
    squared: bool = False,
    reference_range: tuple[float, float] | None = None,
    batch_size: int = 256,
) -> ScoreSet:
    """Score every test sample and scale the resulting set."""
    if not split.test:
        raise ConfigError("split has no test samples")
    raw = score_samples(bundle, split.test, variant, squared, batch_size)
    return apply_scaling(raw, scaling, reference_range)


def write_scores_csv(scores: ScoreSet, path) -> None:
    """CSV columns: id,raw_score,scaled_score,label,variant,scaling; stats go to a sidecar JSON."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "raw_score", "scaled_score", "label", "variant", "scaling"])
        for s in scores.samples:
            scaled = "" if s.scaled_score is None else repr(s.scaled_score)
            w.writerow([s.id, repr(s.raw_score), scaled, int(s.anomaly_label), s.variant, scores.scaling])
    sidecar = {
        "scaling": scores.scaling,
        "scaling_stats": scores.scaling_stats,
        "label_dependent": scores.label_dependent,
    }
    if scores.label_dependent:
        sidecar["warning"] = LABEL_DEPENDENT_WARNING
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def read_scores_csv(path) -> ScoreSet:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    samples = [
        ScoredSample(
            r["id"],
            float(r["raw_score"]),
            bool(int(r["label"])),
            r["variant"],
            float(r["scaled_score"]) if r["scaled_score"] else None,
        )
        for r in rows
    ]
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return ScoreSet(
        samples,
        meta.get("scaling", rows[0]["scaling"] if rows else "none"),
        meta.get("scaling_stats"),
        meta.get("label_dependent", False),
    )
