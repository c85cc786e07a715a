"""Run configuration: YAML file + command-line overrides on top of defaults.

Validation is strict: unknown keys and type errors are collected and
reported together in one ConfigError.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .datasets import SceneConfig
from .errors import ConfigError, GanomalyError
from .losses import LossWeights
from .model import ArchConfig
from .scoring import SCALINGS, VARIANTS
from .trainer import TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "runs",
    "dataset": {
        "kind": "synthetic",
        # idx
        "train_images": None,
        "train_labels": None,
        "test_images": None,
        "test_labels": None,
        "novel_digit": 2,
        "max_train_normal": None,
        "digits": list(range(10)),
        # manifest
        "manifest": None,
        "novel_classes": ["rider", "train", "motorcycle", "bicycle"],
        "test_normal": 0.2,
        "test_abnormal": None,
        # synthetic
        "synthetic": {
            "classes": ["circle", "square", "ring", "cross", "triangle"],
            "novel_classes": ["triangle"],
            "count": 200,
            "abnormal_ratio": 0.3,
            "test_normal_fraction": 0.2,
            "image_size": 64,
            "channels": 3,
            "objects_per_image": [2, 4],
            "object_size": [0.12, 0.25],
            "novel_object_size": None,
            "texture": 1.0,
        },
    },
    "arch": {"input_size": 64, "channels": 3, "latent_dim": 100, "base_width": 64},
    "train": {
        "epochs": 200,
        "batch_size": 64,
        "learning_rate": 2e-4,
        "beta1": 0.5,
        "beta2": 0.999,
        "loss_weights": {"w_adv": 1.0, "w_con": 20.0, "w_enc": 1.0},
        "checkpoint_every": 10,
        "squared_latent_norms": False,
        "reinit_d_threshold": None,
    },
    "scoring": {
        "variant": "v1",
        "scaling": "global",
        "batch_size": 256,
        "calibration": {"mode": "holdout", "holdout_abnormal": 98, "include_holdout_in_eval": False},
    },
    "eval": {"threshold_range": [0.4, 0.6], "step": 0.01, "criterion": "accuracy", "threshold": 0.5},
}

# keys whose default is None but which take a value of this type
NULLABLE = {
    "dataset.train_images": str,
    "dataset.train_labels": str,
    "dataset.test_images": str,
    "dataset.test_labels": str,
    "dataset.max_train_normal": int,
    "dataset.manifest": str,
    "dataset.test_abnormal": int,
    "dataset.synthetic.novel_object_size": list,
    "train.reinit_d_threshold": float,
}
CHOICES = {
    "dataset.kind": ("idx", "manifest", "synthetic"),
    "scoring.variant": VARIANTS,
    "scoring.scaling": SCALINGS,
    "scoring.calibration.mode": ("holdout", "test", "none"),
    "eval.criterion": ("accuracy", "f1"),
}


def _check(node, default, path: str, errors: list[str]):
    if isinstance(default, dict):
        if not isinstance(node, dict):
            errors.append(f"{path or '<root>'}: expected a mapping")
            return
        for key in node:
            sub = f"{path}.{key}" if path else key
            if key not in default:
                errors.append(f"{sub}: unknown key")
            else:
                _check(node[key], default[key], sub, errors)
        return
    if node is None:
        if default is not None and path not in NULLABLE:
            errors.append(f"{path}: must not be null")
        return
    expected = NULLABLE.get(path, type(default))
    if expected is float and isinstance(node, int) and not isinstance(node, bool):
        return
    if path == "dataset.test_normal" and isinstance(node, (int, float)) and not isinstance(node, bool):
        return
    if expected is bool and not isinstance(node, bool) or expected is not bool and isinstance(node, bool):
        errors.append(f"{path}: expected {expected.__name__}, got {node!r}")
    elif not isinstance(node, expected):
        errors.append(f"{path}: expected {expected.__name__}, got {type(node).__name__} {node!r}")
    elif path in CHOICES and node not in CHOICES[path]:
        errors.append(f"{path}: {node!r} not one of {list(CHOICES[path])}")


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_path(doc: dict, dotted: str, value) -> None:
    node = doc
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


@dataclass
class RunConfig:
    raw: dict
    source: Path | None = None

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def dataset(self) -> dict:
        return self.raw["dataset"]

    @property
    def scoring(self) -> dict:
        return self.raw["scoring"]

    @property
    def eval(self) -> dict:
        return self.raw["eval"]

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.raw["output_dir"])

    def resolve(self, p) -> Path:
        p = Path(p)
        if p.is_absolute() or self.source is None:
            return p
        return self.source.parent / p

    def arch(self) -> ArchConfig:
        return ArchConfig(**self.raw["arch"])

    def train_config(self) -> TrainConfig:
        t = dict(self.raw["train"])
        t["loss_weights"] = LossWeights(**t["loss_weights"])
        return TrainConfig(seed=self.seed, **t)

    def scene_config(self) -> SceneConfig:
        s = dict(self.raw["dataset"]["synthetic"])
        s = {k: tuple(v) if isinstance(v, list) else v for k, v in s.items()}
        return SceneConfig(seed=self.seed, **s)

    def digest(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, default=str)
        return hashlib.sha256(canon.encode()).hexdigest()[:10]


def validate(doc: dict, source: Path | None = None) -> RunConfig:
    errors: list[str] = []
    _check(doc, DEFAULTS, "", errors)
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    cfg = RunConfig(merge(DEFAULTS, doc), source)

    builders = [("arch", cfg.arch), ("train", cfg.train_config)]
    if cfg.dataset["kind"] == "synthetic":
        builders.append(("dataset.synthetic", lambda: cfg.scene_config().validate()))
    for name, build in builders:
        try:
            build()
        except GanomalyError as exc:
            errors.append(f"{name}: {exc}")

    ds = cfg.dataset
    if ds["kind"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if ds[key] is None:
                errors.append(f"dataset.{key}: required for kind 'idx'")
            elif not cfg.resolve(ds[key]).is_file():
                errors.append(f"dataset.{key}: file not found: {cfg.resolve(ds[key])}")
    elif ds["kind"] == "manifest":
        if ds["manifest"] is None:
            errors.append("dataset.manifest: required for kind 'manifest'")
        elif not cfg.resolve(ds["manifest"]).is_file():
            errors.append(f"dataset.manifest: file not found: {cfg.resolve(ds['manifest'])}")
    lo, hi = (cfg.eval["threshold_range"] + [None, None])[:2]
    if len(cfg.eval["threshold_range"]) != 2 or lo is None or hi is None or lo > hi:
        errors.append(f"eval.threshold_range: need [lo, hi] with lo <= hi, got {cfg.eval['threshold_range']}")
    if cfg.eval["step"] <= 0:
        errors.append("eval.step: must be > 0")
    if cfg.dataset["kind"] == "synthetic":
        syn = cfg.dataset["synthetic"]
        if (syn["image_size"], syn["channels"]) != (cfg.raw["arch"]["input_size"], cfg.raw["arch"]["channels"]):
            errors.append("arch.input_size/channels must match dataset.synthetic.image_size/channels")
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults < file < overrides (dotted keys)."""
    doc: dict = {}
    source = None
    if path is not None:
        source = Path(path)
        try:
            doc = yaml.safe_load(source.read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {source}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{source}: YAML error: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        set_path(doc, dotted, value)
    return validate(doc, source)
