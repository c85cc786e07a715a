"""Dataset ingestion, normal/novel splits and image preprocessing.

Two corpora are supported: digit images in IDX files (leave-one-digit-out)
and scene images described by a JSON label manifest, where any image whose
label set touches a novel class is abnormal.  A procedural scene generator
stands in for a real driving corpus.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import (
    ConfigError,
    ConsistencyError,
    DataIOError,
    EmptyClassError,
    FormatError,
    NoNormalDataError,
)

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

DRIVING_NOVEL_CLASSES = ("rider", "train", "motorcycle", "bicycle")


@dataclass
class RawImage:
    pixels: np.ndarray  # uint8, H x W x C
    id: str

    def __post_init__(self):
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise FormatError(f"{self.id}: expected H x W x C pixels with C in (1, 3), got {self.pixels.shape}")


@dataclass
class LabeledSample:
    image: np.ndarray  # float32, C x H x W in [-1, 1]
    anomaly_label: bool
    source_label: str
    id: str


@dataclass
class DatasetSplit:
    train_normal: list[LabeledSample]
    test: list[LabeledSample]
    split_rule: dict = field(default_factory=dict)

    def __post_init__(self):
        bad = [s.id for s in self.train_normal if s.anomaly_label]
        if bad:
            raise ConsistencyError(f"abnormal samples in train_normal: {bad[:5]}")

    def counts(self) -> dict:
        n_abn = sum(s.anomaly_label for s in self.test)
        return {
            "train_normal": len(self.train_normal),
            "test_normal": len(self.test) - n_abn,
            "test_abnormal": n_abn,
        }

    def manifest(self) -> dict:
        """Id-level description of the split, suitable for writing to disk."""

        def rows(samples):
            return [{"id": s.id, "label": int(s.anomaly_label), "source": s.source_label} for s in samples]

        return {
            "split_rule": self.split_rule,
            "counts": self.counts(),
            "train_normal": rows(self.train_normal),
            "test": rows(self.test),
        }


def stack_images(samples: Sequence[LabeledSample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32, copy=False)


# --------------------------------------------------------------------------
# IDX


def _open(path):
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"no such file: {path}")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic_expected: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataIOError(f"{path}: truncated header")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic != magic_expected:
        raise FormatError(f"{path}: bad magic number {magic}, expected {magic_expected}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataIOError(f"{path}: truncated header")
    dims = struct.unpack(">" + "i" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise DataIOError(f"{path}: truncated data, expected {size} bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> list[tuple[RawImage, int]]:
    """Read an IDX image file and its label file (optionally gzipped)."""
    images = _read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if len(images) != len(labels):
        raise ConsistencyError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels"
        )
    stem = Path(images_path).name.split("-")[0].split(".")[0]
    width = max(5, len(str(len(images))))
    return [
        (RawImage(images[i].copy(), f"{stem}:{i:0{width}d}"), int(labels[i]))
        for i in range(len(images))
    ]


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as IDX; ``.gz`` paths are compressed."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    for path, arr, magic in ((images_path, images, IDX_IMAGE_MAGIC), (labels_path, labels, IDX_LABEL_MAGIC)):
        payload = struct.pack(">i", magic) + struct.pack(">" + "i" * arr.ndim, *arr.shape) + arr.tobytes()
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "wb") as fh:
            fh.write(payload)


# --------------------------------------------------------------------------
# preprocessing


def preprocess(raw: RawImage, target_size: int, channels: int) -> np.ndarray:
    """Bilinear resize to ``target_size`` square, convert channels, map [0, 255] to [-1, 1]."""
    if target_size < 32 or target_size & (target_size - 1):
        raise ConfigError(f"target_size must be a power of two >= 32, got {target_size}")
    if channels not in (1, 3):
        raise ConfigError(f"channels must be 1 or 3, got {channels}")
    px = raw.pixels
    h, w, c = px.shape
    if h == 0 or w == 0:
        raise FormatError(f"{raw.id}: zero-dimension image {px.shape}")

    planes = []
    for k in range(c):
        plane = px[:, :, k].astype(np.float32)
        if (h, w) != (target_size, target_size):
            plane = np.asarray(
                Image.fromarray(plane, mode="F").resize((target_size, target_size), Image.BILINEAR)
            )
        planes.append(plane)
    out = np.stack(planes)

    if c == 1 and channels == 3:
        out = np.repeat(out, 3, axis=0)
    elif c == 3 and channels == 1:
        out = (0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2])[None]
    out = out / 127.5 - 1.0
    return np.clip(out, -1.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# splits


def _seeded_order(ids: Sequence[str], seed: int) -> list[int]:
    """Indices sorted by id, then shuffled with a seeded generator."""
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    perm = np.random.default_rng(seed).permutation(len(order))
    return [order[p] for p in perm]


def make_leave_one_out_split(
    samples: Sequence[tuple[RawImage, int]],
    novel_digit: int,
    test_fraction: float = 0.0,
    seed: int = 0,
    target_size: int = 32,
    channels: int = 1,
) -> DatasetSplit:
    """One digit is novel; a ``test_fraction`` share of every other digit joins it in test."""
    if not samples:
        raise ConfigError("no samples given")
    if not 0 <= novel_digit <= 9:
        raise ConfigError(f"novel_digit must be in 0..9, got {novel_digit}")
    if not 0.0 <= test_fraction <= 1.0:
        raise ConfigError(f"test_fraction must be in [0, 1], got {test_fraction}")
    if not any(d == novel_digit for _, d in samples):
        raise EmptyClassError(f"digit {novel_digit} does not occur in the dataset")

    by_digit: dict[int, list[int]] = {}
    for i, (_, d) in enumerate(samples):
        by_digit.setdefault(d, []).append(i)

    train_idx, test_idx = [], []
    for digit in sorted(by_digit):
        idx = by_digit[digit]
        if digit == novel_digit:
            test_idx += idx
            continue
        order = [idx[j] for j in _seeded_order([samples[i][0].id for i in idx], seed + digit)]
        n_test = int(round(test_fraction * len(order)))
        test_idx += order[:n_test]
        train_idx += order[n_test:]

    def build(indices):
        out = [
            LabeledSample(
                preprocess(samples[i][0], target_size, channels),
                samples[i][1] == novel_digit,
                str(samples[i][1]),
                samples[i][0].id,
            )
            for i in indices
        ]
        return sorted(out, key=lambda s: s.id)

    rule = {"kind": "leave_one_digit_out", "novel_digit": novel_digit, "test_fraction": test_fraction, "seed": seed}
    return DatasetSplit(build(train_idx), build(test_idx), rule)


def make_idx_protocol_split(
    train_samples: Sequence[tuple[RawImage, int]],
    test_samples: Sequence[tuple[RawImage, int]],
    novel_digit: int,
    max_train_normal: int | None = None,
    seed: int = 0,
    target_size: int = 32,
    channels: int = 1,
) -> DatasetSplit:
    """Leave-one-digit-out using the corpus' own train/test file boundary.

    Normal digits of the train file train the model; the whole test file and
    every novel-digit sample of the train file form the test set.
    """
    if not 0 <= novel_digit <= 9:
        raise ConfigError(f"novel_digit must be in 0..9, got {novel_digit}")
    if not any(d == novel_digit for _, d in list(train_samples) + list(test_samples)):
        raise EmptyClassError(f"digit {novel_digit} does not occur in the dataset")

    normal = [(r, d) for r, d in train_samples if d != novel_digit]
    if max_train_normal is not None and len(normal) > max_train_normal:
        keep = sorted(_seeded_order([r.id for r, _ in normal], seed)[:max_train_normal])
        normal = [normal[i] for i in keep]
    test = list(test_samples) + [(r, d) for r, d in train_samples if d == novel_digit]

    def build(pairs):
        out = [
            LabeledSample(preprocess(r, target_size, channels), d == novel_digit, str(d), r.id)
            for r, d in pairs
        ]
        return sorted(out, key=lambda s: s.id)

    rule = {
        "kind": "idx_leave_one_digit_out",
        "novel_digit": novel_digit,
        "max_train_normal": max_train_normal,
        "seed": seed,
    }
    return DatasetSplit(build(normal), build(test), rule)


# --------------------------------------------------------------------------
# label manifest


@dataclass
class ManifestEntry:
    id: str
    file: str
    labels: frozenset[str]


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")

    def path_of(self, entry: ManifestEntry) -> Path:
        p = Path(entry.file)
        return p if p.is_absolute() else self.root / p


def load_manifest(path) -> Manifest:
    """Read ``{"images": [{"id": ..., "file": ..., "labels": [...]}]}``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataIOError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise FormatError(f"{path}: expected an object with an 'images' list")
    entries = []
    for k, item in enumerate(doc["images"]):
        try:
            entries.append(ManifestEntry(str(item["id"]), str(item["file"]), frozenset(map(str, item["labels"]))))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: images[{k}] needs 'id', 'file' and 'labels'") from exc
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ConsistencyError(f"{path}: duplicate image ids")
    return Manifest(entries, path.parent)


def is_abnormal(labels: Iterable[str], novel_classes: Iterable[str]) -> bool:
    return not set(labels).isdisjoint(novel_classes)


def _load_image_file(path: Path, id: str) -> RawImage:
    with Image.open(path) as im:
        im = im.convert("L") if im.mode in ("L", "1", "I;16", "I") else im.convert("RGB")
        return RawImage(np.asarray(im, dtype=np.uint8), id)


def make_manifest_split(
    manifest: Manifest,
    novel_classes: Iterable[str],
    test_normal: int | float = 0.2,
    test_abnormal: int | None = None,
    seed: int = 0,
    target_size: int = 64,
    channels: int = 3,
) -> DatasetSplit:
    """Split a labelled scene corpus into normal-only training data and a mixed test set.

    ``test_normal`` is a count (int) or a fraction (float) of the normal images
    held out for test; ``test_abnormal`` caps the abnormal images (all if None).
    """
    novel = frozenset(novel_classes)
    if not novel:
        raise ConfigError("novel_classes must not be empty")
    missing = [e.id for e in manifest.entries if not manifest.path_of(e).is_file()]
    if missing:
        raise DataIOError(f"{len(missing)} image file(s) missing on disk, ids: {', '.join(missing)}")

    normal = [e for e in manifest.entries if not is_abnormal(e.labels, novel)]
    abnormal = [e for e in manifest.entries if is_abnormal(e.labels, novel)]
    if not normal:
        raise NoNormalDataError("every manifest image contains a novel class")

    normal = [normal[i] for i in _seeded_order([e.id for e in normal], seed)]
    n_test = test_normal if isinstance(test_normal, int) else int(round(test_normal * len(normal)))
    if not 0 <= n_test < len(normal):
        raise ConfigError(f"test_normal={test_normal} leaves no training data ({len(normal)} normal images)")
    if test_abnormal is not None and test_abnormal < len(abnormal):
        abnormal = [abnormal[i] for i in _seeded_order([e.id for e in abnormal], seed + 1)[:test_abnormal]]

    def build(entries, label):
        out = []
        for e in entries:
            raw = _load_image_file(manifest.path_of(e), e.id)
            out.append(LabeledSample(preprocess(raw, target_size, channels), label, "+".join(sorted(e.labels)), e.id))
        return sorted(out, key=lambda s: s.id)

    rule = {
        "kind": "manifest",
        "novel_classes": sorted(novel),
        "test_normal": test_normal,
        "test_abnormal": test_abnormal,
        "seed": seed,
    }
    test = build(normal[:n_test], False) + build(abnormal, True)
    return DatasetSplit(build(normal[n_test:], False), sorted(test, key=lambda s: s.id), rule)


# --------------------------------------------------------------------------
# synthetic scenes

SHAPES = ("circle", "square", "triangle", "ring", "cross", "diamond")


@dataclass(frozen=True)
class SceneConfig:
    classes: tuple[str, ...] = ("circle", "square", "ring", "cross", "triangle")
    novel_classes: tuple[str, ...] = ("triangle",)
    count: int = 100
    abnormal_ratio: float = 0.3
    test_normal_fraction: float = 0.2
    image_size: int = 64
    channels: int = 3
    objects_per_image: tuple[int, int] = (2, 4)
    object_size: tuple[float, float] = (0.12, 0.25)  # radius as a fraction of the image side
    novel_object_size: tuple[float, float] | None = None  # defaults to object_size
    texture: float = 1.0  # amplitude multiplier for background texture and noise
    seed: int = 0

    def validate(self) -> None:
        problems = []
        unknown = [c for c in self.classes if c not in SHAPES]
        if unknown:
            problems.append(f"unknown shape classes {unknown}; choose from {SHAPES}")
        if not set(self.novel_classes) <= set(self.classes):
            problems.append(f"novel_classes {list(self.novel_classes)} not a subset of classes {list(self.classes)}")
        if not self.novel_classes:
            problems.append("novel_classes must not be empty")
        if self.count < 10:
            problems.append(f"count must be >= 10, got {self.count}")
        if not 0.0 <= self.abnormal_ratio < 1.0:
            problems.append(f"abnormal_ratio must be in [0, 1), got {self.abnormal_ratio}")
        if self.texture < 0:
            problems.append(f"texture must be >= 0, got {self.texture}")
        if not 0.0 <= self.test_normal_fraction < 1.0:
            problems.append(f"test_normal_fraction must be in [0, 1), got {self.test_normal_fraction}")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            problems.append(f"objects_per_image must satisfy 1 <= lo <= hi, got {self.objects_per_image}")
        if problems:
            raise ConfigError("; ".join(problems))
        if set(self.novel_classes) == set(self.classes):
            raise NoNormalDataError("novel_classes covers every shape class; no normal data possible")


def _shape_mask(kind: str, yy, xx, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return (np.abs(dx) <= r * 0.8) & (np.abs(dy) <= r * 0.8)
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.55)
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        t = r / 3
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ConfigError(f"unknown shape {kind!r}")


def _background(rng: np.random.Generator, size: int, texture: float = 1.0) -> np.ndarray:
    """Sky-to-road gradient with a horizon line and low-amplitude texture."""
    top = rng.uniform(120, 220, 3)
    bottom = rng.uniform(40, 120, 3)
    horizon = rng.uniform(0.35, 0.6)
    t = np.linspace(0, 1, size)[:, None, None]
    img = np.where(t < horizon, top + (bottom - top) * t * 0.5, bottom + (top - bottom) * (1 - t) * 0.3)
    img = np.broadcast_to(img, (size, size, 3)).copy()
    coarse = rng.normal(0, 12 * texture, (size // 8 + 1, size // 8 + 1, 1))
    blocks = np.kron(coarse, np.ones((8, 8, 1)))[:size, :size]
    return img + blocks + rng.normal(0, 4 * texture, (size, size, 1))


def render_scene(rng: np.random.Generator, shapes: Sequence[str], cfg: SceneConfig, novel: frozenset[str]) -> np.ndarray:
    size = cfg.image_size
    img = _background(rng, size, cfg.texture)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for kind in shapes:
        lo, hi = cfg.novel_object_size if (kind in novel and cfg.novel_object_size) else cfg.object_size
        r = rng.uniform(lo, hi) * size
        cy, cx = rng.uniform(r, size - r, 2) if r < size / 2 else (size / 2, size / 2)
        color = rng.uniform(0, 255, 3)
        img[_shape_mask(kind, yy, xx, cy, cx, r)] = color
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic_scenes(cfg: SceneConfig) -> DatasetSplit:
    """Render a labelled toy scene corpus; images holding a novel shape are abnormal."""
    cfg.validate()
    novel = frozenset(cfg.novel_classes)
    normal_classes = [c for c in cfg.classes if c not in novel]
    rng = np.random.default_rng(cfg.seed)

    n_abn = int(round(cfg.count * cfg.abnormal_ratio))
    labels = np.zeros(cfg.count, dtype=bool)
    labels[:n_abn] = True
    rng.shuffle(labels)

    width = max(5, len(str(cfg.count)))
    samples = []
    for i, abnormal in enumerate(labels):
        k = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
        shapes = list(rng.choice(normal_classes, size=k))
        if abnormal:
            shapes[int(rng.integers(k))] = str(rng.choice(sorted(novel)))
        raw = RawImage(render_scene(rng, shapes, cfg, novel), f"scene-{i:0{width}d}")
        tensor = preprocess(raw, cfg.image_size, cfg.channels)
        samples.append(LabeledSample(tensor, bool(abnormal), "+".join(sorted(set(shapes))), raw.id))

    normals = [s for s in samples if not s.anomaly_label]
    order = _seeded_order([s.id for s in normals], cfg.seed + 1)
    n_test = int(round(cfg.test_normal_fraction * len(normals)))
    test_ids = {normals[i].id for i in order[:n_test]}
    train = [s for s in normals if s.id not in test_ids]
    test = [s for s in samples if s.anomaly_label or s.id in test_ids]
    rule = {"kind": "synthetic", **{k: list(v) if isinstance(v, tuple) else v for k, v in cfg.__dict__.items()}}
    return DatasetSplit(train, test, rule)


def pixel_fraction(mask_kind: str, radius_fraction: float, size: int = 64) -> float:
    """Share of image pixels covered by one shape at the given relative radius."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = radius_fraction * size
    return float(_shape_mask(mask_kind, yy, xx, size / 2, size / 2, r).mean())

