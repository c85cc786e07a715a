"""Checkpoint directories.

A checkpoint is a directory holding ``manifest.json`` plus one flat binary
tensor file per network (and per optimizer, when saved).  Tensor file layout,
all integers little-endian::

    b"GTEN"  u32 layout_version  u32 n_tensors
    repeated n_tensors times:
        u16 name_len, name (utf-8)
        u8  dtype code (see DTYPES)
        u8  ndim, u64 * ndim shape
        raw element data, little-endian, C order

The manifest stores a sha256 per file; a mismatch on load is treated as
corruption.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointCorruptError, CheckpointError, CheckpointVersionError
from .model import ArchConfig, ModelBundle

FORMAT_VERSION = 1
MAGIC = b"GTEN"
DTYPES = {
    0: torch.float32,
    1: torch.float64,
    2: torch.int64,
    3: torch.int32,
    4: torch.uint8,
    5: torch.bool,
    6: torch.float16,
}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


def write_tensors(path: Path, tensors: dict[str, torch.Tensor]) -> None:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(struct.pack("<BB", DTYPE_CODES[t.dtype], t.dim()))
        parts.append(struct.pack(f"<{t.dim()}Q", *t.shape))
        arr = t.numpy()
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    path.write_bytes(b"".join(parts))


def read_tensors(path: Path) -> dict[str, torch.Tensor]:
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a tensor file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: tensor layout version {version} unsupported")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + n].decode()
            pos += 2 + n
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            dtype = torch.empty(0, dtype=DTYPES[code]).numpy().dtype.newbyteorder("<")
            size = int(np.prod(shape)) * dtype.itemsize
            arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape)
            out[name] = torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True))
            pos += size
    except (struct.error, ValueError, KeyError) as exc:
        raise CheckpointCorruptError(f"{path}: malformed tensor file ({exc})") from exc
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _optimizer_tensors(opt: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    out = {}
    for idx, state in opt.state_dict()["state"].items():
        for key, value in state.items():
            out[f"{idx}.{key}"] = value if isinstance(value, torch.Tensor) else torch.tensor(value)
    return out


def _restore_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor]) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for name, value in tensors.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = value
    sd["state"] = state
    opt.load_state_dict(sd)


@dataclass
class Checkpoint:
    bundle: ModelBundle
    epoch: int
    manifest: dict
    optimizer_tensors: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)

    def restore_optimizers(self, **optimizers: torch.optim.Optimizer) -> None:
        for name, opt in optimizers.items():
            if name not in self.optimizer_tensors:
                raise CheckpointError(f"checkpoint holds no state for optimizer {name!r}")
            _restore_optimizer(opt, self.optimizer_tensors[name])


def save_checkpoint(path, bundle: ModelBundle, optimizers: dict | None = None, epoch: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in ModelBundle.NETWORKS:
        f = path / f"{name}.bin"
        write_tensors(f, bundle.network(name).state_dict())
        files[f.name] = _sha256(f)
    for name, opt in (optimizers or {}).items():
        f = path / f"optim_{name}.bin"
        write_tensors(f, _optimizer_tensors(opt))
        files[f.name] = _sha256(f)
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch": bundle.arch.to_dict(),
        "seed": bundle.seed,
        "epoch": epoch,
        "optimizers": {
            name: [{k: v for k, v in g.items() if k != "params"} for g in opt.state_dict()["param_groups"]]
            for name, opt in (optimizers or {}).items()
        },
        "files": files,
        **(extra or {}),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: no manifest.json") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format_version {manifest.get('format_version')!r} unsupported (expected {FORMAT_VERSION})"
        )
    for fname, digest in manifest["files"].items():
        f = path / fname
        if not f.is_file():
            raise CheckpointCorruptError(f"{path}: missing {fname}")
        if _sha256(f) != digest:
            raise CheckpointCorruptError(f"{path}: checksum mismatch for {fname}")

    bundle = ModelBundle(ArchConfig(**manifest["arch"]), manifest.get("seed", 0))
    for name in ModelBundle.NETWORKS:
        bundle.network(name).load_state_dict(read_tensors(path / f"{name}.bin"))
    optim = {
        fname[len("optim_") : -len(".bin")]: read_tensors(path / fname)
        for fname in manifest["files"]
        if fname.startswith("optim_")
    }
    return Checkpoint(bundle, int(manifest["epoch"]), manifest, optim)
