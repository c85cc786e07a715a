"""Alternating adversarial training on normal-only data."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .datasets import DatasetSplit, LabeledSample, stack_images
from .errors import ConfigError, ConsistencyError, NumericError
from .losses import (
    LossWeights,
    adversarial_loss,
    contextual_loss,
    discriminator_loss,
    encoder_loss,
    generator_total_loss,
)
from .model import ArchConfig, ModelBundle, build_models, init_weights

log = logging.getLogger(__name__)

TELEMETRY_FIELDS = ("epoch", "l_adv", "l_con", "l_enc", "l_g", "l_d")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 10  # 0 = only at the end
    squared_latent_norms: bool = False
    reinit_d_threshold: float | None = None

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.beta1 < 1:
            problems.append(f"beta1 must be in [0, 1), got {self.beta1}")
        if not 0 <= self.beta2 < 1:
            problems.append(f"beta2 must be in [0, 1), got {self.beta2}")
        if self.checkpoint_every < 0:
            problems.append(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepLosses:
    l_adv: float
    l_con: float
    l_enc: float
    l_g: float
    l_d: float


@dataclass
class EpochRecord:
    epoch: int
    l_adv: float
    l_con: float
    l_enc: float
    l_g: float
    l_d: float

    def row(self) -> list:
        return [self.epoch, self.l_adv, self.l_con, self.l_enc, self.l_g, self.l_d]


@dataclass
class TrainState:
    bundle: ModelBundle
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    cfg: TrainConfig
    epoch: int = 0  # completed epochs
    steps: int = 0

    def optimizers(self) -> dict:
        return {"g": self.opt_g, "d": self.opt_d}


def init_state(bundle: ModelBundle, cfg: TrainConfig) -> TrainState:
    """One Adam over G_E, G_D and E; a second over D."""
    betas = (cfg.beta1, cfg.beta2)
    opt_g = torch.optim.Adam(list(bundle.generator_parameters()), lr=cfg.learning_rate, betas=betas)
    opt_d = torch.optim.Adam(bundle.discriminator.parameters(), lr=cfg.learning_rate, betas=betas)
    return TrainState(bundle, opt_g, opt_d, cfg)


def train_step(state: TrainState, batch: torch.Tensor) -> StepLosses:
    """Update G and E under the weighted generator loss, then D under BCE."""
    b, cfg = state.bundle, state.cfg
    b.train()
    sq = cfg.squared_latent_norms

    z = b.gen_encoder(batch)
    x_hat = b.gen_decoder(z)
    z_hat = b.encoder(x_hat)
    _, f_real = b.discriminator(batch)
    _, f_fake = b.discriminator(x_hat)
    l_adv = adversarial_loss(f_real.detach(), f_fake, squared=sq)
    l_con = contextual_loss(batch, x_hat)
    l_enc = encoder_loss(z, z_hat, squared=sq)
    l_g = generator_total_loss(l_adv, l_con, l_enc, cfg.loss_weights)

    state.opt_g.zero_grad(set_to_none=True)
    l_g.backward()
    state.opt_g.step()

    p_real, _ = b.discriminator(batch)
    p_fake, _ = b.discriminator(x_hat.detach())
    l_d = discriminator_loss(p_real, p_fake)
    state.opt_d.zero_grad(set_to_none=True)
    l_d.backward()
    state.opt_d.step()
    state.steps += 1

    losses = StepLosses(*(float(v.detach()) for v in (l_adv, l_con, l_enc, l_g, l_d)))
    if not all(math.isfinite(v) for v in asdict(losses).values()):
        raise NumericError(f"non-finite loss at step {state.steps}: {losses}")

    if cfg.reinit_d_threshold is not None and losses.l_d < cfg.reinit_d_threshold:
        log.info("discriminator loss %.3g below %.3g, re-initialising D", losses.l_d, cfg.reinit_d_threshold)
        init_weights(b.discriminator, torch.Generator().manual_seed(cfg.seed * 1_000_003 + state.steps))
    return losses


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle for one epoch; depends only on (seed, epoch) so resumed runs match."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def checkpoint_epochs(epochs: int, every: int) -> list[int]:
    marks = list(range(every, epochs + 1, every)) if every else []
    if epochs not in marks:
        marks.append(epochs)
    return marks


def _write_telemetry(path: Path, records: Sequence[EpochRecord], keep_upto: int) -> None:
    """Rewrite the CSV with rows <= keep_upto from disk, then append new records."""
    rows = []
    if path.exists() and keep_upto > 0:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh)][1:]
        rows = [r for r in rows if int(r[0]) <= keep_upto]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TELEMETRY_FIELDS)
        w.writerows(rows)
        w.writerows(rec.row() for rec in records)


def read_telemetry(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            EpochRecord(int(r["epoch"]), *(float(r[k]) for k in TELEMETRY_FIELDS[1:]))
            for r in reader
        ]


def train(
    split: DatasetSplit | Sequence[LabeledSample],
    arch: ArchConfig,
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
    on_batch: Callable[[list[str]], None] | None = None,
    run_info: dict | None = None,
) -> tuple[ModelBundle, list[EpochRecord]]:
    """Train from scratch or resume from a checkpoint directory.

    Only ``split.train_normal`` is ever batched.  ``on_batch`` receives the
    ids of every batch.  With ``out_dir`` set, checkpoints land in
    ``out_dir/checkpoints/epoch_NNNN`` and telemetry in ``out_dir/telemetry.csv``
    plus ``out_dir/run_log.json``.
    """
    samples = split.train_normal if isinstance(split, DatasetSplit) else list(split)
    if not samples:
        raise ConfigError("training set is empty")
    if any(s.anomaly_label for s in samples):
        raise ConsistencyError("abnormal samples offered for training")
    ids = [s.id for s in samples]
    data = torch.from_numpy(stack_images(samples))
    if tuple(data.shape[1:]) != (arch.channels, arch.input_size, arch.input_size):
        raise ConfigError(f"images of shape {tuple(data.shape[1:])} do not fit arch {arch}")

    torch.manual_seed(cfg.seed)
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        state = init_state(ckpt.bundle, cfg)
        ckpt.restore_optimizers(g=state.opt_g, d=state.opt_d)
        state.epoch = ckpt.epoch
        log.info("resuming from epoch %d", ckpt.epoch)
    else:
        state = init_state(build_models(arch, cfg.seed), cfg)

    out = Path(out_dir) if out_dir is not None else None
    marks = set(checkpoint_epochs(cfg.epochs, cfg.checkpoint_every))
    started = time.time()
    records: list[EpochRecord] = []
    last_good = _snapshot(state) if out is not None else None

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_telemetry(out / "telemetry.csv", [], state.epoch)

    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        order = epoch_order(len(samples), cfg.seed, epoch)
        sums = np.zeros(5)
        try:
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                if on_batch is not None:
                    on_batch([ids[i] for i in idx])
                losses = train_step(state, data[torch.from_numpy(idx)])
                sums += len(idx) * np.array(list(asdict(losses).values()))
        except NumericError:
            if last_good is not None:
                path = out / "checkpoints" / "last_good"
                save_checkpoint(path, last_good.bundle, last_good.optimizers(), last_good.epoch, _extra(cfg, run_info))
                log.error("non-finite loss in epoch %d; last good state saved to %s", epoch, path)
            raise
        state.epoch = epoch
        rec = EpochRecord(epoch, *(sums / len(order)).tolist())
        records.append(rec)
        log.info("epoch %d  l_adv %.4f  l_con %.4f  l_enc %.4f  l_g %.4f  l_d %.4f", *rec.row())

        if out is not None:
            with open(out / "telemetry.csv", "a", newline="") as fh:
                csv.writer(fh).writerow(rec.row())
            if epoch in marks:
                path = save_checkpoint(
                    out / "checkpoints" / f"epoch_{epoch:04d}",
                    state.bundle,
                    state.optimizers(),
                    epoch,
                    _extra(cfg, run_info),
                )
                (out / "checkpoints" / "latest").write_text(path.name + "\n")
            last_good = _snapshot(state)

    if out is not None:
        log_doc = {
            "config": {"arch": arch.to_dict(), "train": cfg.to_dict(), **(run_info or {})},
            "records": [asdict(r) for r in read_telemetry(out / "telemetry.csv")],
            "started": started,
            "finished": time.time(),
        }
        (out / "run_log.json").write_text(json.dumps(log_doc, indent=2, default=str))
    return state.bundle, records


def _snapshot(state: TrainState) -> TrainState:
    return copy.deepcopy(state)


def _extra(cfg: TrainConfig, run_info: dict | None) -> dict:
    return {"loss_weights": asdict(cfg.loss_weights), "train_config": cfg.to_dict(), **(run_info or {})}
