"""Training objectives for the generator (adversarial, contextual, encoder) and discriminator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigError, NumericError, ShapeError

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    w_adv: float = 1.0
    w_con: float = 20.0
    w_enc: float = 1.0

    def __post_init__(self):
        for name in ("w_adv", "w_con", "w_enc"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def adversarial_loss(f_real: torch.Tensor, f_fake: torch.Tensor, squared: bool = False) -> torch.Tensor:
    """Feature matching: distance between the batch-mean discriminator features.

    ``squared=True`` gives the mean squared difference over feature elements
    instead of the Euclidean norm.
    """
    _same_shape(f_real, f_fake, "adversarial_loss")
    diff = f_real.flatten(1).mean(0) - f_fake.flatten(1).mean(0)
    if squared:
        return diff.pow(2).mean()
    return torch.linalg.vector_norm(diff)


def contextual_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    _same_shape(x, x_hat, "contextual_loss")
    return (x - x_hat).abs().mean()


def encoder_loss(z: torch.Tensor, z_hat: torch.Tensor, squared: bool = False) -> torch.Tensor:
    """Per-sample Euclidean latent distance averaged over the batch (``squared``: elementwise MSE)."""
    _same_shape(z, z_hat, "encoder_loss")
    diff = (z - z_hat).flatten(1)
    if squared:
        return diff.pow(2).mean()
    return torch.linalg.vector_norm(diff, dim=1).mean()


def generator_total_loss(l_adv, l_con, l_enc, w: LossWeights = LossWeights()):
    for name, v in (("l_adv", l_adv), ("l_con", l_con), ("l_enc", l_enc)):
        v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise NumericError(f"{name} is not finite: {v}")
    return w.w_adv * l_adv + w.w_con * l_con + w.w_enc * l_enc


def discriminator_loss(p_real: torch.Tensor, p_fake: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """BCE with target 1 for real inputs and 0 for reconstructions, summed per sample."""
    p_real = p_real.clamp(eps, 1 - eps)
    p_fake = p_fake.clamp(eps, 1 - eps)
    return (-torch.log(p_real) - torch.log1p(-p_fake)).mean()
