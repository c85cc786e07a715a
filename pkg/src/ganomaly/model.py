"""GANomaly networks: generator encoder/decoder, standalone encoder, discriminator.

All four networks follow the DCGAN recipe: 4x4 kernels, stride 2, padding 1.
The number of stride-2 stages is ``log2(input_size) - 2`` so every network
shrinks (or grows) between ``input_size`` and a 4x4 map.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class ArchConfig:
    input_size: int = 32
    channels: int = 1
    latent_dim: int = 100
    base_width: int = 64

    def __post_init__(self):
        problems = []
        if self.input_size < 32 or not _is_power_of_two(self.input_size):
            problems.append(f"input_size must be a power of two >= 32, got {self.input_size}")
        if self.channels not in (1, 3):
            problems.append(f"channels must be 1 or 3, got {self.channels}")
        if self.latent_dim < 1:
            problems.append(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.base_width < 1:
            problems.append(f"base_width must be >= 1, got {self.base_width}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def n_stages(self) -> int:
        return int(math.log2(self.input_size)) - 2

    def to_dict(self) -> dict:
        return asdict(self)


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


class ConvTrunk(nn.Module):
    """Stride-2 conv stack taking ``input_size`` down to 4x4.

    The first block has no batch norm (DCGAN convention).
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch, out_ch = arch.channels, arch.base_width
        for stage in range(arch.n_stages):
            layers.append(nn.Conv2d(in_ch, out_ch, 4, 2, 1, bias=False))
            if stage > 0:
                layers.append(nn.BatchNorm2d(out_ch))
            layers.append(nn.LeakyReLU(LEAKY_SLOPE, inplace=True))
            in_ch, out_ch = out_ch, out_ch * 2
        self.blocks = nn.Sequential(*layers)
        self.out_channels = in_ch

    def forward(self, x):
        return self.blocks(x)


class Encoder(nn.Module):
    """Maps an image batch to an ``(N, latent_dim)`` code."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.trunk = ConvTrunk(arch)
        self.to_code = nn.Conv2d(self.trunk.out_channels, arch.latent_dim, 4, 1, 0, bias=False)

    def forward(self, x):
        return self.to_code(self.trunk(x)).flatten(1)


class Decoder(nn.Module):
    """Maps an ``(N, latent_dim)`` code back to an image batch in [-1, 1]."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        width = arch.base_width * 2 ** (arch.n_stages - 1)
        layers: list[nn.Module] = [
            nn.ConvTranspose2d(arch.latent_dim, width, 4, 1, 0, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(True),
        ]
        for _ in range(arch.n_stages - 1):
            layers += [
                nn.ConvTranspose2d(width, width // 2, 4, 2, 1, bias=False),
                nn.BatchNorm2d(width // 2),
                nn.ReLU(True),
            ]
            width //= 2
        layers += [nn.ConvTranspose2d(width, arch.channels, 4, 2, 1, bias=False), nn.Tanh()]
        self.blocks = nn.Sequential(*layers)

    def forward(self, z):
        return self.blocks(z[:, :, None, None])


class Discriminator(nn.Module):
    """Returns ``(probability, features)``; features feed the sigmoid head."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.trunk = ConvTrunk(arch)
        self.head = nn.Conv2d(self.trunk.out_channels, 1, 4, 1, 0, bias=False)

    def forward(self, x):
        feats = self.trunk(x)
        prob = torch.sigmoid(self.head(feats)).flatten()
        return prob, feats.flatten(1)


class ModelBundle(nn.Module):
    """The three GANomaly networks plus their shared architecture config."""

    NETWORKS = ("gen_encoder", "gen_decoder", "encoder", "discriminator")

    def __init__(self, arch: ArchConfig, seed: int = 0):
        super().__init__()
        self.arch = arch
        self.seed = seed
        self.gen_encoder = Encoder(arch)
        self.gen_decoder = Decoder(arch)
        self.encoder = Encoder(arch)
        self.discriminator = Discriminator(arch)

    def generator_parameters(self):
        for name in ("gen_encoder", "gen_decoder", "encoder"):
            yield from getattr(self, name).parameters()

    def network(self, name: str) -> nn.Module:
        if name not in self.NETWORKS:
            raise KeyError(name)
        return getattr(self, name)


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """DCGAN initialisation: conv N(0, 0.02), batch-norm scale N(1, 0.02)."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02, generator=generator)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, 0.02, generator=generator)
            nn.init.zeros_(m.bias)


def build_models(arch: ArchConfig, seed: int = 0) -> ModelBundle:
    bundle = ModelBundle(arch, seed)
    gen = torch.Generator().manual_seed(seed)
    # one generator stream, so E and G_E get different weights
    for name in ModelBundle.NETWORKS:
        init_weights(bundle.network(name), gen)
    return bundle


def as_batch(x) -> torch.Tensor:
    """Accept a numpy array or tensor, single image (C,H,W) or batch (N,C,H,W)."""
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    if x.dim() == 3:
        x = x.unsqueeze(0)
    return x


def check_images(arch: ArchConfig, x: torch.Tensor) -> None:
    expected = (arch.channels, arch.input_size, arch.input_size)
    if x.dim() != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"expected image batch of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(x.shape)}")


def generator_forward(bundle: ModelBundle, x):
    """Return ``(x_hat, z)`` with ``z = G_E(x)`` and ``x_hat = G_D(z)``."""
    x = as_batch(x)
    check_images(bundle.arch, x)
    z = bundle.gen_encoder(x)
    return bundle.gen_decoder(z), z


def encode(bundle: ModelBundle, x_hat):
    x_hat = as_batch(x_hat)
    check_images(bundle.arch, x_hat)
    return bundle.encoder(x_hat)


def discriminate(bundle: ModelBundle, x):
    """Return ``(probabilities, features)`` for a batch."""
    x = as_batch(x)
    check_images(bundle.arch, x)
    return bundle.discriminator(x)
