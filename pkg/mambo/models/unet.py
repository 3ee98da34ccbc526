"""
Reference U-Net Noise Predictor

Encoder-decoder with skip connections, a sinusoidal timestep embedding
injected into every residual block, strided-convolution downsampling and
nearest-neighbour upsampling. The input channels carry the noisy plane and
the conditioning planes; the output is the noise of channel 1 only.

This file is part of mambo.

mambo is free software: you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation, either version 3 of the License, or
(at your option) any later version.

mambo is distributed in the hope that it will be useful,
but WITHOUT ANY WARRANTY; without even the implied warranty of
MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
GNU General Public License for more details.

You should have received a copy of the GNU General Public License
along with mambo. If not, see <https://www.gnu.org/licenses/>.
"""

from __future__ import annotations

__author__ = "mambo contributors"
__license__ = "GPLv3"
__version__ = "1.0"

import math
from dataclasses import asdict, dataclass, field
from logging import info
from math import gcd

import torch
import torch.nn as nn
import torch.nn.functional as F

from mambo.mmio.errors import ConfigurationError
from mambo.models.predictor import NoisePredictor

GROUP_WIDTH = 8


@dataclass
class NetConfig:
    """ Network hyperparameters.

    Attributes
    ----------
    in_channels : int
        Arity of the predictor (1, 2 or 3).
    base_channels : int
        Width of the first level.
    channel_multipliers : list of int
        Width multiplier per resolution level.
    time_embed_dim : int
        Width of the timestep embedding.
    patch_side : int
        Input side s in pixels.
    num_res_blocks : int
        Residual blocks per level.
    attention : bool
        Self-attention in the bottleneck.
    """
    in_channels: int = 3
    base_channels: int = 16
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 2, 4])
    time_embed_dim: int = 64
    patch_side: int = 32
    num_res_blocks: int = 1
    attention: bool = False

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        """ Raise a configuration error if the network cannot be built.
        """
        if not self.channel_multipliers:
            raise ConfigurationError("channel multipliers must not be empty")
        if not 1 <= self.in_channels <= 3:
            raise ConfigurationError("in_channels must be 1, 2 or 3, got {}".format(self.in_channels))
        if self.base_channels < 1 or self.time_embed_dim < 2 or self.num_res_blocks < 1:
            raise ConfigurationError("base_channels, time_embed_dim and num_res_blocks must be positive")
        factor = 2 ** (len(self.channel_multipliers) - 1)
        if self.patch_side % factor != 0:
            raise ConfigurationError("patch side {} is not divisible by {} ({} levels)".format(self.patch_side, factor, len(self.channel_multipliers)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> NetConfig:
        return cls(**{key: values[key] for key in cls.__dataclass_fields__ if key in values})


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """ Standard sinusoidal embedding of integer timesteps, shape (B, dim).
    """
    half = dim // 2
    frequencies = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = t.to(torch.float64)[:, None] * frequencies[None]
    embedding = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    if dim % 2:
        embedding = F.pad(embedding, (0, 1))
    return embedding


def group_norm(channels: int) -> nn.GroupNorm:
    """ Group normalization with groups of (about) 8 channels.
    """
    groups = gcd(channels, max(1, channels // GROUP_WIDTH))
    return nn.GroupNorm(groups, channels)


class ResidualBlock(nn.Module):
    """ (norm, SiLU, 3x3 conv) x 2 with the time embedding added in between.
    """

    def __init__(self, in_channels: int, out_channels: int, time_dim: int) -> None:
        super().__init__()
        self.norm1 = group_norm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time = nn.Linear(time_dim, out_channels)
        self.norm2 = group_norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """ Single-head self-attention over spatial positions.
    """

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.norm = group_norm(channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        weights = torch.softmax(torch.einsum('bci,bcj->bij', q, k) / math.sqrt(c), dim=-1)
        attended = torch.einsum('bij,bcj->bci', weights, v).reshape(b, c, h, w)
        return x + self.out(attended)


class UNet(nn.Module):
    """ Encoder-decoder noise network.
    """

    def __init__(self, cfg: NetConfig) -> None:
        super().__init__()
        self.cfg = cfg
        time_dim = cfg.time_embed_dim * 4
        widths = [cfg.base_channels * multiplier for multiplier in cfg.channel_multipliers]

        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )
        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        channels = cfg.base_channels
        for level, width in enumerate(widths):
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResidualBlock(channels, width, time_dim))
                channels = width
            self.down_blocks.append(blocks)
            is_last = level == len(widths) - 1
            self.downsamplers.append(nn.Identity() if is_last else nn.Conv2d(channels, channels, 3, stride=2, padding=1))

        self.mid1 = ResidualBlock(channels, channels, time_dim)
        self.mid_attention = AttentionBlock(channels) if cfg.attention else nn.Identity()
        self.mid2 = ResidualBlock(channels, channels, time_dim)

        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for level in reversed(range(len(widths))):
            width = widths[level]
            blocks = nn.ModuleList()
            blocks.append(ResidualBlock(channels + width, width, time_dim))
            for _ in range(cfg.num_res_blocks - 1):
                blocks.append(ResidualBlock(width, width, time_dim))
            channels = width
            self.up_blocks.append(blocks)
            self.upsamplers.append(nn.Conv2d(channels, channels, 3, padding=1) if level > 0 else nn.Identity())

        self.norm_out = group_norm(channels)
        self.conv_out = nn.Conv2d(channels, 1, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(sinusoidal_embedding(t, self.cfg.time_embed_dim).to(x.dtype))

        h = self.conv_in(x)
        skips = []
        for blocks, downsample in zip(self.down_blocks, self.downsamplers):
            for block in blocks:
                h = block(h, emb)
            skips.append(h)
            h = downsample(h)

        h = self.mid2(self.mid_attention(self.mid1(h, emb)), emb)

        for blocks, upsample in zip(self.up_blocks, self.upsamplers):
            h = torch.cat([h, skips.pop()], dim=1)
            for block in blocks:
                h = block(h, emb)
            if not isinstance(upsample, nn.Identity):
                h = upsample(F.interpolate(h, scale_factor=2, mode='nearest'))

        return self.conv_out(F.silu(self.norm_out(h)))


class UNetPredictor(NoisePredictor):
    """ Trainable predictor backed by the reference U-Net.

    Attributes
    ----------
    cfg : NetConfig
        Hyperparameters.
    module : UNet
        Torch module.
    """

    def __init__(self, cfg: NetConfig, module: UNet) -> None:
        self.cfg: NetConfig = cfg
        self.module: UNet = module
        self.arity = cfg.in_channels

    @property
    def dtype(self) -> torch.dtype:
        return next(self.module.parameters()).dtype

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.module(x.to(self.dtype), t)

    def parameters(self) -> list[torch.nn.Parameter]:
        return list(self.module.parameters())

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return dict(self.module.state_dict())

    def train(self, mode: bool = True) -> None:
        self.module.train(mode)


def build_reference_net(cfg: NetConfig, seed: int) -> UNetPredictor:
    """ Build the reference network with seeded initialization.

    Note
    ----
    Initialization is torch's uniform fan-in scheme, drawn from a forked
    RNG so that the global torch state is left untouched.

    Parameters
    ----------
    cfg : NetConfig
        Hyperparameters.
    seed : int
        Initialization seed.

    Returns
    -------
    UNetPredictor
        Predictor with `cfg.in_channels` arity.
    """
    cfg.validate()

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = UNet(cfg)

    predictor = UNetPredictor(cfg, module)
    info("[NET] > {} channel(s), widths {}, {} parameters".format(cfg.in_channels, [cfg.base_channels * m for m in cfg.channel_multipliers], predictor.parameter_count()))

    return predictor
