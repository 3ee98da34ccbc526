"""
Shared fixtures: schedules, geometries and stub predictors.

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

import numpy as np
import pytest
import torch

from mambo.diffusion.schedule import NoiseSchedule, build_linear_schedule, scaled_bounds
from mambo.imaging.dataset import GeometryConfig
from mambo.models.predictor import NoisePredictor
from mambo.models.unet import NetConfig


class ConstantPredictor(NoisePredictor):
    """ Predicts the noise that makes the clean estimate equal `value`
        everywhere: every sampled plane ends exactly at `value`.
    """

    dtype = torch.float64

    def __init__(self, value: float, sched: NoiseSchedule, arity: int = 1) -> None:
        self.value = value
        self.sched = sched
        self.arity = arity

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        alpha_bar = torch.as_tensor(self.sched.alpha_bar[t.numpy()], dtype=torch.float64)[:, None, None]
        x1 = x[:, 0].to(torch.float64)
        return ((x1 - torch.sqrt(alpha_bar) * self.value) / torch.sqrt(1.0 - alpha_bar))[:, None]


class NaNPredictor(NoisePredictor):

    dtype = torch.float64

    def __init__(self, arity: int = 1) -> None:
        self.arity = arity

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return torch.full_like(x[:, :1], float('nan'), dtype=torch.float64)


@pytest.fixture
def desk_schedule() -> NoiseSchedule:
    return build_linear_schedule(200, *scaled_bounds(200))


@pytest.fixture
def paper_schedule() -> NoiseSchedule:
    return build_linear_schedule(1000, 1e-4, 0.02)


@pytest.fixture
def desk_geometry() -> GeometryConfig:
    return GeometryConfig(32, 3, 288, 4)


@pytest.fixture
def tiny_net_config() -> NetConfig:
    return NetConfig(in_channels=3, base_channels=8, channel_multipliers=[1, 2], time_embed_dim=16, patch_side=16)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
