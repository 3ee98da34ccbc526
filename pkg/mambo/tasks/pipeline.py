"""
Pipeline Module

Three-stage generation: a global context sampled from noise, a
mid-resolution plane stitched from local contexts, and the full-resolution
plane stitched from patches. Super-resolution and the ROI mode reuse the
last two stages with externally supplied contexts.

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

from dataclasses import dataclass
from logging import info
from typing import Optional

import numpy as np

from mambo.diffusion.sampler import ConditioningProvider, PatchGrid, SamplerPlan, generate_plane, plan_patch_grid, sample
from mambo.diffusion.schedule import NoiseSchedule
from mambo.exec.utils import derive_seed
from mambo.imaging.dataset import GeometryConfig, ReferenceContexts, crop, downscale, shift_global, upscale_nearest
from mambo.imaging.preprocess import pad_plane
from mambo.mmio.errors import ConfigurationError, ContractError
from mambo.models.predictor import NoisePredictor

GLOBAL_STREAM, MID_STREAM, FULL_STREAM = 1, 2, 3


@dataclass
class StageModels:
    """ The three predictors with their shared geometry.

    Attributes
    ----------
    stage1 : NoisePredictor
        Global-context model (1 channel).
    stage2 : NoisePredictor
        Local-context model (3 channels, or 2 without the global context).
    stage3 : NoisePredictor
        Patch model (3 channels).
    geometry : GeometryConfig
        Patch geometry.
    sched : NoiseSchedule
        Schedule.
    plan : SamplerPlan
        Reverse-step plan.
    """
    stage1: Optional[NoisePredictor]
    stage2: NoisePredictor
    stage3: NoisePredictor
    geometry: GeometryConfig
    sched: NoiseSchedule
    plan: SamplerPlan

    def __post_init__(self) -> None:
        if self.stage1 is not None and self.stage1.arity != 1:
            raise ConfigurationError("stage 1 expects a 1-channel predictor, got {}".format(self.stage1.arity))
        if self.stage2.arity not in (2, 3):
            raise ConfigurationError("stage 2 expects a 2- or 3-channel predictor, got {}".format(self.stage2.arity))
        if self.stage3.arity != 3:
            raise ConfigurationError("stage 3 expects a 3-channel predictor, got {}".format(self.stage3.arity))


@dataclass
class Mammogram:
    """ Generated planes, from coarse to fine.
    """
    global_ctx: np.ndarray
    mid: np.ndarray
    full: np.ndarray


def _emit(plane: np.ndarray) -> np.ndarray:
    return np.clip(plane, 0.0, 1.0).astype(np.float32)


def generate_global(models: StageModels, seed: int) -> np.ndarray:
    """ Unconditional s x s global context, clamped to [0, 1].
    """
    if models.stage1 is None:
        raise ConfigurationError("no stage 1 model loaded")

    info("[PIPELINE] > Stage 1: global context {0}x{0}".format(models.geometry.s))
    return _emit(sample(models.stage1, [], models.sched, models.plan, seed=derive_seed(seed, GLOBAL_STREAM), side=models.geometry.s))


def mid_grid(g: GeometryConfig) -> PatchGrid:
    return plan_patch_grid(g.mid_side, g.s, g.overlap)


def full_grid(g: GeometryConfig) -> PatchGrid:
    return plan_patch_grid(g.N, g.s, g.overlap)


def mid_provider(models: StageModels, global_ctx: np.ndarray) -> ConditioningProvider:
    """ Conditioning of stage 2: shifted global context of the full-resolution
        center of the patch (and the global context at arity 3).
    """
    g = models.geometry
    upscaled = upscale_nearest(global_ctx, g.scale_factor())

    def provider(index: int, position: tuple[int, int]) -> list[np.ndarray]:
        row, col = position
        center = ((row + g.s // 2) * g.k, (col + g.s // 2) * g.k)
        shifted = shift_global(upscaled, center, g.s)
        return [shifted, global_ctx] if models.stage2.arity == 3 else [shifted]

    return provider


def generate_mid(models: StageModels, global_ctx: np.ndarray, seed: int) -> np.ndarray:
    """ Mid-resolution plane of side N / k stitched from stage-2 patches.

    Raises
    ------
    ContractError
        global_ctx is not s x s.
    """
    g = models.geometry
    if global_ctx.shape != (g.s, g.s):
        raise ContractError("global context of shape {} is not {}x{}".format(global_ctx.shape, g.s, g.s))

    grid = mid_grid(g)
    info("[PIPELINE] > Stage 2: mid plane {0}x{0}, {1} patch(es)".format(g.mid_side, len(grid)))
    return generate_plane(models.stage2, mid_provider(models, global_ctx), grid, models.sched, models.plan, derive_seed(seed, MID_STREAM))


def full_provider(models: StageModels, mid: np.ndarray, global_ctx: np.ndarray) -> ConditioningProvider:
    """ Conditioning of stage 3: s x s window of the mid plane centered on
        the projection of the patch center (clamped), and the global context.
    """
    g = models.geometry

    def provider(index: int, position: tuple[int, int]) -> list[np.ndarray]:
        row, col = position
        center = ((row + g.s // 2) // g.k, (col + g.s // 2) // g.k)
        local, _ = crop(mid, center, g.s)
        return [local, global_ctx]

    return provider


def generate_full(models: StageModels, mid: np.ndarray, global_ctx: np.ndarray, seed: int) -> np.ndarray:
    """ Full-resolution N x N plane stitched from stage-3 patches, clamped to [0, 1].
    """
    g = models.geometry
    if mid.shape != (g.mid_side, g.mid_side):
        raise ContractError("mid plane of shape {} is not {}x{}".format(mid.shape, g.mid_side, g.mid_side))

    grid = full_grid(g)
    info("[PIPELINE] > Stage 3: full plane {0}x{0}, {1} patch(es)".format(g.N, len(grid)))
    return _emit(generate_plane(models.stage3, full_provider(models, mid, global_ctx), grid, models.sched, models.plan, derive_seed(seed, FULL_STREAM)))


def generate_mammogram(models: StageModels, seed: int) -> Mammogram:
    """ Global, then mid, then full plane.

    Note
    ----
    The mid plane is kept unclamped for stage 3 and clamped in the result.
    """
    global_ctx = generate_global(models, seed)
    mid = generate_mid(models, global_ctx, seed)
    full = generate_full(models, mid, global_ctx, seed)
    return Mammogram(global_ctx, _emit(mid), full)


def low_res_context(low_res: np.ndarray, s: int) -> np.ndarray:
    """ Zero pad a low-resolution plane to a square multiple of s, then reduce it to s x s.
    """
    padded, _ = pad_plane(np.asarray(low_res, dtype=np.float32), s)
    return downscale(padded, s)


def super_resolve(models: StageModels, low_res: np.ndarray, seed: int) -> Mammogram:
    """ Stages 2 and 3 conditioned on a provided low-resolution image
        (upscale factor N / s).
    """
    global_ctx = low_res_context(low_res, models.geometry.s)
    info("[PIPELINE] > super-resolution x{}".format(models.geometry.scale_factor()))

    mid = generate_mid(models, global_ctx, seed)
    full = generate_full(models, mid, global_ctx, seed)
    return Mammogram(global_ctx, _emit(mid), full)


def generate_from_reference(models: StageModels, reference: ReferenceContexts, seed: int) -> Mammogram:
    """ ROI mode: every stage conditioned on ground-truth contexts of a
        real image (mid from the real global, full from the real mid).
    """
    mid = generate_mid(models, reference.global_ctx, seed)
    full = generate_full(models, reference.mid, reference.global_ctx, seed)
    return Mammogram(reference.global_ctx, _emit(mid), full)
