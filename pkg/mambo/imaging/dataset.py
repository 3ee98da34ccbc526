"""
Dataset Construction Module

Training samples for the three stages: mask-constrained crop sampling,
context extraction, shifted global contexts and area-average downscaling.

Channel ordering:
- stage 1: (global,)
- stage 2: (target, shifted global, global)
- stage 3: (patch, local context, global)

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

from dataclasses import dataclass, replace
from logging import info
from typing import Sequence, Union

import numpy as np

from mambo.exec.utils import rng_for
from mambo.imaging.preprocess import BreastMask, breast_mask, normalize_and_orient, pad_plane
from mambo.mmio.errors import ConfigurationError, ContractError, EmptyMaskError

Center = tuple[int, int]


@dataclass(frozen=True)
class GeometryConfig:
    """ Patch geometry.

    Attributes
    ----------
    s : int
        Patch side in pixels.
    k : int
        Local context ratio, the local context covers (k s)^2 full-resolution pixels.
    N : int
        Padded full-image side.
    overlap : int
        Stitching overlap in pixels.
    """
    s: int
    k: int
    N: int
    overlap: int

    def __post_init__(self) -> None:
        if self.s < 1 or self.k < 1:
            raise ConfigurationError("geometry needs s >= 1 and k >= 1, got s = {}, k = {}".format(self.s, self.k))
        if self.N % self.s != 0:
            raise ConfigurationError("N = {} is not divisible by s = {}".format(self.N, self.s))
        if self.N % self.k != 0 or self.N // self.k < self.s:
            raise ConfigurationError("N / k = {} / {} is not a valid mid-resolution side for s = {}".format(self.N, self.k, self.s))
        if not 0 <= self.overlap < self.s:
            raise ConfigurationError("overlap {} must lie in [0, s = {})".format(self.overlap, self.s))

    @property
    def mid_side(self) -> int:
        return self.N // self.k

    @property
    def local_side(self) -> int:
        return self.k * self.s

    def scale_factor(self) -> int:
        return self.N // self.s


@dataclass
class TrainingTriple:
    """ Channels of one training sample.

    Attributes
    ----------
    channels : tuple of ndarray
        s x s planes, channel 1 is the diffusion target.
    center : tuple of int
        Effective center in full-resolution pixels (after clamping).
    """
    channels: tuple[np.ndarray, ...]
    center: Center

    @property
    def patch(self) -> np.ndarray:
        return self.channels[0]

    @property
    def local_ctx(self) -> np.ndarray:
        return self.channels[1]

    @property
    def global_ctx(self) -> np.ndarray:
        return self.channels[-1]

    def stack(self, arity: int) -> np.ndarray:
        """ First `arity` channels as a (arity, s, s) stack.
        """
        if arity > len(self.channels):
            raise ConfigurationError("sample holds {} channel(s), predictor expects {}".format(len(self.channels), arity))
        return np.stack(self.channels[:arity])


def _box_weights(source: int, target: int) -> np.ndarray:
    """ (target x source) matrix of area-average weights.
    """
    edges = np.arange(target + 1) * (source / target)
    lower, upper = edges[:-1, None], edges[1:, None]
    pixels = np.arange(source)[None, :]
    coverage = np.clip(np.minimum(upper, pixels + 1) - np.maximum(lower, pixels), 0.0, None)
    return coverage / (source / target)


def downscale(p: np.ndarray, out_side: int) -> np.ndarray:
    """ Area-average reduction to out_side x out_side.

    Note
    ----
    Each output pixel is the mean of its source box; exact block means
    when the ratio is an integer.

    Raises
    ------
    ContractError
        Upscaling request.
    """
    p = np.asarray(p)
    height, width = p.shape
    if out_side > height or out_side > width or out_side < 1:
        raise ContractError("downscale cannot map {}x{} to {}x{}".format(height, width, out_side, out_side))

    if height == out_side and width == out_side:
        return p.astype(np.float32, copy=True)

    values = p.astype(np.float64)
    if height % out_side == 0 and width % out_side == 0:
        reduced = values.reshape(out_side, height // out_side, out_side, width // out_side).mean(axis=(1, 3))
    else:
        reduced = _box_weights(height, out_side) @ values @ _box_weights(width, out_side).T

    return reduced.astype(np.float32)


def upscale_nearest(p: np.ndarray, factor: int) -> np.ndarray:
    """ Nearest-neighbour upscaling by an integer factor.
    """
    return np.repeat(np.repeat(p, factor, axis=0), factor, axis=1)


def crop(plane: np.ndarray, center: Center, side: int) -> tuple[np.ndarray, Center]:
    """ side x side window centered on `center`, translated inward when it
        would leave the plane (zero filled only when side exceeds the plane).

    Returns
    -------
    tuple of ndarray and (int, int)
        Window and its effective center.
    """
    height, width = plane.shape

    def clamp(position: int, extent: int) -> int:
        return int(np.clip(position - side // 2, min(0, extent - side), max(0, extent - side)))

    top, left = clamp(center[0], height), clamp(center[1], width)
    window = np.zeros((side, side), dtype=plane.dtype)

    src_top, src_left = max(top, 0), max(left, 0)
    src_bottom, src_right = min(top + side, height), min(left + side, width)
    window[src_top - top:src_bottom - top, src_left - left:src_right - left] = plane[src_top:src_bottom, src_left:src_right]

    return window, (top + side // 2, left + side // 2)


def sample_patch_center(mask: Union[BreastMask, np.ndarray], rng_seed: int) -> Center:
    """ Uniformly random pixel of the mask.

    Raises
    ------
    EmptyMaskError
        Empty mask.
    """
    pixels = np.argwhere(mask.mask if isinstance(mask, BreastMask) else np.asarray(mask, dtype=bool))
    if len(pixels) == 0:
        raise EmptyMaskError("cannot sample a patch center from an empty mask")

    row, col = pixels[rng_for(rng_seed).integers(len(pixels))]
    return int(row), int(col)


def extract_stage1_target(full: np.ndarray, g: GeometryConfig) -> TrainingTriple:
    """ Global context of the whole image (stage 1 target).
    """
    return TrainingTriple((downscale(full, g.s),), (g.N // 2, g.N // 2))


def extract_stage3_triple(full: np.ndarray, center: Center, g: GeometryConfig) -> TrainingTriple:
    """ (patch, local context, global context) around `center`.

    Note
    ----
    The patch is the central s x s square of the (k s) x (k s) local crop.
    """
    local, effective = crop(full, center, g.local_side)
    offset = (g.local_side - g.s) // 2
    patch = local[offset:offset + g.s, offset:offset + g.s].astype(np.float32)

    return TrainingTriple((patch, downscale(local, g.s), downscale(full, g.s)), effective)


def shift_global(full: np.ndarray, center: Center, out_side: int | None = None) -> np.ndarray:
    """ Translate the image so that `center` lands on the image center,
        filling with 0, then downscale to out_side (when given).
    """
    height, width = full.shape
    drow, dcol = center[0] - height // 2, center[1] - width // 2

    shifted = np.zeros_like(full)
    rows_dst = slice(max(0, -drow), min(height, height - drow))
    cols_dst = slice(max(0, -dcol), min(width, width - dcol))
    rows_src = slice(max(0, drow), min(height, height + drow))
    cols_src = slice(max(0, dcol), min(width, width + dcol))
    shifted[rows_dst, cols_dst] = full[rows_src, cols_src]

    return shifted if out_side is None else downscale(shifted, out_side)


def extract_stage2_pair(full: np.ndarray, center: Center, g: GeometryConfig) -> TrainingTriple:
    """ (downscaled local crop, shifted global, global) around `center`.
    """
    local, effective = crop(full, center, g.local_side)
    return TrainingTriple((downscale(local, g.s), shift_global(full, effective, g.s), downscale(full, g.s)), effective)


class TrainingSet:
    """ Random source of training samples for one stage.

    Attributes
    ----------
    images : list of (ndarray, ndarray)
        Full-resolution planes (N x N) with their breast masks.
    geometry : GeometryConfig
        Patch geometry.
    stage : int
        1, 2 or 3.
    """

    def __init__(self, images: Sequence[tuple[np.ndarray, np.ndarray]], geometry: GeometryConfig, stage: int) -> None:
        if not images:
            raise ContractError("training set is empty")
        if stage not in (1, 2, 3):
            raise ConfigurationError("unknown stage {}".format(stage))
        for full, _ in images:
            if full.shape != (geometry.N, geometry.N):
                raise ContractError("training image of shape {} does not match N = {}".format(full.shape, geometry.N))

        self.images: list[tuple[np.ndarray, np.ndarray]] = list(images)
        self.geometry: GeometryConfig = geometry
        self.stage: int = stage

        # Global targets do not depend on the crop
        self._globals: list[TrainingTriple] = [extract_stage1_target(full, geometry) for full, _ in self.images]

    def __len__(self) -> int:
        return len(self.images)

    def draw(self, rng: np.random.Generator, batch_size: int) -> list[TrainingTriple]:
        """ Draw a batch: image indices first, then one center seed per sample.
        """
        indices = rng.integers(len(self.images), size=batch_size)
        seeds = rng.integers(2 ** 63, size=batch_size)

        batch = []
        for index, seed in zip(indices, seeds):
            full, mask = self.images[index]
            if self.stage == 1:
                batch.append(self._globals[index])
                continue
            center = sample_patch_center(mask, int(seed))
            if self.stage == 2:
                batch.append(extract_stage2_pair(full, center, self.geometry))
            else:
                batch.append(extract_stage3_triple(full, center, self.geometry))

        return batch


def prepare_full(raw: np.ndarray, g: GeometryConfig) -> tuple[np.ndarray, np.ndarray]:
    """ Raw image to an N x N training plane and its breast mask.

    Note
    ----
    The padded image is area-downscaled to N when larger, zero padded
    on the right and bottom when smaller.
    """
    oriented = normalize_and_orient(raw)
    mask = breast_mask(oriented).mask.astype(np.float32)

    plane, _ = pad_plane(oriented.plane, g.s)
    mask, _ = pad_plane(mask, g.s)

    side = plane.shape[0]
    if side > g.N:
        plane, mask = downscale(plane, g.N), downscale(mask, g.N)
    elif side < g.N:
        plane = np.pad(plane, ((0, g.N - side), (0, g.N - side)))
        mask = np.pad(mask, ((0, g.N - side), (0, g.N - side)))

    return plane.astype(np.float32), mask >= 0.5


@dataclass
class ReferenceContexts:
    """ Ground-truth contexts of a real image (pipeline ROI mode).
    """
    global_ctx: np.ndarray
    mid: np.ndarray
    full: np.ndarray


def reference_contexts(full: np.ndarray, g: GeometryConfig) -> ReferenceContexts:
    """ Global (s x s) and mid-resolution (N/k x N/k) planes of a real image.
    """
    if full.shape != (g.N, g.N):
        raise ContractError("reference image of shape {} does not match N = {}".format(full.shape, g.N))
    return ReferenceContexts(downscale(full, g.s), downscale(full, g.mid_side), np.asarray(full, dtype=np.float32))


LABELS = ('healthy', 'lesion', 'unknown')


@dataclass(frozen=True)
class DatasetRecord:
    """ One line of a dataset manifest.
    """
    path: str
    split: str
    label: str

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise ContractError("unknown label '{}' for {} (expected one of {})".format(self.label, self.path, ', '.join(LABELS)))


def mix_synthetic(records: Sequence[DatasetRecord], synthetic: dict[str, Sequence[str]], fraction: float, seed: int) -> list[DatasetRecord]:
    """ Replace a fraction of the records of every label class with
        synthetic images of the same class.

    Parameters
    ----------
    records : list of DatasetRecord
        Real records.
    synthetic : dict
        Synthetic image paths per label.
    fraction : float
        Share of each class to replace, in [0, 1].
    seed : int
        Selection seed.

    Returns
    -------
    list of DatasetRecord
        Records in the original order, replaced entries keep their split.

    Raises
    ------
    ContractError
        Invalid fraction or not enough synthetic images.
    """
    if not 0 <= fraction <= 1:
        raise ContractError("synthetic fraction {} outside [0, 1]".format(fraction))

    mixed = list(records)
    for label in LABELS:
        positions = [i for i, record in enumerate(records) if record.label == label]
        count = int(round(fraction * len(positions)))
        if count == 0:
            continue

        pool = list(synthetic.get(label, []))
        if len(pool) < count:
            raise ContractError("{} synthetic '{}' image(s) needed, {} available".format(count, label, len(pool)))

        chosen = sorted(rng_for(seed, LABELS.index(label)).permutation(positions)[:count])
        for path, position in zip(pool, chosen):
            mixed[position] = replace(records[position], path=path)

        info("[DATASET] > {} '{}' record(s) replaced by synthetic images".format(count, label))

    return mixed
