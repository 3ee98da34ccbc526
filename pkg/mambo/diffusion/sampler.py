"""
Sampler Module

Reverse-process driver for 1- to 3-channel predictors, patch-grid planning
and known-region overlap conditioning.

Trajectories are held in 64-bit floats and emitted as 32-bit planes.

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
from typing import Callable, Optional, Sequence

import numpy as np
from tqdm import tqdm

from mambo.diffusion.schedule import NoiseSchedule, ddim_step, ddim_timesteps, ddpm_step, forward_noise
from mambo.exec.utils import derive_seed, is_verbose, rng_for
from mambo.mmio.errors import ConfigurationError, ContractError, NumericFailure
from mambo.models.predictor import NoisePredictor

Position = tuple[int, int]
StepCallback = Callable[[int, np.ndarray], None]


@dataclass(frozen=True)
class SamplerPlan:
    """ Reverse-step plan.

    Attributes
    ----------
    kind : str
        'ddpm' (every timestep, ancestral) or 'ddim' (deterministic subsequence).
    steps : int
        Number of DDIM steps (0 for DDPM).
    """
    kind: str = 'ddpm'
    steps: int = 0

    @classmethod
    def parse(cls, text: str) -> SamplerPlan:
        """ Parse "ddpm" or "ddim:<n_steps>".
        """
        text = text.strip().lower()
        if text == 'ddpm':
            return cls('ddpm', 0)

        kind, _, steps = text.partition(':')
        if kind != 'ddim' or not steps.isdigit() or int(steps) < 1:
            raise ConfigurationError("invalid sampler plan '{}' (expected 'ddpm' or 'ddim:<n_steps>')".format(text))

        return cls('ddim', int(steps))

    def __str__(self) -> str:
        return self.kind if self.kind == 'ddpm' else "ddim:{}".format(self.steps)

    def transitions(self, t_start: int) -> list[tuple[int, int]]:
        """ (t, t_prev) pairs from t_start down to 0.
        """
        if t_start < 1:
            return []
        if self.kind == 'ddpm':
            return [(t, t - 1) for t in range(t_start, 0, -1)]

        timesteps = ddim_timesteps(t_start, min(self.steps, t_start))
        return list(zip(timesteps, timesteps[1:] + [0]))


@dataclass
class KnownRegion:
    """ Pixels of a patch already generated by its neighbours.

    Attributes
    ----------
    mask : ndarray
        Boolean s x s plane.
    values : ndarray
        Known values, defined where mask is set.
    """
    mask: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.mask.shape != self.values.shape:
            raise ContractError("known region: mask {} and values {} differ in shape".format(self.mask.shape, self.values.shape))


@dataclass(frozen=True)
class PatchGrid:
    """ Row-major patch positions over a square plane.

    Attributes
    ----------
    offsets : tuple of int
        Offsets along one axis (the same for rows and columns).
    stride : int
        s - overlap.
    overlap : int
        Overlap in pixels.
    plane_side : int
        Side of the target plane.
    s : int
        Patch side.
    """
    offsets: tuple[int, ...]
    stride: int
    overlap: int
    plane_side: int
    s: int

    @property
    def positions(self) -> list[Position]:
        return [(row, col) for row in self.offsets for col in self.offsets]

    def __len__(self) -> int:
        return len(self.offsets) ** 2


def plan_patch_grid(plane_side: int, s: int, overlap: int) -> PatchGrid:
    """ Patch grid with stride s - overlap, last offset clamped to plane_side - s.

    Note
    ----
    plane_side = 96, s = 32, overlap = 4 gives offsets 0, 28, 56, 64.

    Raises
    ------
    ConfigurationError
        overlap outside [0, s) or s larger than the plane.
    """
    if not 0 <= overlap < s:
        raise ConfigurationError("overlap {} must lie in [0, s = {})".format(overlap, s))
    if s > plane_side:
        raise ConfigurationError("patch side {} exceeds the plane side {}".format(s, plane_side))

    stride = s - overlap
    count = -(-(plane_side - s) // stride) + 1
    offsets = tuple(min(i * stride, plane_side - s) for i in range(count))

    return PatchGrid(offsets, stride, overlap, plane_side, s)


def _check_finite(x: np.ndarray, t: int) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericFailure("non-finite values in the trajectory", step=t)


def _stack(x: np.ndarray, cond: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([x] + [np.asarray(c, dtype=np.float64) for c in cond])


def denoise_from(net: NoisePredictor, x_t: np.ndarray, t_start: int, cond: Sequence[np.ndarray], sched: NoiseSchedule, plan: SamplerPlan, seed: int, known: Optional[KnownRegion] = None, callback: Optional[StepCallback] = None) -> np.ndarray:
    """ Run the reverse loop from timestep t_start down to 0.

    Note
    ----
    When `known` is given, the masked pixels are overwritten after every
    step with forward_noise(values, t_prev, fresh noise); alpha_bar[0] = 1
    makes them equal to the known values at the end.

    Parameters
    ----------
    net : NoisePredictor
        Noise predictor of arity len(cond) + 1.
    x_t : ndarray
        Starting plane at level t_start.
    t_start : int
        Starting timestep in [0, T] (0 returns x_t).
    cond : list of ndarray
        Conditioning planes, held constant.
    sched : NoiseSchedule
        Schedule.
    plan : SamplerPlan
        DDPM or DDIM steps.
    seed : int
        Seed of the fresh noise.
    known : KnownRegion, optional
        Pixels to condition on.
    callback : callable, optional
        Called with (t, stack) before every prediction.

    Returns
    -------
    ndarray
        Plane at level 0 (float32).

    Raises
    ------
    ConfigurationError
        Arity mismatch.
    NumericFailure
        Non-finite values.
    """
    net.check_arity(len(cond) + 1)
    sched.check_timestep(t_start, allow_zero=True)
    for plane in cond:
        if np.shape(plane) != np.shape(x_t):
            raise ContractError("conditioning plane {} does not match the data plane {}".format(np.shape(plane), np.shape(x_t)))

    rng = rng_for(seed, 1)
    x = np.array(x_t, dtype=np.float64)

    transitions = plan.transitions(t_start)
    for t, t_prev in tqdm(transitions, desc="sampling", leave=False, disable=not is_verbose() or len(transitions) < 2):
        stack = _stack(x, cond)
        if callback is not None:
            callback(t, stack)

        eps_hat = net.predict(stack, t).astype(np.float64)

        if plan.kind == 'ddpm':
            z = rng.standard_normal(x.shape) if t > 1 else None
            x = ddpm_step(x, eps_hat, t, z, sched)
        else:
            x = ddim_step(x, eps_hat, t, t_prev, sched)

        if known is not None:
            renoised = forward_noise(np.asarray(known.values, dtype=np.float64), t_prev, rng.standard_normal(x.shape), sched)
            x = np.where(known.mask, renoised, x)

        _check_finite(x, t)

    return x.astype(np.float32)


def sample(net: NoisePredictor, cond: Sequence[np.ndarray], sched: NoiseSchedule, plan: SamplerPlan, known: Optional[KnownRegion] = None, seed: int = 0, side: Optional[int] = None, callback: Optional[StepCallback] = None) -> np.ndarray:
    """ Sample one plane with channel conditioning.

    Note
    ----
    Channel 1 starts from seeded standard normal noise (known pixels
    noised to level T). The conditioning channels are never modified.

    Parameters
    ----------
    net : NoisePredictor
        Predictor of arity len(cond) + 1.
    cond : list of ndarray
        Conditioning planes (empty for unconditional sampling).
    sched : NoiseSchedule
        Schedule.
    plan : SamplerPlan
        DDPM or DDIM steps.
    known : KnownRegion, optional
        Already generated pixels.
    seed : int, optional
        Seed.
    side : int, optional
        Plane side, required without conditioning.
    callback : callable, optional
        Called with (t, stack) before every prediction.

    Returns
    -------
    ndarray
        Sampled plane (float32).
    """
    if cond:
        shape = np.shape(cond[0])
    elif side is not None:
        shape = (side, side)
    else:
        raise ContractError("unconditional sampling needs a plane side")

    rng = rng_for(seed, 0)
    x_T = rng.standard_normal(shape)
    if known is not None:
        x_T = np.where(known.mask, forward_noise(np.asarray(known.values, dtype=np.float64), sched.T, rng.standard_normal(shape), sched), x_T)

    return denoise_from(net, x_T, sched.T, cond, sched, plan, seed, known=known, callback=callback)


def sample_many(net: NoisePredictor, count: int, side: int, sched: NoiseSchedule, plan: SamplerPlan, seed: int, cond: Sequence[np.ndarray] = ()) -> np.ndarray:
    """ Sample `count` independent planes sharing the same conditioning,
        batched through the predictor.

    Returns
    -------
    ndarray
        Shape (count, side, side), float32.
    """
    net.check_arity(len(cond) + 1)

    rng = rng_for(seed, 2)
    x = rng.standard_normal((count, side, side))
    cond_batch = np.broadcast_to(np.stack([np.asarray(c, dtype=np.float64) for c in cond]), (count, len(cond), side, side)) if cond else None

    for t, t_prev in plan.transitions(sched.T):
        stacks = x[:, None] if cond_batch is None else np.concatenate((x[:, None], cond_batch), axis=1)
        eps_hat = net.predict_batch(stacks, t).astype(np.float64)

        if plan.kind == 'ddpm':
            z = rng.standard_normal(x.shape) if t > 1 else None
            x = ddpm_step(x, eps_hat, t, z, sched)
        else:
            x = ddim_step(x, eps_hat, t, t_prev, sched)

        _check_finite(x, t)

    return x.astype(np.float32)


ConditioningProvider = Callable[[int, Position], Sequence[np.ndarray]]


def generate_plane(net: NoisePredictor, provider: ConditioningProvider, grid: PatchGrid, sched: NoiseSchedule, plan: SamplerPlan, seed: int, callback: Optional[Callable[[int, Position, int, np.ndarray], None]] = None) -> np.ndarray:
    """ Generate a plane patch by patch in row-major order.

    Note
    ----
    Every patch after the first is conditioned on the intersection of its
    window with the pixels already written, so that overlaps are rewritten
    with identical values.

    Parameters
    ----------
    net : NoisePredictor
        Patch predictor.
    provider : callable
        (patch index, (row, col)) -> conditioning planes.
    grid : PatchGrid
        Patch positions.
    sched : NoiseSchedule
        Schedule.
    plan : SamplerPlan
        DDPM or DDIM steps.
    seed : int
        Plane seed, patch i uses a seed derived from (seed, i).
    callback : callable, optional
        Called with (patch index, position, t, stack) before every prediction.

    Returns
    -------
    ndarray
        Plane of side grid.plane_side (float32).
    """
    s = grid.s
    plane = np.zeros((grid.plane_side, grid.plane_side), dtype=np.float32)
    written = np.zeros_like(plane, dtype=bool)

    info("[SAMPLER] > {} patch(es) of {}x{} px, overlap {}".format(len(grid), s, s, grid.overlap))

    for index, (row, col) in enumerate(tqdm(grid.positions, desc="patches", leave=False, disable=not is_verbose())):
        window = (slice(row, row + s), slice(col, col + s))

        known = None
        if written[window].any():
            known = KnownRegion(written[window].copy(), plane[window].copy())

        observer = None
        if callback is not None:
            def observer(t: int, stack: np.ndarray, index: int = index, position: Position = (row, col)) -> None:
                callback(index, position, t, stack)

        plane[window] = sample(net, list(provider(index, (row, col))), sched, plan, known=known, seed=derive_seed(seed, index), side=s, callback=observer)
        written[window] = True

    return plane
