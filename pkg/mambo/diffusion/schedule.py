"""
Noise Schedule Module

Closed-form diffusion math: linear schedule construction, forward noising,
single reverse steps (DDPM ancestral step and deterministic DDIM step).

Schedules are held in 64-bit floats. Planes keep their own precision:
the operations compute in 64 bits and cast back to the input dtype.

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

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from mambo.mmio.errors import ConfigurationError, ContractError

PAPER_TIMESTEPS = 1000
PAPER_BETA_MIN = 1e-4
PAPER_BETA_MAX = 0.02

SIGMA_MODES = ('beta', 'posterior')


@dataclass(frozen=True)
class NoiseSchedule:
    """ Precomputed variance schedule.

    Note
    ----
    All arrays have T + 1 entries so that they can be indexed by the
    timestep directly. Entry 0 encodes the clean endpoint:
    beta[0] = 0, alpha[0] = 1, alpha_bar[0] = 1, sigma[0] = 0.

    Attributes
    ----------
    beta : ndarray
        Variance per step, beta[1..T] in (0, 1).
    alpha : ndarray
        1 - beta.
    alpha_bar : ndarray
        Cumulative product of alpha, alpha_bar[0] = 1.
    sigma : ndarray
        Reverse-step noise scale.
    sigma_mode : str
        'beta' (sigma = sqrt(beta)) or 'posterior' (sigma = sqrt(beta_tilde)).
    """
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    sigma_mode: str = 'beta'
    bounds: tuple[float, float] = field(default=(PAPER_BETA_MIN, PAPER_BETA_MAX))

    @property
    def T(self) -> int:
        return len(self.beta) - 1

    def check_timestep(self, t: int, allow_zero: bool = False) -> None:
        """ Raise a contract error when `t` is outside the schedule.
        """
        low = 0 if allow_zero else 1
        if not low <= t <= self.T:
            raise ContractError("timestep {} outside [{}, {}]".format(t, low, self.T))

    def metadata(self) -> dict:
        """ Description stored in checkpoints and run manifests.
        """
        return {
            'timesteps': self.T,
            'beta_min': self.bounds[0],
            'beta_max': self.bounds[1],
            'sigma': self.sigma_mode,
            'alpha_bar_T': float(self.alpha_bar[-1]),
        }


def build_linear_schedule(T: int, beta_min: float = PAPER_BETA_MIN, beta_max: float = PAPER_BETA_MAX, sigma: str = 'beta') -> NoiseSchedule:
    """ Linear beta schedule.

    Parameters
    ----------
    T : int
        Number of timesteps.
    beta_min : float, optional
        beta[1].
    beta_max : float, optional
        beta[T].
    sigma : str, optional
        Reverse noise scale: 'beta' or 'posterior'.

    Returns
    -------
    NoiseSchedule
        Immutable schedule.

    Raises
    ------
    ConfigurationError
        Invalid bounds, T or sigma mode.
    """
    if T < 1:
        raise ConfigurationError("schedule needs T >= 1, got {}".format(T))
    if not 0 < beta_min <= beta_max < 1:
        raise ConfigurationError("schedule bounds must satisfy 0 < beta_min <= beta_max < 1, got {} and {}".format(beta_min, beta_max))
    if sigma not in SIGMA_MODES:
        raise ConfigurationError("unknown sigma mode '{}' (expected one of {})".format(sigma, ', '.join(SIGMA_MODES)))

    beta = np.concatenate(([0.0], np.linspace(beta_min, beta_max, T, dtype=np.float64)))
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)

    if sigma == 'beta':
        sigma_values = np.sqrt(beta)
    else:
        beta_tilde = np.zeros_like(beta)
        beta_tilde[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
        sigma_values = np.sqrt(beta_tilde)

    for array in (beta, alpha, alpha_bar, sigma_values):
        array.setflags(write=False)

    return NoiseSchedule(beta, alpha, alpha_bar, sigma_values, sigma_mode=sigma, bounds=(float(beta_min), float(beta_max)))


def scaled_bounds(T: int, beta_min: float = PAPER_BETA_MIN, beta_max: float = PAPER_BETA_MAX, reference_T: int = PAPER_TIMESTEPS) -> tuple[float, float]:
    """ Rescale schedule bounds so that a T-step schedule accumulates
        the same total noise as the reference schedule.

    Note
    ----
    sum(beta) is preserved, so alpha_bar[T] approximately matches the
    reference alpha_bar[reference_T]. The desk profile (T = 200) gives
    bounds 5e-4 .. 0.1.

    Raises
    ------
    ConfigurationError
        The rescaled upper bound reaches 1.
    """
    ratio = reference_T / T
    low, high = beta_min * ratio, beta_max * ratio
    if high >= 1:
        raise ConfigurationError("cannot rescale the schedule to T = {}: beta_max would be {}".format(T, high))
    return low, high


def _as_float64(*planes: np.ndarray) -> list[np.ndarray]:
    return [np.asarray(plane, dtype=np.float64) for plane in planes]


def _check_same_shape(first: np.ndarray, second: np.ndarray, what: str) -> None:
    if np.shape(first) != np.shape(second):
        raise ContractError("{}: shape mismatch {} vs {}".format(what, np.shape(first), np.shape(second)))


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """ Sample q(x_t | x_0) with the given noise.

    Note
    ----
    t = 0 is accepted and returns x0 (alpha_bar[0] = 1).

    Parameters
    ----------
    x0 : ndarray
        Clean plane.
    t : int
        Timestep in [0, T].
    eps : ndarray
        Standard normal noise, same shape as x0.
    sched : NoiseSchedule
        Schedule.

    Returns
    -------
    ndarray
        sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps.
    """
    _check_same_shape(x0, eps, "forward_noise")
    sched.check_timestep(t, allow_zero=True)

    x0_64, eps_64 = _as_float64(x0, eps)
    alpha_bar = sched.alpha_bar[t]
    x_t = np.sqrt(alpha_bar) * x0_64 + np.sqrt(1.0 - alpha_bar) * eps_64

    return x_t.astype(np.result_type(x0, eps), copy=False)


def ddpm_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, z: Optional[np.ndarray], sched: NoiseSchedule) -> np.ndarray:
    """ One ancestral reverse step x_t -> x_{t-1}.

    Parameters
    ----------
    x_t : ndarray
        Current plane.
    eps_hat : ndarray
        Predicted noise.
    t : int
        Timestep in [1, T].
    z : ndarray, optional
        Fresh standard normal noise, must be zero (or None) at t = 1.
    sched : NoiseSchedule
        Schedule.

    Returns
    -------
    ndarray
        (x_t - (1 - alpha[t]) / sqrt(1 - alpha_bar[t]) eps_hat) / sqrt(alpha[t]) + sigma[t] z.

    Raises
    ------
    ContractError
        Shape mismatch, timestep out of range or nonzero z at t = 1.
    """
    _check_same_shape(x_t, eps_hat, "ddpm_step")
    sched.check_timestep(t)

    x_64, eps_64 = _as_float64(x_t, eps_hat)
    mean = (x_64 - (1.0 - sched.alpha[t]) / np.sqrt(1.0 - sched.alpha_bar[t]) * eps_64) / np.sqrt(sched.alpha[t])

    if z is not None:
        _check_same_shape(x_t, z, "ddpm_step")
        if t == 1 and np.any(np.asarray(z) != 0):
            raise ContractError("ddpm_step: z must be zero at t = 1")
        mean = mean + sched.sigma[t] * np.asarray(z, dtype=np.float64)

    return mean.astype(np.result_type(x_t, eps_hat), copy=False)


def predict_x0(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """ Clean-plane estimate implied by a noise prediction.
    """
    x_64, eps_64 = _as_float64(x_t, eps_hat)
    return (x_64 - np.sqrt(1.0 - sched.alpha_bar[t]) * eps_64) / np.sqrt(sched.alpha_bar[t])


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """ Deterministic (eta = 0) DDIM step x_t -> x_{t_prev}.

    Parameters
    ----------
    x_t : ndarray
        Current plane.
    eps_hat : ndarray
        Predicted noise.
    t : int
        Current timestep in [1, T].
    t_prev : int
        Target timestep in [0, t).
    sched : NoiseSchedule
        Schedule.

    Returns
    -------
    ndarray
        sqrt(alpha_bar[t_prev]) x0_hat + sqrt(1 - alpha_bar[t_prev]) eps_hat.

    Raises
    ------
    ContractError
        t_prev >= t, timesteps out of range or shape mismatch.
    """
    _check_same_shape(x_t, eps_hat, "ddim_step")
    sched.check_timestep(t)
    sched.check_timestep(t_prev, allow_zero=True)
    if t_prev >= t:
        raise ContractError("ddim_step: t_prev = {} must be smaller than t = {}".format(t_prev, t))

    x0_hat = predict_x0(x_t, eps_hat, t, sched)
    if t_prev == 0:
        return x0_hat.astype(np.result_type(x_t, eps_hat), copy=False)

    alpha_bar_prev = sched.alpha_bar[t_prev]
    x_prev = np.sqrt(alpha_bar_prev) * x0_hat + np.sqrt(1.0 - alpha_bar_prev) * np.asarray(eps_hat, dtype=np.float64)

    return x_prev.astype(np.result_type(x_t, eps_hat), copy=False)


def ddim_timesteps(T: int, n_steps: int) -> list[int]:
    """ Uniform decreasing subsequence of n_steps timesteps from T down to 1.

    Note
    ----
    Timesteps are round(linspace(T, 1, n_steps)); T = 1000 with 150 steps
    starts 1000, 993, 987, ... and ends at 1.

    Raises
    ------
    ConfigurationError
        n_steps outside [1, T].
    """
    if not 1 <= n_steps <= T:
        raise ConfigurationError("DDIM needs 1 <= steps <= T, got {} steps for T = {}".format(n_steps, T))
    if n_steps == 1:
        return [T]
    return [int(value) for value in np.round(np.linspace(T, 1, n_steps))]
