"""
Analytic Gaussian Predictor

Exact minimum mean-square error noise predictor for Gaussian data,
used as a training-free oracle.

Data model: x0 = mu + c + e, with e ~ N(0, var0) independent per pixel
and c ~ N(0, shared_var) one offset shared by the whole plane.
shared_var = 0 is the pixelwise-independent model.

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

import numpy as np
import torch

from mambo.diffusion.schedule import NoiseSchedule
from mambo.mmio.errors import ContractError
from mambo.models.predictor import NoisePredictor


class AnalyticGaussianPredictor(NoisePredictor):
    """ Gaussian posterior-mean noise predictor.

    Note
    ----
    Channels 2-3 are accepted (to match the arity of a stage) and ignored.

    Attributes
    ----------
    mu : Tensor
        Prior mean plane.
    var0 : Tensor
        Pixelwise prior variance plane.
    shared_var : float
        Variance of the plane-wide offset.
    sched : NoiseSchedule
        Schedule used to interpret t.
    """

    dtype = torch.float64

    def __init__(self, mu: np.ndarray, var0: np.ndarray, sched: NoiseSchedule, arity: int = 1, shared_var: float = 0.0) -> None:
        """ Initializer.

        Raises
        ------
        ContractError
            Negative variances or mismatched shapes.
        """
        mu = np.asarray(mu, dtype=np.float64)
        var0 = np.broadcast_to(np.asarray(var0, dtype=np.float64), mu.shape)

        if np.any(var0 < 0) or shared_var < 0:
            raise ContractError("prior variances must be non-negative")

        self.mu: torch.Tensor = torch.from_numpy(mu.copy())
        self.var0: torch.Tensor = torch.from_numpy(np.array(var0))
        self.shared_var: float = float(shared_var)
        self.sched: NoiseSchedule = sched
        self.arity = arity

    def posterior_mean(self, x: torch.Tensor, t: int) -> torch.Tensor:
        """ E[x0 | x_t = x] for a batch of noisy planes (B, s, s).
        """
        a = float(np.sqrt(self.sched.alpha_bar[t]))
        b2 = float(1.0 - self.sched.alpha_bar[t])

        residual = x - a * self.mu
        noise_var = a * a * self.var0 + b2

        x0_hat = self.mu.expand_as(x).clone()
        if self.shared_var > 0:
            # Offset shared by every pixel, then per-pixel correction given the offset
            precision = (a * a / noise_var).sum()
            c_hat = a * self.shared_var * (residual / noise_var).sum(dim=(-2, -1)) / (1.0 + self.shared_var * precision)
            c_hat = c_hat[:, None, None]
            x0_hat = x0_hat + c_hat
            residual = residual - a * c_hat

        return x0_hat + a * self.var0 * residual / noise_var

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        timesteps = [int(value) for value in t]
        if len(set(timesteps)) == 1:
            return self._predict(x[:, 0].to(torch.float64), timesteps[0])[:, None]
        return torch.cat([self._predict(x[i:i + 1, 0].to(torch.float64), step) for i, step in enumerate(timesteps)])[:, None]

    def _predict(self, x1: torch.Tensor, t: int) -> torch.Tensor:
        if self.sched.alpha_bar[t] >= 1.0:
            raise ContractError("analytic predictor undefined at t = {} (no noise)".format(t))

        a = float(np.sqrt(self.sched.alpha_bar[t]))
        b = float(np.sqrt(1.0 - self.sched.alpha_bar[t]))

        return (x1 - a * self.posterior_mean(x1, t)) / b


def analytic_gaussian_predictor(mu: np.ndarray, var0: np.ndarray, sched: NoiseSchedule, arity: int = 1, shared_var: float = 0.0) -> AnalyticGaussianPredictor:
    """ Exact MMSE predictor for data ~ N(mu, var0) per pixel
        (plus an optional plane-wide offset of variance `shared_var`).
    """
    return AnalyticGaussianPredictor(mu, var0, sched, arity=arity, shared_var=shared_var)
