"""
Abstract Noise Predictor

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

from abc import ABC, abstractmethod
from typing import Sequence

import numpy as np
import torch

from mambo.mmio.errors import ConfigurationError, ContractError


def stack_channels(channels: Sequence[np.ndarray]) -> np.ndarray:
    """ Build a ChannelStack (C x s x s) from 1 to 3 planes.

    Note
    ----
    Channel 1 is the noisy data plane, channel 2 the local context
    (or shifted global context at stage 2), channel 3 the global context.

    Raises
    ------
    ContractError
        Wrong channel count or planes of different shapes.
    """
    if not 1 <= len(channels) <= 3:
        raise ContractError("a channel stack holds 1 to 3 planes, got {}".format(len(channels)))

    shape = np.shape(channels[0])
    for plane in channels[1:]:
        if np.shape(plane) != shape:
            raise ContractError("channel shapes differ: {} vs {}".format(shape, np.shape(plane)))

    return np.stack([np.asarray(plane) for plane in channels])


class NoisePredictor(ABC):
    """ Noise predictor epsilon_theta(x_t, t).

    Note
    ----
    Subclasses implement `forward` on torch tensors: training backpropagates
    through it, sampling goes through `predict_batch` without gradients.

    Attributes
    ----------
    arity : int
        Number of input channels (1 at stage 1, 2 or 3 at stages 2-3).
    dtype : torch.dtype
        Precision of the computation.
    """

    arity: int = 1
    dtype: torch.dtype = torch.float32

    @abstractmethod
    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """ Predict the noise of channel 1.

        Parameters
        ----------
        x : Tensor
            Batch of channel stacks, shape (B, arity, s, s).
        t : Tensor
            Timesteps, shape (B,).

        Returns
        -------
        Tensor
            Predicted noise, shape (B, 1, s, s).
        """
        pass

    def parameters(self) -> list[torch.nn.Parameter]:
        """ Trainable parameters (empty for analytic predictors).
        """
        return []

    def check_arity(self, channels: int) -> None:
        if channels != self.arity:
            raise ConfigurationError("predictor expects {} channel(s), got {}".format(self.arity, channels))

    def predict_batch(self, stacks: np.ndarray, t: int) -> np.ndarray:
        """ Predict the noise for a batch of stacks at a common timestep.

        Parameters
        ----------
        stacks : ndarray
            Shape (B, arity, s, s).
        t : int
            Timestep.

        Returns
        -------
        ndarray
            Shape (B, s, s).
        """
        self.check_arity(stacks.shape[1])

        x = torch.as_tensor(np.ascontiguousarray(stacks), dtype=self.dtype)
        timesteps = torch.full((stacks.shape[0],), int(t), dtype=torch.long)

        with torch.no_grad():
            eps_hat = self.forward(x, timesteps)

        return eps_hat[:, 0].numpy()

    def predict(self, stack: np.ndarray, t: int) -> np.ndarray:
        """ Predict the noise of a single channel stack (C x s x s).
        """
        return self.predict_batch(np.asarray(stack)[None], t)[0]

    def parameter_count(self) -> int:
        return sum(parameter.numel() for parameter in self.parameters())
