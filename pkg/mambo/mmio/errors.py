"""
Errors Module

Error categories and the exception hierarchy shared by every module.
The command-line front-end maps each category to an exit code.

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

from enum import Enum
from typing import Optional


class ErrorCategory(Enum):
    """ Error category enum.

        Note
        ----
        The value is the process exit code.
        CONFIG -> invalid configuration, geometry or checkpoint
        DATA -> invalid or degenerate input data
        NUMERIC -> numeric failure during a diffusion trajectory
    """
    CONFIG = 2
    DATA = 3
    NUMERIC = 4

    @property
    def label(self) -> str:
        return self.name.lower()


class MamboError(Exception):
    """ Base class of all the errors raised on purpose.
    """

    category: ErrorCategory = ErrorCategory.DATA

    def line(self) -> str:
        """ Single-line, machine-readable rendering for stderr.
        """
        message = ' '.join(str(self).split())
        return "error: {}: {}".format(self.category.label, message)


class ConfigurationError(MamboError):
    """ Invalid bounds, geometry, predictor arity or incompatible checkpoint.
    """
    category = ErrorCategory.CONFIG


class ContractError(MamboError):
    """ Shape mismatch, timestep out of range or unsupported request.
    """
    category = ErrorCategory.DATA


class DegenerateInputError(MamboError):
    """ Constant image, too few distinct values, zero-variance vector.
    """
    category = ErrorCategory.DATA


class EmptyMaskError(MamboError):
    """ A mask that must contain pixels is empty.
    """
    category = ErrorCategory.DATA


class NumericFailure(MamboError):
    """ NaN or infinity detected during a diffusion trajectory.

    Attributes
    ----------
    step : int, optional
        Timestep at which the failure was detected.
    """
    category = ErrorCategory.NUMERIC

    def __init__(self, message: str, step: Optional[int] = None) -> None:
        super().__init__(message if step is None else "{} (step {})".format(message, step))
        self.step: Optional[int] = step
