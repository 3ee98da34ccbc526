"""
Image Input/Output Module

Input: 8- or 16-bit single-channel PGM (binary P5) and PNG grayscale.
Output: planes as 16-bit PNG, masks as P5 PGM with values {0, 255}.

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

from logging import info
from pathlib import Path

import numpy as np
from PIL import Image

from mambo.mmio.errors import ContractError, DegenerateInputError

EIGHT_BIT_MODES = ('L', 'P', '1')
SIXTEEN_BIT_MODES = ('I', 'I;16', 'I;16B', 'I;16L')


def read_plane(path: str | Path) -> np.ndarray:
    """ Read a grayscale image as a 32-bit plane.

    Note
    ----
    8-bit values are divided by 255, 16-bit values by 65535.

    Parameters
    ----------
    path : str or Path
        PGM or PNG file.

    Returns
    -------
    ndarray
        Plane of float32 values.

    Raises
    ------
    ContractError
        Unreadable file or multi-channel image.
    """
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in EIGHT_BIT_MODES:
                plane = np.asarray(img.convert('L'), dtype=np.float64) / 255.0
            elif mode in SIXTEEN_BIT_MODES:
                plane = np.asarray(img, dtype=np.float64) / 65535.0
            else:
                raise ContractError("{}: unsupported image mode '{}' (single-channel grayscale expected)".format(path, mode))
    except (OSError, ValueError) as error:
        raise ContractError("{}: cannot read image ({})".format(path, error))

    if plane.size == 0:
        raise DegenerateInputError("{}: empty image".format(path))

    info("[IO] > read {} ({}x{}, mode {})".format(path, plane.shape[0], plane.shape[1], mode))
    return plane.astype(np.float32)


def write_plane(path: str | Path, plane: np.ndarray, bits: int = 16) -> None:
    """ Write a plane with values in [0, 1] as an 8- or 16-bit grayscale image.

    Note
    ----
    Values are clamped to [0, 1] and rounded to the nearest level.
    """
    clamped = np.clip(np.asarray(plane, dtype=np.float64), 0.0, 1.0)

    if bits == 8:
        img = Image.fromarray(np.round(clamped * 255.0).astype(np.uint8))
    elif bits == 16:
        img = Image.fromarray(np.round(clamped * 65535.0).astype(np.uint16))
    else:
        raise ContractError("unsupported bit depth {}".format(bits))

    img.save(path)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """ Write a binary mask with values {0, 255}.
    """
    img = Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))
    img.save(path)


def read_mask(path: str | Path) -> np.ndarray:
    """ Read a binary mask (any nonzero pixel is set).
    """
    return read_plane(path) > 0
