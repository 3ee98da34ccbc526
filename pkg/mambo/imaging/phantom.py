"""
Synthetic Phantoms

Structured test images: striped planes for the training signal, breast-like
blobs on a black background, and blob + disc lesion phantoms for anomaly
segmentation.

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

import numpy as np
from scipy import ndimage

from mambo.exec.utils import rng_for


def striped_phantom(side: int, seed: int) -> np.ndarray:
    """ Oriented sinusoidal stripes in [0, 1] with a random period and phase.
    """
    rng = rng_for(seed)
    angle = rng.uniform(0, np.pi)
    period = rng.uniform(side / 8, side / 3)
    phase = rng.uniform(0, 2 * np.pi)

    rows, cols = np.mgrid[0:side, 0:side]
    projection = rows * np.sin(angle) + cols * np.cos(angle)
    return (0.5 + 0.5 * np.sin(2 * np.pi * projection / period + phase)).astype(np.float32)


def breast_region(side: int, seed: int) -> np.ndarray:
    """ Half ellipse attached to the left edge.
    """
    rng = rng_for(seed, 0)
    semi_rows = side * rng.uniform(0.35, 0.45)
    semi_cols = side * rng.uniform(0.55, 0.75)
    rows, cols = np.mgrid[0:side, 0:side]
    return ((rows - (side - 1) / 2) / semi_rows) ** 2 + (cols / semi_cols) ** 2 <= 1.0


def breast_phantom(side: int, seed: int) -> np.ndarray:
    """ Smooth textured blob on the left, background exactly 0, maximum exactly 1.
    """
    region = breast_region(side, seed)
    texture = ndimage.gaussian_filter(rng_for(seed, 1).standard_normal((side, side)), sigma=side / 16)
    texture = (texture - texture.min()) / max(np.ptp(texture), 1e-12)

    plane = np.where(region, 0.3 + 0.7 * texture, 0.0)
    return (plane / plane.max()).astype(np.float32)


@dataclass
class LesionPhantom:
    """ Blob background with one bright disc.

    Attributes
    ----------
    image : ndarray
        Background plus lesion.
    background : ndarray
        Lesion-free image (what a perfect healthy model reconstructs).
    lesion : ndarray
        Boolean ground-truth lesion mask.
    breast : ndarray
        Boolean breast region.
    """
    image: np.ndarray
    background: np.ndarray
    lesion: np.ndarray
    breast: np.ndarray


def lesion_phantom(side: int, radius: float, seed: int, contrast: float = 0.35) -> LesionPhantom:
    """ Smooth blob background with a bright disc of the given radius
        placed well inside the breast.
    """
    breast = breast_region(side, seed)
    smooth = ndimage.gaussian_filter(rng_for(seed, 2).standard_normal((side, side)), sigma=side / 8)
    smooth = (smooth - smooth.min()) / max(np.ptp(smooth), 1e-12)
    background = np.where(breast, 0.2 + 0.4 * smooth, 0.0)

    # Disc center inside the breast, at least radius + 2 px from its edge
    interior = ndimage.distance_transform_edt(breast) > radius + 2
    candidates = np.argwhere(interior)
    row, col = candidates[rng_for(seed, 3).integers(len(candidates))]

    rows, cols = np.mgrid[0:side, 0:side]
    lesion = (rows - row) ** 2 + (cols - col) ** 2 <= radius ** 2

    image = background + contrast * lesion
    return LesionPhantom(image.astype(np.float32), background.astype(np.float32), lesion, breast)
