"""
Preprocessing Module

Conditioning of raw grayscale mammograms into training-ready planes:
normalization, orientation, breast tissue masks and padding.

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
from typing import Optional

import numpy as np
from scipy import ndimage

from mambo.mmio.errors import DegenerateInputError, EmptyMaskError

HISTOGRAM_BINS = 256
OTSU_FACTOR = 0.175
REFERENCE_SIDE = 3328
REFERENCE_EROSION = 20

FOUR_CONNECTIVITY = ndimage.generate_binary_structure(2, 1)


@dataclass
class BreastMask:
    """ Binary segmentation of the breast.

    Attributes
    ----------
    mask : ndarray
        Boolean plane, a single 4-connected component.
    area_px : int
        Number of set pixels.
    bbox : tuple of int
        Tight bounding box (top, left, height, width).
    """
    mask: np.ndarray
    area_px: int
    bbox: tuple[int, int, int, int]

    @classmethod
    def from_array(cls, mask: np.ndarray) -> BreastMask:
        mask = np.asarray(mask, dtype=bool)
        rows, cols = np.nonzero(mask)
        if rows.size == 0:
            return cls(mask, 0, (0, 0, 0, 0))
        top, left = int(rows.min()), int(cols.min())
        return cls(mask, int(rows.size), (top, left, int(rows.max()) - top + 1, int(cols.max()) - left + 1))


@dataclass
class OrientedImage:
    """ Normalized, oriented plane.

    Attributes
    ----------
    plane : ndarray
        Values in [0, 1], breast on the left, background 0.
    was_inverted : bool
        White-background image inverted.
    was_flipped : bool
        Image mirrored horizontally.
    pad : tuple of int
        Zero padding applied per side (top, bottom, left, right).
    """
    plane: np.ndarray
    was_inverted: bool = False
    was_flipped: bool = False
    pad: tuple[int, int, int, int] = (0, 0, 0, 0)

    def record(self) -> dict:
        return {'inverted': self.was_inverted, 'flipped': self.was_flipped, 'pad': list(self.pad), 'shape': list(self.plane.shape)}


def border_pixels(plane: np.ndarray) -> np.ndarray:
    """ Values of the outermost ring of pixels.
    """
    if min(plane.shape) < 3:
        return plane.ravel()
    return np.concatenate((plane[0, :], plane[-1, :], plane[1:-1, 0], plane[1:-1, -1]))


def otsu_threshold(p: np.ndarray) -> float:
    """ Otsu threshold on a 256-bin histogram over [0, 1].

    Note
    ----
    Candidate thresholds are the bin boundaries k / 256 (k = 1..255),
    class 1 holding the bins >= k. Bin centers stand for the values.
    Ties go to the smallest k.

    Parameters
    ----------
    p : ndarray
        Plane with values in [0, 1].

    Returns
    -------
    float
        Threshold maximizing the between-class variance.

    Raises
    ------
    DegenerateInputError
        Fewer than two distinct values.
    """
    values = np.asarray(p, dtype=np.float64).ravel()
    if np.unique(values).size < 2:
        raise DegenerateInputError("Otsu threshold needs at least two distinct values")

    bins = np.clip(np.floor(values * HISTOGRAM_BINS), 0, HISTOGRAM_BINS - 1).astype(np.int64)
    hist = np.bincount(bins, minlength=HISTOGRAM_BINS).astype(np.float64)
    centers = (np.arange(HISTOGRAM_BINS) + 0.5) / HISTOGRAM_BINS

    total = hist.sum()
    weight0 = np.cumsum(hist)[:-1] / total
    weight1 = 1.0 - weight0
    moment0 = np.cumsum(hist * centers)[:-1] / total
    mean_total = (hist * centers).sum() / total

    with np.errstate(divide='ignore', invalid='ignore'):
        mean0 = moment0 / weight0
        mean1 = (mean_total - moment0) / weight1
        between = weight0 * weight1 * (mean0 - mean1) ** 2
    between = np.where((weight0 > 0) & (weight1 > 0), between, 0.0)

    k = int(np.argmax(between)) + 1
    return k / HISTOGRAM_BINS


def blur_kernel_side(side: int) -> int:
    """ round(side / 50), forced odd.
    """
    kernel = max(1, int(round(side / 50)))
    return kernel if kernel % 2 else kernel + 1


def gaussian_blur(p: np.ndarray, kernel: int) -> np.ndarray:
    """ Separable Gaussian blur, sigma = kernel / 6, edge replication.
    """
    if kernel <= 1:
        return np.asarray(p, dtype=np.float64).copy()

    sigma = kernel / 6.0
    offsets = np.arange(kernel) - kernel // 2
    weights = np.exp(-offsets ** 2 / (2.0 * sigma ** 2))
    weights /= weights.sum()

    blurred = ndimage.correlate1d(np.asarray(p, dtype=np.float64), weights, axis=0, mode='nearest')
    return ndimage.correlate1d(blurred, weights, axis=1, mode='nearest')


def largest_component(binary: np.ndarray) -> np.ndarray:
    """ Largest 4-connected component, ties broken by the topmost-leftmost box.
    """
    labels, count = ndimage.label(binary, structure=FOUR_CONNECTIVITY)
    if count == 0:
        return np.zeros_like(binary, dtype=bool)

    sizes = np.bincount(labels.ravel())[1:]
    boxes = ndimage.find_objects(labels)
    best = max(range(count), key=lambda i: (sizes[i], -boxes[i][0].start, -boxes[i][1].start))

    return labels == best + 1


def tissue_mask(p: np.ndarray) -> np.ndarray:
    """ Blur, binarize at 0.175 x Otsu, keep the largest blob.

    Raises
    ------
    EmptyMaskError
        No tissue (blank plane).
    """
    blurred = gaussian_blur(p, blur_kernel_side(max(np.shape(p))))
    if np.ptp(blurred) == 0:
        raise EmptyMaskError("no tissue found in a blank image")

    threshold = OTSU_FACTOR * otsu_threshold(blurred)
    return largest_component(blurred > threshold)


def is_clean(p: np.ndarray) -> bool:
    """ Background already zeroed: at least half of the border is 0 and
        the nonzero pixels form a single 4-connected component.
    """
    border = border_pixels(p)
    if np.count_nonzero(border == 0) * 2 < border.size:
        return False
    _, count = ndimage.label(p != 0, structure=FOUR_CONNECTIVITY)
    return count == 1


def float32_grid(p: np.ndarray) -> np.ndarray:
    """ Round float64 values to the nearest float32 ones.
    """
    return np.asarray(p, dtype=np.float32).astype(np.float64)


def zero_background(p: np.ndarray) -> np.ndarray:
    """ Zero everything outside the tissue mask and rescale to a peak of 1,
        repeated until the plane is clean or no longer changes.

    Note
    ----
    The input has a maximum of exactly 1. A pass that keeps every nonzero
    pixel keeps the peak, so it returns its input: each other pass strictly
    shrinks the nonzero support, hence the loop ends.

    Raises
    ------
    EmptyMaskError
        The tissue mask holds no nonzero pixel.
    """
    while not is_clean(p):
        masked = np.where(tissue_mask(p), p, 0.0)
        peak = masked.max()
        if peak <= 0:
            raise EmptyMaskError("tissue mask covers no nonzero pixel")

        rescaled = float32_grid(masked / peak)
        if np.array_equal(rescaled, p):
            break
        p = rescaled

    return p


def normalize_and_orient(raw: np.ndarray) -> OrientedImage:
    """ Min-max normalize, fix inverted images, zero the background and put
        the breast on the left.

    Note
    ----
    Values are kept on the float32 grid and the output has minimum 0 and
    maximum 1, so a second pass normalizes to the same values and finds a
    plane that `zero_background` leaves unchanged: the operation is
    idempotent.

    Parameters
    ----------
    raw : ndarray
        Raw grayscale plane.

    Returns
    -------
    OrientedImage
        Plane in [0, 1].

    Raises
    ------
    DegenerateInputError
        Empty, non-finite or constant image.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0 or not np.all(np.isfinite(raw)):
        raise DegenerateInputError("image is empty or holds non-finite values")

    low, high = raw.min(), raw.max()
    if low == high:
        raise DegenerateInputError("constant image (value {})".format(low))

    p = (raw - low) / (high - low)

    was_inverted = bool(border_pixels(p).mean() > 0.5)
    if was_inverted:
        p = 1.0 - p

    p = zero_background(float32_grid(p))
    mask = tissue_mask(p)

    # Column-weighted mass of the tissue mask
    width = p.shape[1]
    left, right = np.count_nonzero(mask[:, :width // 2]), np.count_nonzero(mask[:, (width + 1) // 2:])
    was_flipped = bool(right > left)
    if was_flipped:
        p = np.fliplr(p)

    info("[PREPROCESS] > inverted: {}, flipped: {}".format(was_inverted, was_flipped))
    return OrientedImage(np.ascontiguousarray(p, dtype=np.float32), was_inverted, was_flipped)


def erosion_side(side: int) -> int:
    """ Side of the square erosion element, scaled from 20 px at 3328 px.
    """
    return max(3, int(round(REFERENCE_EROSION * side / REFERENCE_SIDE)))


def breast_mask(img: OrientedImage, erosion: Optional[int] = None) -> BreastMask:
    """ Breast segmentation.

    Parameters
    ----------
    img : OrientedImage
        Oriented plane.
    erosion : int, optional
        Side of the square erosion element (default scaled to the image side).

    Returns
    -------
    BreastMask
        Eroded largest blob.

    Raises
    ------
    EmptyMaskError
        Nothing left after erosion.
    """
    plane = img.plane
    blob = tissue_mask(plane)

    element = erosion_side(max(plane.shape)) if erosion is None else erosion
    eroded = ndimage.binary_erosion(blob, structure=np.ones((element, element), dtype=bool), border_value=1)
    eroded = largest_component(eroded)

    if not eroded.any():
        raise EmptyMaskError("breast mask is empty after a {0}x{0} erosion".format(element))

    result = BreastMask.from_array(eroded)
    info("[PREPROCESS] > mask area {} px, bbox {}".format(result.area_px, result.bbox))
    return result


def pad_plane(plane: np.ndarray, s: int) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """ Zero padding of a plane, see `pad_to_multiple`.
    """
    height, width = plane.shape
    target_h, target_w = -(-height // s) * s, -(-width // s) * s

    top, bottom, left, right = 0, target_h - height, 0, target_w - width
    if target_h < target_w:
        top += (target_w - target_h) // 2
        bottom += (target_w - target_h) - (target_w - target_h) // 2
    elif target_w < target_h:
        left += (target_h - target_w) // 2
        right += (target_h - target_w) - (target_h - target_w) // 2

    return np.pad(plane, ((top, bottom), (left, right))), (top, bottom, left, right)


def pad_to_multiple(img: OrientedImage, s: int) -> OrientedImage:
    """ Zero pad right and bottom up to multiples of s, then pad the
        shorter side symmetrically to a square.

    Note
    ----
    3769 x 3769 with s = 256 gives 3840 x 3840.
    """
    plane, pad = pad_plane(img.plane, s)
    total = tuple(before + after for before, after in zip(img.pad, pad))
    return replace(img, plane=plane, pad=total)


def unpad(img: OrientedImage) -> np.ndarray:
    """ Remove the padding recorded in the image.
    """
    top, bottom, left, right = img.pad
    height, width = img.plane.shape
    return img.plane[top:height - bottom, left:width - right]
