"""
Metrics Module

Seam MSE on stitching boundaries, IoU, pixel-space nearest neighbours
(memorization check) and the Frechet distance between feature sets.

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

from dataclasses import asdict, dataclass
from logging import info
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from mambo.diffusion.sampler import PatchGrid
from mambo.imaging.dataset import downscale
from mambo.mmio.errors import ContractError, DegenerateInputError

NN_SIDE = 64


@dataclass
class SeamReport:
    """ Seam MSE of a stitched plane.

    Attributes
    ----------
    mse : float
        Mean squared difference over every pixel pair straddling a seam.
    vertical : float
        Same, vertical seams only (between columns).
    horizontal : float
        Same, horizontal seams only (between rows).
    no_seams : bool
        Single-patch grid.
    """
    mse: float
    vertical: float
    horizontal: float
    no_seams: bool

    def record(self) -> dict:
        return asdict(self)


def seam_lines(grid: PatchGrid) -> list[int]:
    """ First column (or row) written only by the later of two neighbouring
        patches, p[i-1] + s.
    """
    return [grid.offsets[i - 1] + grid.s for i in range(1, len(grid.offsets))]


def seam_mse(plane: np.ndarray, grid: PatchGrid) -> SeamReport:
    """ Mean squared difference between the pixels on both sides of every
        seam (pairs (c - 1, c) of columns, then of rows).

    Raises
    ------
    ContractError
        Plane and grid sides differ.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.shape != (grid.plane_side, grid.plane_side):
        raise ContractError("plane of shape {} does not match a grid over {} px".format(plane.shape, grid.plane_side))

    lines = seam_lines(grid)
    if not lines:
        return SeamReport(0.0, 0.0, 0.0, True)

    vertical = np.concatenate([(plane[:, c] - plane[:, c - 1]) ** 2 for c in lines])
    horizontal = np.concatenate([(plane[r, :] - plane[r - 1, :]) ** 2 for r in lines])

    pooled = np.concatenate((vertical, horizontal))
    return SeamReport(float(pooled.mean()), float(vertical.mean()), float(horizontal.mean()), False)


def overlap_sweep(render: Callable[[int], tuple[np.ndarray, PatchGrid]], overlaps: Sequence[int]) -> list[dict]:
    """ Seam MSE for several overlaps.

    Parameters
    ----------
    render : callable
        overlap -> (stitched plane, grid used).
    overlaps : list of int
        Overlaps to compare.

    Returns
    -------
    list of dict
        One {overlap, mse, vertical, horizontal, no_seams} record per overlap.
    """
    rows = []
    for overlap in overlaps:
        plane, grid = render(overlap)
        report = seam_mse(plane, grid)
        rows.append({'overlap': overlap, **report.record()})
        info("[METRICS] > overlap {}: seam MSE {:.6g}".format(overlap, report.mse))
    return rows


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """ |a & b| / |a | b|, 1 when both are empty.
    """
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError("IoU of masks with shapes {} and {}".format(a.shape, b.shape))

    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


@dataclass(frozen=True)
class Neighbor:
    index: int
    similarity: float


def _embedding(plane: np.ndarray) -> np.ndarray:
    plane = np.asarray(plane, dtype=np.float64)
    if plane.shape[0] > NN_SIDE and plane.shape[1] > NN_SIDE:
        plane = downscale(plane, NN_SIDE).astype(np.float64)
    vector = plane.ravel()
    return vector - vector.mean()


def nearest_neighbors(query: np.ndarray, corpus: Sequence[np.ndarray], topk: int = 4) -> list[Neighbor]:
    """ Corpus images ranked by cosine similarity to the query.

    Note
    ----
    Images are area-downscaled to 64 x 64 and mean-centered. Ties are
    ranked by corpus index; a constant corpus image has similarity 0.

    Raises
    ------
    ContractError
        Empty corpus or mismatched shapes.
    DegenerateInputError
        Zero-variance query.
    """
    if not corpus:
        raise ContractError("nearest-neighbour search needs a nonempty corpus")

    q = _embedding(query)
    q_norm = np.linalg.norm(q)
    if q_norm == 0:
        raise DegenerateInputError("query image has zero variance")

    similarities = []
    for plane in corpus:
        v = _embedding(plane)
        if v.shape != q.shape:
            raise ContractError("corpus image of size {} does not match the query ({})".format(v.size, q.size))
        norm = np.linalg.norm(v)
        similarities.append(float(q @ v / (q_norm * norm)) if norm > 0 else 0.0)

    ranking = sorted(range(len(corpus)), key=lambda i: (-similarities[i], i))
    return [Neighbor(i, similarities[i]) for i in ranking[:topk]]


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """ Frechet distance between Gaussian fits of two feature sets.

    Raises
    ------
    ContractError
        Different dimensions or fewer than two vectors in a set.
    """
    a, b = np.asarray(features_a, dtype=np.float64), np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractError("feature sets of shapes {} and {} are not comparable".format(a.shape, b.shape))
    if len(a) < 2 or len(b) < 2:
        raise ContractError("Frechet distance needs at least two vectors per set")

    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a, cov_b = np.atleast_2d(np.cov(a, rowvar=False)), np.atleast_2d(np.cov(b, rowvar=False))

    covmean = linalg.sqrtm(cov_a @ cov_b)
    if not np.all(np.isfinite(covmean)):
        offset = np.eye(cov_a.shape[0]) * 1e-6
        covmean = linalg.sqrtm((cov_a + offset) @ (cov_b + offset))
    covmean = np.real(covmean)

    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean))
