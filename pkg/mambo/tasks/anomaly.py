"""
Anomaly Segmentation Module

Partial renoising with a healthy-only global model, histogram matching,
anomaly map construction, thresholding and IoU evaluation by lesion size.

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
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from mambo.diffusion.sampler import SamplerPlan, denoise_from
from mambo.diffusion.schedule import NoiseSchedule, forward_noise
from mambo.exec.utils import derive_seed, rng_for
from mambo.imaging.preprocess import BreastMask
from mambo.mmio.errors import ConfigurationError, ContractError, EmptyMaskError
from mambo.models.predictor import NoisePredictor
from mambo.tasks.metrics import iou

PAPER_LAMBDA = 700
DEFAULT_BUCKETS = 6

MaskLike = Union[BreastMask, np.ndarray]


@dataclass
class AnomalyConfig:
    """ Anomaly segmentation settings.

    Attributes
    ----------
    lam : int
        Forward noising steps, 0 < lam < T (0 only as an identity escape hatch).
    blur_sigma : float
        Gaussian blur sigma in pixels.
    threshold_frac : float
        Values under this fraction of the maximum are zeroed.
    binarize_eps : float
        Binarization level as a fraction of the blurred maximum.
    dark : bool
        Dark-lesion mode (the difference is negated).
    """
    lam: int = PAPER_LAMBDA
    blur_sigma: float = 0.5
    threshold_frac: float = 0.30
    binarize_eps: float = 0.05
    dark: bool = False

    def __post_init__(self) -> None:
        if not 0 < self.threshold_frac < 1:
            raise ConfigurationError("threshold fraction {} outside (0, 1)".format(self.threshold_frac))
        if not 0 < self.binarize_eps < 1:
            raise ConfigurationError("binarization fraction {} outside (0, 1)".format(self.binarize_eps))
        if self.blur_sigma < 0:
            raise ConfigurationError("blur sigma must be non-negative, got {}".format(self.blur_sigma))

    def check_lambda(self, sched: NoiseSchedule) -> None:
        if not 0 <= self.lam < sched.T:
            raise ContractError("lambda {} outside [0, T = {})".format(self.lam, sched.T))


@dataclass
class AnomalyResult:
    """ Anomaly map of one image.

    Attributes
    ----------
    map : ndarray
        Non-negative anomaly map, 0 outside the breast mask.
    mask : ndarray
        Binarized map.
    iou : float, optional
        IoU against the ground truth.
    lesion_area_px : int
        Ground-truth lesion area (0 without ground truth).
    bucket_id : int, optional
        Lesion-size bucket, set by `evaluate_buckets`.
    """
    map: np.ndarray
    mask: np.ndarray
    iou: Optional[float] = None
    lesion_area_px: int = 0
    bucket_id: Optional[int] = None

    def record(self) -> dict:
        return {'iou': self.iou, 'lesion_area_px': self.lesion_area_px, 'bucket': self.bucket_id}


def _mask_array(mask: MaskLike) -> np.ndarray:
    return mask.mask if isinstance(mask, BreastMask) else np.asarray(mask, dtype=bool)


def renoise_denoise(img: np.ndarray, stage1: NoisePredictor, sched: NoiseSchedule, cfg: AnomalyConfig, seed: int, plan: SamplerPlan = SamplerPlan()) -> np.ndarray:
    """ Noise the image for lambda steps, then run the reverse loop back to 0.

    Raises
    ------
    ContractError
        lambda outside [0, T).
    """
    cfg.check_lambda(sched)
    if cfg.lam == 0:
        return np.asarray(img, dtype=np.float32).copy()

    x_lam = forward_noise(np.asarray(img, dtype=np.float64), cfg.lam, rng_for(seed, 0).standard_normal(np.shape(img)), sched)
    return denoise_from(stage1, x_lam, cfg.lam, [], sched, plan, derive_seed(seed, 1))


def histogram_match(src: np.ndarray, ref: np.ndarray, mask: MaskLike) -> np.ndarray:
    """ Remap the masked pixels of src so that their distribution matches
        the masked pixels of ref.

    Note
    ----
    A distinct source value holding ranks lo..hi-1 among the masked pixels
    is sent to the median of the ref order statistics lo..hi-1. A constant
    source thus maps to the masked median of ref, and matching an image to
    itself is the identity. The map is monotone. Pixels outside the mask
    are unchanged.

    Raises
    ------
    EmptyMaskError
        Empty mask.
    """
    region = _mask_array(mask)
    if not region.any():
        raise EmptyMaskError("histogram matching needs a nonempty mask")

    values = np.asarray(src, dtype=np.float64)[region]
    reference = np.sort(np.asarray(ref, dtype=np.float64)[region])

    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    start = np.cumsum(counts) - counts

    # Median of each sorted block, as np.median computes it
    lookup = (reference[start + (counts - 1) // 2] + reference[start + counts // 2]) / 2.0

    matched = np.array(src, dtype=np.float32, copy=True)
    matched[region] = lookup[inverse]
    return matched


def suppress_weak(d: np.ndarray, threshold_frac: float) -> np.ndarray:
    """ Zero the values below threshold_frac x max.
    """
    peak = d.max() if d.size else 0.0
    return np.where(d < threshold_frac * peak, 0.0, d)


def build_anomaly_map(original: np.ndarray, denoised: np.ndarray, mask: MaskLike, cfg: AnomalyConfig, ground_truth: Optional[np.ndarray] = None) -> AnomalyResult:
    """ Difference between the image and its matched healthy reconstruction.

    Note
    ----
    Negatives zeroed, weak values suppressed, then blurred and binarized;
    everything restricted to the breast mask. A zero difference gives an
    empty result.

    Parameters
    ----------
    original : ndarray
        Input image.
    denoised : ndarray
        Healthy reconstruction.
    mask : BreastMask or ndarray
        Breast mask.
    cfg : AnomalyConfig
        Settings.
    ground_truth : ndarray, optional
        Lesion mask for the IoU.

    Returns
    -------
    AnomalyResult
        Map and binary mask.
    """
    if np.shape(original) != np.shape(denoised):
        raise ContractError("original {} and denoised {} differ in shape".format(np.shape(original), np.shape(denoised)))

    region = _mask_array(mask)
    matched = histogram_match(denoised, original, region)

    d = np.asarray(original, dtype=np.float64) - matched
    if cfg.dark:
        d = -d
    d = np.where(region & (d > 0), d, 0.0)

    if d.max() <= 0:
        blurred = np.zeros_like(d)
        binary = np.zeros_like(region)
    else:
        blurred = ndimage.gaussian_filter(suppress_weak(d, cfg.threshold_frac), sigma=cfg.blur_sigma) if cfg.blur_sigma > 0 else suppress_weak(d, cfg.threshold_frac)
        blurred = np.where(region, blurred, 0.0)
        binary = region & (blurred > 0) & (blurred >= cfg.binarize_eps * blurred.max())

    result = AnomalyResult(blurred.astype(np.float32), binary)
    if ground_truth is not None:
        truth = np.asarray(ground_truth, dtype=bool)
        result.iou = iou(binary, truth)
        result.lesion_area_px = int(truth.sum())

    return result


@dataclass
class BucketRow:
    """ IoU summary of one lesion-size bucket.
    """
    bucket: int
    count: int
    median_area_px: float
    mean_iou: float

    def record(self) -> dict:
        return asdict(self)


def evaluate_buckets(results: Sequence[AnomalyResult], n_buckets: int = DEFAULT_BUCKETS) -> list[BucketRow]:
    """ Mean IoU per lesion-size bucket.

    Note
    ----
    Lesions are sorted by area (a log scale keeps the order) and cut into
    buckets of ceil(n / n_buckets) lesions, the last one taking the rest:
    107 lesions give five buckets of 18 and one of 17. Sets `bucket_id`
    on every result.

    Raises
    ------
    ContractError
        Empty input, results without ground truth or no bucket.
    """
    if n_buckets < 1:
        raise ContractError("bucket count must be positive, got {}".format(n_buckets))
    if not results:
        raise ContractError("no anomaly results to evaluate")
    if any(result.iou is None for result in results):
        raise ContractError("bucket evaluation needs ground-truth lesion masks")

    order = sorted(range(len(results)), key=lambda i: (results[i].lesion_area_px, i))
    size = -(-len(results) // n_buckets)

    rows = []
    for bucket, start in enumerate(range(0, len(order), size)):
        members = [results[i] for i in order[start:start + size]]
        for member in members:
            member.bucket_id = bucket
        rows.append(BucketRow(bucket, len(members), float(np.median([m.lesion_area_px for m in members])), float(np.mean([m.iou for m in members]))))

    return rows


@dataclass
class SweepRow:
    """ Trade-off measures at one lambda.

    Attributes
    ----------
    lam : int
        Forward noising steps.
    suppression : float
        Mean squared change on the lesion pixels (anomaly removal).
    background_error : float
        Mean squared change on the healthy breast pixels (lost information).
    mean_iou : float, optional
        Mean IoU when ground truth is available.
    """
    lam: int
    suppression: float
    background_error: float
    mean_iou: Optional[float] = None

    def record(self) -> dict:
        return asdict(self)


def lambda_sweep(images: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]], stage1: NoisePredictor, sched: NoiseSchedule, cfg: AnomalyConfig, lambdas: Sequence[int], seed: int, plan: SamplerPlan = SamplerPlan()) -> list[SweepRow]:
    """ Renoise-denoise every image at every lambda.

    Parameters
    ----------
    images : list of (image, breast mask, lesion mask)
        Evaluation images.
    stage1 : NoisePredictor
        Healthy global model.
    sched : NoiseSchedule
        Schedule.
    cfg : AnomalyConfig
        Settings (lam is overridden).
    lambdas : list of int
        Lambdas to evaluate.
    seed : int
        Seed, image i uses the same noise stream at every lambda.

    Returns
    -------
    list of SweepRow
        One row per lambda.
    """
    rows = []
    for lam in lambdas:
        settings = AnomalyConfig(lam, cfg.blur_sigma, cfg.threshold_frac, cfg.binarize_eps, cfg.dark)

        suppression, background, ious = [], [], []
        for index, (image, breast, lesion) in enumerate(images):
            denoised = renoise_denoise(image, stage1, sched, settings, derive_seed(seed, index), plan)
            change = (np.asarray(image, dtype=np.float64) - denoised) ** 2
            healthy = np.asarray(breast, dtype=bool) & ~np.asarray(lesion, dtype=bool)

            suppression.append(change[np.asarray(lesion, dtype=bool)].mean())
            background.append(change[healthy].mean())
            ious.append(build_anomaly_map(image, denoised, breast, settings, lesion).iou)

        rows.append(SweepRow(int(lam), float(np.mean(suppression)), float(np.mean(background)), float(np.mean(ious))))
        info("[ANOMALY] > lambda {}: suppression {:.5f}, background error {:.5f}".format(lam, rows[-1].suppression, rows[-1].background_error))

    return rows


def tradeoff_crossing(rows: Sequence[SweepRow]) -> Optional[float]:
    """ Lambda where the normalized anomaly suppression meets the normalized
        preservation of the background (1 - normalized background error).

    Note
    ----
    Both curves are normalized by their maximum over the sweep and the
    crossing is linearly interpolated. None when the curves do not cross.
    """
    if len(rows) < 2:
        return None

    lams = np.array([row.lam for row in rows], dtype=np.float64)
    suppression = np.array([row.suppression for row in rows])
    background = np.array([row.background_error for row in rows])

    suppression = suppression / suppression.max() if suppression.max() > 0 else suppression
    preservation = 1.0 - (background / background.max() if background.max() > 0 else background)

    gap = suppression - preservation
    for i in range(1, len(rows)):
        if gap[i - 1] < 0 <= gap[i]:
            return float(lams[i - 1] + (lams[i] - lams[i - 1]) * (-gap[i - 1]) / (gap[i] - gap[i - 1]))
    if gap[0] == 0:
        return float(lams[0])
    return None
