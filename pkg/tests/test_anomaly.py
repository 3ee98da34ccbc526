"""
Anomaly segmentation tests: renoising, histogram matching, maps, buckets, lambda sweeps.

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

import numpy as np
import pytest

from mambo.diffusion.sampler import SamplerPlan
from mambo.imaging.phantom import lesion_phantom
from mambo.mmio.errors import ConfigurationError, ContractError, EmptyMaskError
from mambo.models.analytic import analytic_gaussian_predictor
from mambo.tasks.anomaly import (AnomalyConfig, AnomalyResult, SweepRow, build_anomaly_map, evaluate_buckets, histogram_match, lambda_sweep,
                                 renoise_denoise, suppress_weak, tradeoff_crossing)
from mambo.tasks.metrics import iou


def mean_phantom_iou(radius: float, seeds, side: int = 64) -> float:
    cfg = AnomalyConfig(lam=1, blur_sigma=1.0)
    scores = []
    for seed in seeds:
        phantom = lesion_phantom(side, radius, seed)
        scores.append(build_anomaly_map(phantom.image, phantom.background, phantom.breast, cfg, phantom.lesion).iou)
    return float(np.mean(scores))


def test_config_validation(desk_schedule):
    for kwargs in [{'threshold_frac': 0.0}, {'threshold_frac': 1.0}, {'binarize_eps': 1.5}, {'blur_sigma': -1.0}]:
        with pytest.raises(ConfigurationError):
            AnomalyConfig(**kwargs)

    for lam in (-1, desk_schedule.T):
        with pytest.raises(ContractError):
            AnomalyConfig(lam=lam).check_lambda(desk_schedule)


def test_zero_lambda_is_the_identity(desk_schedule, rng):
    net = analytic_gaussian_predictor(np.zeros((16, 16)), 0.01, desk_schedule)
    image = rng.uniform(size=(16, 16)).astype(np.float32)

    np.testing.assert_array_equal(renoise_denoise(image, net, desk_schedule, AnomalyConfig(lam=0), seed=0), image)
    with pytest.raises(ContractError):
        renoise_denoise(image, net, desk_schedule, AnomalyConfig(lam=200), seed=0)


def test_renoise_denoise_is_seeded(desk_schedule, rng):
    net = analytic_gaussian_predictor(np.full((16, 16), 0.5), 0.01, desk_schedule)
    image = rng.uniform(size=(16, 16)).astype(np.float32)
    cfg = AnomalyConfig(lam=20)

    first = renoise_denoise(image, net, desk_schedule, cfg, seed=1)
    np.testing.assert_array_equal(first, renoise_denoise(image, net, desk_schedule, cfg, seed=1))
    np.testing.assert_array_equal(first, renoise_denoise(image, net, desk_schedule, cfg, seed=1, plan=SamplerPlan()))
    assert first.shape == image.shape


def test_histogram_match_to_itself_is_the_identity(rng):
    image = rng.uniform(size=(32, 32)).astype(np.float32)
    mask = rng.uniform(size=(32, 32)) > 0.3
    np.testing.assert_array_equal(histogram_match(image, image, mask), image)


def test_histogram_match_constant_source(rng):
    ref = rng.uniform(size=(10, 10))
    mask = np.ones((10, 10), dtype=bool)
    matched = histogram_match(np.full((10, 10), 0.5), ref, mask)
    np.testing.assert_array_equal(matched, np.float32(np.median(ref)))

    mask[:, 7:] = False
    matched = histogram_match(np.full((10, 10), 0.5), ref, mask)
    np.testing.assert_array_equal(matched[mask], np.float32(np.median(ref[mask])))
    np.testing.assert_array_equal(matched[~mask], np.float32(0.5))


def test_histogram_match_ties_take_the_block_median():
    src = np.array([[0.1, 0.1, 0.1, 0.7]])
    ref = np.array([[0.4, 0.2, 0.9, 0.6]])
    matched = histogram_match(src, ref, np.ones((1, 4), dtype=bool))
    np.testing.assert_array_equal(matched, np.float32([[0.4, 0.4, 0.4, 0.9]]))


def test_histogram_match_two_levels():
    src = np.repeat([0.2, 0.8], 50).reshape(10, 10)
    ref = np.repeat([0.9, 0.3], 50).reshape(10, 10)
    matched = histogram_match(src, ref, np.ones((10, 10), dtype=bool))

    np.testing.assert_array_equal(matched[src == 0.2], np.float32(0.3))
    np.testing.assert_array_equal(matched[src == 0.8], np.float32(0.9))


def test_histogram_match_is_monotone_and_local(rng):
    src = rng.uniform(size=(24, 24))
    ref = rng.beta(2, 5, size=(24, 24))
    mask = np.zeros((24, 24), dtype=bool)
    mask[4:20, 2:18] = True

    matched = histogram_match(src, ref, mask)
    order = np.argsort(src[mask])
    assert np.all(np.diff(matched[mask][order]) >= 0)
    np.testing.assert_array_equal(matched[~mask], src[~mask].astype(np.float32))


def test_histogram_match_needs_a_mask():
    with pytest.raises(EmptyMaskError):
        histogram_match(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4), dtype=bool))


def test_suppress_weak():
    d = np.zeros((5, 5))
    d[1, 1], d[3, 3] = 1.0, 0.2
    suppressed = suppress_weak(d, 0.3)
    assert suppressed[3, 3] == 0.0
    assert suppressed[1, 1] == 1.0


def test_unchanged_image_has_no_anomaly():
    phantom = lesion_phantom(48, 4, seed=1)
    result = build_anomaly_map(phantom.image, phantom.image.copy(), phantom.breast, AnomalyConfig(), phantom.lesion)

    assert not result.map.any()
    assert not result.mask.any()
    assert result.iou == 0.0
    assert result.lesion_area_px == int(phantom.lesion.sum())


def test_map_is_non_negative_and_inside_the_breast():
    phantom = lesion_phantom(64, 6, seed=2)
    result = build_anomaly_map(phantom.image, phantom.background, phantom.breast, AnomalyConfig(blur_sigma=1.0))

    assert result.map.min() >= 0
    assert not result.map[~phantom.breast].any()
    assert not np.any(result.mask & ~phantom.breast)
    assert result.iou is None


def test_oracle_denoiser_finds_the_lesion():
    assert mean_phantom_iou(6, range(6)) >= 0.3


def test_dark_lesion_mode():
    phantom = lesion_phantom(64, 6, seed=3)
    dark_image = phantom.background - 0.15 * phantom.lesion

    bright = build_anomaly_map(dark_image, phantom.background, phantom.breast, AnomalyConfig(blur_sigma=1.0), phantom.lesion)
    dark = build_anomaly_map(dark_image, phantom.background, phantom.breast, AnomalyConfig(blur_sigma=1.0, dark=True), phantom.lesion)
    assert dark.iou > bright.iou


def test_larger_lesions_are_easier():
    assert mean_phantom_iou(8, range(4), side=96) > mean_phantom_iou(2, range(4), side=96)


def test_bucket_iou_grows_with_lesion_size():
    radii = [9, 2, 14, 4, 6]
    cfg = AnomalyConfig(lam=1, blur_sigma=2.0)
    results = []
    for seed in range(6):
        for radius in radii:
            phantom = lesion_phantom(160, radius, seed)
            results.append(build_anomaly_map(phantom.image, phantom.background, phantom.breast, cfg, phantom.lesion))

    rows = evaluate_buckets(results, n_buckets=len(radii))

    assert [row.count for row in rows] == [6] * len(radii)
    assert all(a.median_area_px < b.median_area_px for a, b in zip(rows, rows[1:]))
    assert all(len({r.lesion_area_px for r in results if r.bucket_id == row.bucket}) == 1 for row in rows)
    # The largest bucket may dip
    assert all(a.mean_iou <= b.mean_iou for a, b in zip(rows[:-2], rows[1:-1]))


def test_shape_mismatch():
    with pytest.raises(ContractError):
        build_anomaly_map(np.zeros((8, 8)), np.zeros((8, 9)), np.ones((8, 8), dtype=bool), AnomalyConfig())


def test_buckets_of_equal_count():
    results = [AnomalyResult(np.zeros((2, 2)), np.zeros((2, 2), dtype=bool), iou=0.01 * (i % 10), lesion_area_px=i + 1) for i in range(107)]
    rows = evaluate_buckets(results)

    assert [row.count for row in rows] == [18] * 5 + [17]
    assert rows[0].median_area_px == 9.5
    assert [row.bucket for row in rows] == list(range(6))
    assert results[0].bucket_id == 0 and results[-1].bucket_id == 5


def test_identical_masks_score_one():
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:5, 3:6] = True
    results = [AnomalyResult(np.zeros((8, 8)), mask, iou=iou(mask, mask), lesion_area_px=9) for _ in range(12)]

    assert all(row.mean_iou == 1.0 for row in evaluate_buckets(results))


def test_bucket_contracts():
    with pytest.raises(ContractError):
        evaluate_buckets([])
    with pytest.raises(ContractError):
        evaluate_buckets([AnomalyResult(np.zeros((2, 2)), np.zeros((2, 2), dtype=bool))])
    with pytest.raises(ContractError):
        evaluate_buckets([AnomalyResult(np.zeros((2, 2)), np.zeros((2, 2), dtype=bool), iou=1.0)], n_buckets=0)


def test_lambda_sweep_tradeoff(desk_schedule):
    phantom = lesion_phantom(64, 6, seed=4)
    net = analytic_gaussian_predictor(phantom.background, 0.01, desk_schedule)
    images = [(phantom.image, phantom.breast, phantom.lesion)]

    rows = lambda_sweep(images, net, desk_schedule, AnomalyConfig(blur_sigma=1.0), [1, 3, 6, 12], seed=0)

    assert [row.lam for row in rows] == [1, 3, 6, 12]
    assert all(a.suppression < b.suppression for a, b in zip(rows, rows[1:]))
    assert all(a.background_error <= b.background_error for a, b in zip(rows, rows[1:]))
    assert all(0.0 <= row.mean_iou <= 1.0 for row in rows)

    crossing = tradeoff_crossing(rows)
    assert crossing is not None
    assert 1 <= crossing <= 12


def test_tradeoff_crossing_interpolates():
    rows = [SweepRow(100, 0.0, 0.0), SweepRow(300, 1.0, 1.0)]
    assert tradeoff_crossing(rows) == pytest.approx(200.0)
    assert tradeoff_crossing(rows[:1]) is None
