"""
Patch geometry, context extraction and dataset manifest tests.

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

from mambo.exec.utils import derive_seed
from mambo.imaging.dataset import (DatasetRecord, GeometryConfig, TrainingSet, crop, downscale, extract_stage2_pair, extract_stage3_triple,
                                   mix_synthetic, prepare_full, reference_contexts, sample_patch_center, shift_global, upscale_nearest)
from mambo.imaging.phantom import breast_phantom
from mambo.mmio.errors import ConfigurationError, ContractError, EmptyMaskError


def test_geometry_validation(desk_geometry):
    assert desk_geometry.mid_side == 96
    assert desk_geometry.local_side == 96
    assert desk_geometry.scale_factor() == 9

    paper = GeometryConfig(256, 3, 3840, 32)
    assert paper.mid_side == 1280
    assert paper.scale_factor() == 15

    for args in [(32, 3, 300, 4), (32, 5, 288, 4), (32, 3, 288, 32), (0, 3, 288, 0)]:
        with pytest.raises(ConfigurationError):
            GeometryConfig(*args)


def test_downscale_constant_and_checker():
    constant = np.full((96, 96), 0.25, dtype=np.float32)
    np.testing.assert_array_equal(downscale(constant, 32), np.full((32, 32), 0.25, dtype=np.float32))

    checker = (np.indices((64, 64)).sum(axis=0) % 2).astype(np.float32)
    np.testing.assert_allclose(downscale(checker, 32), 0.5)

    uneven = downscale(np.full((100, 100), 0.7), 32)
    np.testing.assert_allclose(uneven, 0.7, rtol=1e-6)


def test_downscale_box_means(rng):
    plane = rng.uniform(size=(96, 96))
    reduced = downscale(plane, 32)

    expected = np.array([[plane[3 * i:3 * i + 3, 3 * j:3 * j + 3].mean() for j in range(32)] for i in range(32)])
    np.testing.assert_allclose(reduced, expected, rtol=1e-6)
    np.testing.assert_allclose(downscale(np.fliplr(plane), 32), np.fliplr(reduced), rtol=1e-6)


def test_downscale_refuses_upscaling():
    with pytest.raises(ContractError):
        downscale(np.zeros((16, 16)), 32)


def test_upscale_nearest():
    plane = np.arange(4.0).reshape(2, 2)
    np.testing.assert_array_equal(upscale_nearest(plane, 2), [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    np.testing.assert_array_equal(downscale(upscale_nearest(plane, 3), 2), plane)


def test_sample_patch_center_single_pixel():
    mask = np.zeros((20, 20), dtype=bool)
    mask[7, 13] = True
    assert all(sample_patch_center(mask, seed) == (7, 13) for seed in range(20))


def test_sample_patch_center_is_uniform():
    mask = np.zeros((10, 10), dtype=bool)
    mask[2, 3] = mask[8, 1] = True

    hits = sum(sample_patch_center(mask, seed) == (2, 3) for seed in range(10000))
    assert hits / 10000 == pytest.approx(0.5, abs=0.02)


def test_sample_patch_center_is_deterministic(rng):
    mask = rng.uniform(size=(32, 32)) > 0.5
    assert sample_patch_center(mask, 99) == sample_patch_center(mask, 99)
    assert mask[sample_patch_center(mask, 5)]


def test_sample_patch_center_empty_mask():
    with pytest.raises(EmptyMaskError):
        sample_patch_center(np.zeros((8, 8), dtype=bool), 0)


def test_crop_translates_inward():
    plane = np.arange(100.0).reshape(10, 10)
    window, center = crop(plane, (0, 0), 4)
    assert center == (2, 2)
    np.testing.assert_array_equal(window, plane[:4, :4])

    window, center = crop(plane, (9, 9), 4)
    assert center == (8, 8)
    np.testing.assert_array_equal(window, plane[6:, 6:])

    window, center = crop(plane, (5, 5), 12)
    assert window.shape == (12, 12)
    np.testing.assert_array_equal(window[1:11, 1:11], plane)


def test_stage3_patch_is_the_central_crop(desk_geometry, rng):
    full = rng.uniform(size=(288, 288)).astype(np.float32)
    triple = extract_stage3_triple(full, (150, 150), desk_geometry)

    assert triple.center == (150, 150)
    np.testing.assert_array_equal(triple.patch, full[134:166, 134:166])
    np.testing.assert_allclose(triple.local_ctx, downscale(full[102:198, 102:198], 32), rtol=1e-6)
    np.testing.assert_allclose(triple.global_ctx, downscale(full, 32), rtol=1e-6)
    assert triple.stack(3).shape == (3, 32, 32)


def test_stage3_triple_clamps_at_the_corner(desk_geometry, rng):
    full = rng.uniform(size=(288, 288)).astype(np.float32)
    triple = extract_stage3_triple(full, (0, 0), desk_geometry)

    assert triple.center == (48, 48)
    np.testing.assert_array_equal(triple.patch, full[32:64, 32:64])


def test_unit_ratio_local_context_is_the_patch(rng):
    geometry = GeometryConfig(32, 1, 288, 4)
    full = rng.uniform(size=(288, 288)).astype(np.float32)
    triple = extract_stage3_triple(full, (100, 200), geometry)

    np.testing.assert_array_equal(triple.local_ctx, triple.patch)


def test_shift_global_reindexes(rng):
    full = rng.uniform(size=(12, 12))
    np.testing.assert_array_equal(shift_global(full, (6, 6)), full)

    center = (3, 9)
    shifted = shift_global(full, center)
    drow, dcol = center[0] - 6, center[1] - 6
    for i in range(12):
        for j in range(12):
            inside = 0 <= i + drow < 12 and 0 <= j + dcol < 12
            assert shifted[i, j] == (full[i + drow, j + dcol] if inside else 0.0)


def test_stage2_pair_channels(desk_geometry, rng):
    full = rng.uniform(size=(288, 288)).astype(np.float32)

    centered = extract_stage2_pair(full, (144, 144), desk_geometry)
    np.testing.assert_array_equal(centered.channels[1], centered.channels[2])
    np.testing.assert_allclose(centered.channels[0], downscale(full[96:192, 96:192], 32), rtol=1e-6)

    corner = extract_stage2_pair(full, (10, 270), desk_geometry)
    assert corner.center == (48, 240)
    assert not np.array_equal(corner.channels[1], corner.channels[2])


def test_stack_checks_arity(desk_geometry, rng):
    full = rng.uniform(size=(288, 288)).astype(np.float32)
    pair = extract_stage2_pair(full, (144, 144), desk_geometry)
    with pytest.raises(ConfigurationError):
        pair.stack(4)


def test_training_set_draws_per_stage(desk_geometry, rng):
    images = [(rng.uniform(size=(288, 288)).astype(np.float32), np.ones((288, 288), dtype=bool)) for _ in range(3)]

    globals_only = TrainingSet(images, desk_geometry, 1).draw(np.random.default_rng(0), 4)
    assert all(len(triple.channels) == 1 and triple.patch.shape == (32, 32) for triple in globals_only)

    triples = TrainingSet(images, desk_geometry, 3).draw(np.random.default_rng(0), 4)
    assert all(len(triple.channels) == 3 for triple in triples)

    again = TrainingSet(images, desk_geometry, 3).draw(np.random.default_rng(0), 4)
    assert [triple.center for triple in again] == [triple.center for triple in triples]


def test_training_set_contracts(desk_geometry):
    with pytest.raises(ContractError):
        TrainingSet([], desk_geometry, 3)
    with pytest.raises(ContractError):
        TrainingSet([(np.zeros((96, 96)), np.ones((96, 96), dtype=bool))], desk_geometry, 3)
    with pytest.raises(ConfigurationError):
        TrainingSet([(np.zeros((288, 288)), np.ones((288, 288), dtype=bool))], desk_geometry, 4)


@pytest.mark.parametrize('side', [200, 400])
def test_prepare_full_reaches_the_canvas(desk_geometry, side):
    plane, mask = prepare_full(breast_phantom(side, seed=side), desk_geometry)

    assert plane.shape == mask.shape == (288, 288)
    assert mask.dtype == bool
    assert mask.any()
    assert np.mean(plane[mask] > 0) > 0.8


def test_reference_contexts(desk_geometry, rng):
    full = rng.uniform(size=(288, 288)).astype(np.float32)
    contexts = reference_contexts(full, desk_geometry)

    assert contexts.global_ctx.shape == (32, 32)
    assert contexts.mid.shape == (96, 96)
    with pytest.raises(ContractError):
        reference_contexts(full[:96, :96], desk_geometry)


def test_dataset_record_labels():
    assert DatasetRecord('a.png', 'train', 'healthy').label == 'healthy'
    with pytest.raises(ContractError):
        DatasetRecord('a.png', 'train', 'benign')


def test_mix_synthetic_replaces_a_share_of_each_class():
    records = [DatasetRecord('real_h{}.png'.format(i), 'train' if i < 7 else 'test', 'healthy') for i in range(10)]
    records += [DatasetRecord('real_l{}.png'.format(i), 'train', 'lesion') for i in range(4)]
    synthetic = {'healthy': ['syn_h{}.png'.format(i) for i in range(8)], 'lesion': ['syn_l0.png', 'syn_l1.png']}

    mixed = mix_synthetic(records, synthetic, 0.5, seed=derive_seed(3))

    assert len(mixed) == len(records)
    assert sum(record.path.startswith('syn_h') for record in mixed) == 5
    assert sum(record.path.startswith('syn_l') for record in mixed) == 2
    assert [record.label for record in mixed] == [record.label for record in records]
    assert [record.split for record in mixed] == [record.split for record in records]
    assert mix_synthetic(records, synthetic, 0.5, seed=derive_seed(3)) == mixed
    assert mix_synthetic(records, {}, 0.0, seed=0) == records


def test_mix_synthetic_contracts():
    records = [DatasetRecord('real.png', 'train', 'lesion')] * 4
    with pytest.raises(ContractError):
        mix_synthetic(records, {'lesion': ['syn.png']}, 1.0, seed=0)
    with pytest.raises(ContractError):
        mix_synthetic(records, {}, 1.5, seed=0)
