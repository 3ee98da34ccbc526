"""
Image, manifest, error and worker-pool tests.

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

import json
import os
from time import sleep, time

import numpy as np
import pytest
from PIL import Image

from mambo.exec.parallelizer import Parallelizer
from mambo.exec.utils import derive_seed, parse_int_list
from mambo.imaging.dataset import DatasetRecord
from mambo.mmio.config import RunConfig
from mambo.mmio.errors import ConfigurationError, ContractError, DegenerateInputError, ErrorCategory, MamboError, NumericFailure
from mambo.mmio.image import read_mask, read_plane, write_mask, write_plane
from mambo.mmio.manifest import read_dataset_manifest, run_manifest, write_dataset_manifest, write_manifest


def square(value: int) -> int:
    return value * value


def fail_on_three(value: int) -> int:
    if value == 3:
        raise ContractError("three is not allowed")
    return value


def die_on_two(value: int) -> int:
    if value == 2:
        os._exit(1)
    return value


def sleep_an_hour(value: int) -> int:
    sleep(3600)
    return value


def test_plane_levels(tmp_path, rng):
    plane = rng.uniform(size=(20, 30))

    write_plane(tmp_path / "deep.png", plane)
    np.testing.assert_allclose(read_plane(tmp_path / "deep.png"), plane, atol=0.5 / 65535 + 1e-7)

    write_plane(tmp_path / "shallow.pgm", plane, bits=8)
    np.testing.assert_allclose(read_plane(tmp_path / "shallow.pgm"), plane, atol=0.5 / 255 + 1e-7)

    write_plane(tmp_path / "clamped.png", np.array([[-1.0, 2.0]]))
    np.testing.assert_array_equal(read_plane(tmp_path / "clamped.png"), [[0.0, 1.0]])

    with pytest.raises(ContractError):
        write_plane(tmp_path / "odd.png", plane, bits=12)


def test_masks(tmp_path):
    mask = np.eye(6, dtype=bool)
    write_mask(tmp_path / "mask.png", mask)
    np.testing.assert_array_equal(read_mask(tmp_path / "mask.png"), mask)


def test_unreadable_images(tmp_path):
    with pytest.raises(ContractError):
        read_plane(tmp_path / "missing.png")

    Image.new('RGB', (4, 4)).save(tmp_path / "colour.png")
    with pytest.raises(ContractError):
        read_plane(tmp_path / "colour.png")


def test_dataset_manifest(tmp_path):
    (tmp_path / "manifest.tsv").write_text("# path split label\na.png\ttrain\thealthy\n\n/abs/b.png\ttest\tlesion\n")
    records = read_dataset_manifest(tmp_path / "manifest.tsv")

    assert records == [DatasetRecord(str(tmp_path / "a.png"), 'train', 'healthy'), DatasetRecord('/abs/b.png', 'test', 'lesion')]

    write_dataset_manifest(tmp_path / "copy.tsv", records)
    assert read_dataset_manifest(tmp_path / "copy.tsv") == records

    (tmp_path / "broken.tsv").write_text("a.png train healthy\n")
    with pytest.raises(ContractError):
        read_dataset_manifest(tmp_path / "broken.tsv")
    (tmp_path / "label.tsv").write_text("a.png\ttrain\tbenign\n")
    with pytest.raises(ContractError):
        read_dataset_manifest(tmp_path / "label.tsv")


def test_run_manifest_has_no_clock(tmp_path):
    config = RunConfig.from_text('', [('run', 'seed', '9')])
    path = write_manifest(tmp_path, config, 'generate', {'images': 1})

    manifest = json.loads(path.read_text())
    assert manifest == json.loads(json.dumps(run_manifest(config, 'generate', {'images': 1})))
    assert manifest['seed'] == 9
    assert manifest['schedule']['run']['timesteps'] == 200
    assert manifest['schedule']['reference_alpha_bar_T'] < 1e-3
    assert 'numpy' in manifest['versions']


def test_error_lines_and_codes():
    assert ConfigurationError("bad\n  geometry").line() == "error: config: bad geometry"
    assert ContractError("x").category == ErrorCategory.DATA
    assert DegenerateInputError("x").category.value == 3

    failure = NumericFailure("non-finite values", step=12)
    assert failure.step == 12
    assert failure.category.value == 4
    assert failure.line() == "error: numeric: non-finite values (step 12)"


def test_seeds_and_lists():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert derive_seed(1, 2) != derive_seed(2, 1)
    assert 0 <= derive_seed(-5, 2 ** 70) < 2 ** 63
    assert parse_int_list("0, 8,16,") == [0, 8, 16]


@pytest.mark.parametrize('jobs', [1, 2])
def test_parallelizer_keeps_submission_order(jobs):
    assert Parallelizer(square, [(i,) for i in range(7)], jobs).run() == [i * i for i in range(7)]
    assert Parallelizer(square, [], jobs).run() == []


@pytest.mark.parametrize('jobs', [1, 2])
def test_parallelizer_reports_errors(jobs):
    with pytest.raises(MamboError, match="three"):
        Parallelizer(fail_on_three, [(i,) for i in range(5)], jobs).run(timeout=60)


def test_parallelizer_reports_a_dead_worker():
    start = time()
    with pytest.raises(MamboError, match="exit code 1"):
        Parallelizer(die_on_two, [(i,) for i in range(5)], 2).run()
    assert time() - start < 30


def test_parallelizer_time_limit():
    with pytest.raises(MamboError, match="time limit"):
        Parallelizer(sleep_an_hour, [(i,) for i in range(2)], 2).run(timeout=1)
