"""
Command-line tests: exit codes, outputs, manifests and determinism.

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

import numpy as np
import pytest

from mambo.imaging.dataset import DatasetRecord
from mambo.imaging.phantom import breast_phantom, lesion_phantom
from mambo.mambo import main
from mambo.mmio.features import write_features
from mambo.mmio.image import read_plane, write_mask, write_plane
from mambo.mmio.manifest import write_dataset_manifest

FAST = ['--set', 'sampler.plan=ddim:2']


def json_lines(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.startswith('{')]


def test_generate_is_reproducible(tmp_path):
    for name in ('first', 'second'):
        assert main(FAST + ['--seed', '7', 'generate', '--untrained', '--out', str(tmp_path / name)]) == 0

    for filename in ('global.png', 'mid.png', 'full.png'):
        assert (tmp_path / 'first' / filename).read_bytes() == (tmp_path / 'second' / filename).read_bytes()

    assert read_plane(tmp_path / 'first' / 'full.png').shape == (288, 288)
    manifest = json.loads((tmp_path / 'first' / 'manifest.json').read_text())
    assert manifest['command'] == 'generate'
    assert manifest['seed'] == 7
    assert manifest['config']['sampler']['plan'] == 'ddim:2'


def test_generate_several_images(tmp_path):
    assert main(FAST + ['generate', '--untrained', '--count', '2', '--out', str(tmp_path)]) == 0
    assert (tmp_path / '0000' / 'full.png').exists()
    assert (tmp_path / '0001' / 'full.png').exists()
    assert (tmp_path / '0000' / 'full.png').read_bytes() != (tmp_path / '0001' / 'full.png').read_bytes()


def test_configuration_errors_exit_with_code_2(tmp_path, capsys):
    assert main(['--set', 'geometry.N=300', 'generate', '--untrained', '--out', str(tmp_path)]) == 2
    assert capsys.readouterr().err.startswith("error: config:")

    assert main(['--set', 'overlap', 'generate', '--untrained', '--out', str(tmp_path)]) == 2
    assert main(['--config', str(tmp_path / 'missing.cfg'), 'generate', '--untrained', '--out', str(tmp_path)]) == 2


def test_missing_checkpoint_exits_with_code_2(tmp_path, capsys):
    assert main(['generate', '--out', str(tmp_path)]) == 2
    assert "no checkpoint for stage 1" in capsys.readouterr().err


def test_constant_image_exits_with_code_3(tmp_path, capsys):
    write_plane(tmp_path / 'flat.png', np.full((64, 64), 0.5))
    assert main(['anomaly', '--untrained', '--input', str(tmp_path / 'flat.png'), '--out', str(tmp_path / 'out')]) == 3
    assert capsys.readouterr().err.startswith("error: data:")


def test_train_writes_checkpoint_log_and_manifest(tmp_path):
    out = tmp_path / 'run'
    assert main(['--set', 'train.batch_size=2', 'train', '--stage', '3', '--synthetic', '2', '--iterations', '3', '--out', str(out)]) == 0

    assert (out / 'stage3.ckpt').exists()
    assert len((out / 'train.log').read_text().splitlines()) == 3
    manifest = json.loads((out / 'manifest.json').read_text())
    assert manifest['outputs']['iteration'] == 3
    assert manifest['config']['train']['max_iterations'] == 3


def test_train_needs_data(tmp_path):
    assert main(['train', '--stage', '1', '--out', str(tmp_path)]) == 2


def test_trained_checkpoint_drives_generation(tmp_path):
    out = tmp_path / 'run'
    assert main(['--set', 'train.batch_size=1', 'train', '--stage', '1', '--synthetic', '1', '--iterations', '1', '--out', str(out)]) == 0

    checkpoint = str(out / 'stage1.ckpt')
    assert main(FAST + ['--set', 'models.stage1=' + checkpoint, 'generate', '--untrained', '--out', str(tmp_path / 'gen')]) == 0
    assert main(['--set', 'models.stage1=' + checkpoint, '--set', 'geometry.s=16', '--set', 'geometry.N=96',
                 'generate', '--untrained', '--out', str(tmp_path / 'bad')]) == 2


def test_preprocess_writes_plane_and_mask(tmp_path, capsys):
    write_plane(tmp_path / 'left.png', breast_phantom(100, seed=1))
    assert main(['preprocess', str(tmp_path / 'left.png'), '--out', str(tmp_path / 'out')]) == 0

    assert read_plane(tmp_path / 'out' / 'left.png').shape == (128, 128)
    assert read_plane(tmp_path / 'out' / 'left_mask.pgm').shape == (128, 128)
    [record] = json_lines(capsys.readouterr().out)
    assert record['input'] == 'left.png'
    assert record['area_px'] > 0
    assert not record['flipped']
    assert record['shape'] == [128, 128]


def test_super_resolution(tmp_path):
    write_plane(tmp_path / 'low.png', breast_phantom(32, seed=2))
    assert main(FAST + ['sr', '--untrained', '--input', str(tmp_path / 'low.png'), '--out', str(tmp_path / 'out')]) == 0

    assert read_plane(tmp_path / 'out' / 'full.png').shape == (288, 288)
    assert json.loads((tmp_path / 'out' / 'manifest.json').read_text())['outputs']['scale'] == 9


def test_anomaly_outputs(tmp_path):
    phantom = lesion_phantom(64, 6, seed=5)
    write_plane(tmp_path / 'image.png', phantom.image)
    write_mask(tmp_path / 'gt.png', phantom.lesion)

    out = tmp_path / 'out'
    assert main(['anomaly', '--untrained', '--lambda', '10', '--input', str(tmp_path / 'image.png'), '--gt', str(tmp_path / 'gt.png'), '--out', str(out)]) == 0

    for filename in ('denoised.png', 'map.png', 'mask.png', 'manifest.json'):
        assert (out / filename).exists()
    record = json.loads((out / 'record.json').read_text())
    assert 0.0 <= record['iou'] <= 1.0
    assert record['lesion_area_px'] > 0
    assert record['bucket'] == 0
    assert (out / 'buckets.jsonl').exists()


def test_lambda_sweep_needs_ground_truth(tmp_path):
    write_plane(tmp_path / 'image.png', lesion_phantom(64, 6, seed=6).image)
    assert main(['anomaly', '--untrained', '--lambda-sweep', '5,10', '--input', str(tmp_path / 'image.png'), '--out', str(tmp_path / 'out')]) == 2


def test_metrics_iou_and_seam(tmp_path, capsys):
    a = np.zeros((16, 16), dtype=bool)
    b = np.zeros((16, 16), dtype=bool)
    a[:, :8], b[:, 4:12] = True, True
    write_mask(tmp_path / 'a.png', a)
    write_mask(tmp_path / 'b.png', b)

    assert main(['metrics', 'iou', '--a', str(tmp_path / 'a.png'), '--b', str(tmp_path / 'b.png')]) == 0
    [record] = json_lines(capsys.readouterr().out)
    assert record['value'] == pytest.approx(1 / 3)

    write_plane(tmp_path / 'flat.png', np.full((96, 96), 0.25))
    assert main(['metrics', 'seam', '--input', str(tmp_path / 'flat.png')]) == 0
    [record] = json_lines(capsys.readouterr().out)
    assert record['mse'] == 0.0
    assert record['overlap'] == 4


def test_nn_check_ranks_the_copy_first(tmp_path, capsys):
    rng = np.random.default_rng(3)
    corpus = []
    for i in range(3):
        path = tmp_path / 'train{}.png'.format(i)
        write_plane(path, rng.uniform(size=(64, 64)))
        corpus.append(str(path))

    assert main(['nn-check', '--query', corpus[1], '--corpus', *corpus, '--topk', '2']) == 0
    records = json_lines(capsys.readouterr().out)
    assert len(records) == 2
    assert records[0]['path'] == 'train1.png'
    assert records[0]['similarity'] == pytest.approx(1.0)


def write_inputs(directory) -> dict:
    """ Images, masks and features shared by the command lines below. """
    directory.mkdir()
    phantom = lesion_phantom(64, 6, seed=5)
    write_plane(directory / 'image.png', phantom.image)
    write_mask(directory / 'gt.png', phantom.lesion)
    write_plane(directory / 'left.png', breast_phantom(100, seed=1))
    write_plane(directory / 'low.png', breast_phantom(32, seed=2))
    write_plane(directory / 'reference.png', breast_phantom(288, seed=3))
    write_plane(directory / 'noisy.png', np.random.default_rng(4).uniform(size=(96, 96)))
    write_features(directory / 'a.feat', ['a{}'.format(i) for i in range(8)], np.random.default_rng(5).standard_normal((8, 3)))
    write_features(directory / 'b.feat', ['b{}'.format(i) for i in range(8)], np.random.default_rng(6).standard_normal((8, 3)) + 0.5)
    for i in range(3):
        write_plane(directory / 'train{}.png'.format(i), np.random.default_rng(7 + i).uniform(size=(64, 64)))
    return {path.name: str(path) for path in directory.iterdir()}


COMMAND_LINES = {
    'preprocess': lambda i: ['preprocess', i['left.png']],
    'train': lambda i: ['--set', 'train.batch_size=2', 'train', '--stage', '3', '--synthetic', '2', '--iterations', '2'],
    'generate': lambda i: FAST + ['generate', '--untrained'],
    'generate-reference': lambda i: FAST + ['generate', '--untrained', '--reference', i['reference.png']],
    'sr': lambda i: FAST + ['sr', '--untrained', '--input', i['low.png']],
    'anomaly': lambda i: ['anomaly', '--untrained', '--lambda', '10', '--input', i['image.png'], '--gt', i['gt.png']],
    'anomaly-sweep': lambda i: ['anomaly', '--untrained', '--lambda-sweep', '5,10', '--input', i['image.png'], '--gt', i['gt.png']],
    'metrics-seam': lambda i: ['metrics', 'seam', '--input', i['noisy.png']],
    'metrics-iou': lambda i: ['metrics', 'iou', '--a', i['gt.png'], '--b', i['gt.png']],
    'metrics-fid': lambda i: ['metrics', 'fid', '--features-a', i['a.feat'], '--features-b', i['b.feat']],
    'metrics-sweep': lambda i: FAST + ['metrics', 'seam', '--untrained', '--overlap-sweep', '0,4'],
    'nn-check': lambda i: ['nn-check', '--query', i['train1.png'], '--corpus', i['train0.png'], i['train1.png'], i['train2.png']],
}


def tree_bytes(directory) -> dict:
    return {str(path.relative_to(directory)): path.read_bytes() for path in sorted(directory.rglob('*')) if path.is_file()}


@pytest.mark.parametrize('name', sorted(COMMAND_LINES))
def test_every_command_is_byte_identical(name, tmp_path, capsys):
    inputs = write_inputs(tmp_path / 'inputs')
    runs = []
    for run in ('first', 'second'):
        out = tmp_path / run
        assert main(['--seed', '3'] + COMMAND_LINES[name](inputs) + ['--out', str(out)]) == 0
        runs.append((tree_bytes(out), capsys.readouterr().out))

    (first, first_stdout), (second, second_stdout) = runs
    assert 'manifest.json' in first
    assert first == second
    assert first_stdout == second_stdout


def test_generate_from_a_reference(tmp_path):
    write_plane(tmp_path / 'reference.png', breast_phantom(288, seed=3))
    for seed in ('1', '2'):
        assert main(FAST + ['--seed', seed, 'generate', '--untrained', '--reference', str(tmp_path / 'reference.png'), '--out', str(tmp_path / seed)]) == 0

    assert (tmp_path / '1' / 'global.png').read_bytes() == (tmp_path / '2' / 'global.png').read_bytes()
    assert (tmp_path / '1' / 'full.png').read_bytes() != (tmp_path / '2' / 'full.png').read_bytes()
    manifest = json.loads((tmp_path / '1' / 'manifest.json').read_text())
    assert manifest['outputs']['images'][0]['reference'] == 'reference.png'


@pytest.mark.parametrize('fraction, replaced', [('1.0', 2), ('0.5', 1), ('0.0', 0)])
def test_train_mixes_synthetic_images(tmp_path, fraction, replaced):
    for i in range(2):
        write_plane(tmp_path / 'real{}.png'.format(i), breast_phantom(100, seed=i))
        write_plane(tmp_path / 'syn{}.png'.format(i), breast_phantom(100, seed=10 + i))
    write_dataset_manifest(tmp_path / 'data.tsv', [DatasetRecord('real{}.png'.format(i), 'train', 'healthy') for i in range(2)])
    write_dataset_manifest(tmp_path / 'synthetic.tsv', [DatasetRecord('syn{}.png'.format(i), 'train', 'healthy') for i in range(2)])

    out = tmp_path / 'run'
    assert main(['--set', 'train.batch_size=1', 'train', '--stage', '3', '--data', str(tmp_path / 'data.tsv'), '--mix-with', str(tmp_path / 'synthetic.tsv'),
                 '--mix-fraction', fraction, '--iterations', '1', '--out', str(out)]) == 0

    images = json.loads((out / 'manifest.json').read_text())['outputs']['images']
    assert len(images) == 2
    assert sum(name.startswith('syn') for name in images) == replaced


def test_mixing_needs_enough_synthetic_images(tmp_path):
    write_plane(tmp_path / 'real.png', breast_phantom(100, seed=0))
    write_dataset_manifest(tmp_path / 'data.tsv', [DatasetRecord('real.png', 'train', 'lesion')])
    write_dataset_manifest(tmp_path / 'synthetic.tsv', [DatasetRecord('real.png', 'train', 'healthy')])

    assert main(['train', '--stage', '3', '--data', str(tmp_path / 'data.tsv'), '--mix-with', str(tmp_path / 'synthetic.tsv'), '--mix-fraction', '1',
                 '--out', str(tmp_path / 'run')]) == 3


def test_anomaly_buckets_over_several_images(tmp_path, capsys):
    images, truths = [], []
    for name, radius, seed in [('small', 3, 1), ('large', 9, 3), ('medium', 6, 2)]:
        phantom = lesion_phantom(64, radius, seed=seed)
        write_plane(tmp_path / '{}.png'.format(name), phantom.image)
        write_mask(tmp_path / '{}_gt.png'.format(name), phantom.lesion)
        images.append(str(tmp_path / '{}.png'.format(name)))
        truths.append(str(tmp_path / '{}_gt.png'.format(name)))

    out = tmp_path / 'out'
    assert main(['anomaly', '--untrained', '--lambda', '10', '--buckets', '3', '--input', *images, '--gt', *truths, '--out', str(out)]) == 0

    buckets = json_lines((out / 'buckets.jsonl').read_text())
    assert [row['bucket'] for row in buckets] == [0, 1, 2]
    assert [row['count'] for row in buckets] == [1, 1, 1]
    assert buckets[0]['median_area_px'] < buckets[1]['median_area_px'] < buckets[2]['median_area_px']

    records = {name: json.loads((out / name / 'record.json').read_text()) for name in ('small', 'medium', 'large')}
    assert [records[name]['bucket'] for name in ('small', 'medium', 'large')] == [0, 1, 2]
    assert json_lines(capsys.readouterr().out) == buckets


def test_anomaly_argument_checks(tmp_path):
    phantom = lesion_phantom(64, 6, seed=5)
    write_plane(tmp_path / 'image.png', phantom.image)
    write_mask(tmp_path / 'gt.png', phantom.lesion)
    image, gt, out = str(tmp_path / 'image.png'), str(tmp_path / 'gt.png'), str(tmp_path / 'out')

    assert main(['anomaly', '--untrained', '--input', image, image, '--gt', gt, '--out', out]) == 2
    assert main(['anomaly', '--untrained', '--buckets', '0', '--input', image, '--gt', gt, '--out', out]) == 2
