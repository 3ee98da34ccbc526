"""
mambo: Three-stage patch-conditioned diffusion for high-resolution mammograms

Command-line front-end: preprocess, train, generate, sr, anomaly,
metrics and nn-check.

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

import json
import sys
from argparse import ArgumentParser, Namespace
from dataclasses import replace
from logging import info
from pathlib import Path
from time import time
from typing import Optional

import numpy as np

from mambo.diffusion.sampler import plan_patch_grid
from mambo.diffusion.training import Trainer
from mambo.exec.parallelizer import Parallelizer
from mambo.exec.utils import derive_seed, parse_int_list, set_verbose
from mambo.imaging.dataset import TrainingSet, downscale, mix_synthetic, prepare_full, reference_contexts
from mambo.imaging.phantom import striped_phantom
from mambo.imaging.preprocess import breast_mask, normalize_and_orient, pad_plane, pad_to_multiple
from mambo.mmio.checkpoint import load_predictor
from mambo.mmio.config import RunConfig
from mambo.mmio.errors import ConfigurationError, ContractError, MamboError
from mambo.mmio.features import read_features
from mambo.mmio.image import read_mask, read_plane, write_mask, write_plane
from mambo.mmio.manifest import read_dataset_manifest, write_manifest
from mambo.models.predictor import NoisePredictor
from mambo.models.unet import build_reference_net
from mambo.tasks.anomaly import DEFAULT_BUCKETS, build_anomaly_map, evaluate_buckets, lambda_sweep, renoise_denoise, tradeoff_crossing
from mambo.tasks.metrics import frechet_distance, iou, nearest_neighbors, overlap_sweep, seam_mse
from mambo.tasks.pipeline import StageModels, full_grid, generate_from_reference, generate_full, generate_global, generate_mammogram, generate_mid, super_resolve

UNTRAINED_STREAM = 100
MIX_STREAM = 101


def load_config(results: Namespace) -> RunConfig:
    """ Profile, then config file, then command-line overrides.
    """
    overrides = []
    if results.profile:
        overrides.append(('run', 'profile', results.profile))
    if results.seed is not None:
        overrides.append(('run', 'seed', str(results.seed)))
    if results.jobs is not None:
        overrides.append(('run', 'jobs', str(results.jobs)))
    for assignment in results.set or []:
        name, sep, value = assignment.partition('=')
        section, dot, key = name.strip().partition('.')
        if not sep or not dot:
            raise ConfigurationError("override '{}' is not of the form section.key=value".format(assignment))
        overrides.append((section, key, value))

    if results.config:
        return RunConfig.from_file(results.config, overrides)
    return RunConfig.from_text('', overrides)


def load_stage(config: RunConfig, stage: int, untrained: bool) -> NoisePredictor:
    """ Network of a stage: checkpoint from [models], or seeded untrained net.
    """
    path = config['models']['stage{}'.format(stage)]
    if path:
        net = load_predictor(path)
        if net.cfg.patch_side != config['geometry']['s']:
            raise ConfigurationError("stage {} checkpoint has patch side {}, geometry uses s = {}".format(stage, net.cfg.patch_side, config['geometry']['s']))
        return net
    if untrained:
        return build_reference_net(config.net_config(stage), derive_seed(config.seed, UNTRAINED_STREAM, stage))
    raise ConfigurationError("no checkpoint for stage {} (set models.stage{} or pass --untrained)".format(stage, stage))


def stage_models(config: RunConfig, untrained: bool, with_stage1: bool = True) -> StageModels:
    stage1 = load_stage(config, 1, untrained) if with_stage1 else None
    return StageModels(stage1, load_stage(config, 2, untrained), load_stage(config, 3, untrained), config.geometry(), config.schedule(), config.plan())


def output_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def print_records(records: list[dict], out: Optional[Path] = None, name: str = "metrics.jsonl") -> None:
    """ JSON lines on stdout (and in out/name).
    """
    lines = [json.dumps(record, sort_keys=True) for record in records]
    for line in lines:
        print(line)
    if out is not None:
        (out / name).write_text(''.join(line + "\n" for line in lines), encoding='utf-8')


def preprocess_one(path: str, out: str, s: int, erosion: Optional[int]) -> dict:
    """ Oriented, padded plane and its breast mask.
    """
    oriented = normalize_and_orient(read_plane(path))
    mask = breast_mask(oriented, erosion)
    padded = pad_to_multiple(oriented, s)
    padded_mask, _ = pad_plane(mask.mask, s)

    stem = Path(path).stem
    write_plane(Path(out) / "{}.png".format(stem), padded.plane)
    write_mask(Path(out) / "{}_mask.pgm".format(stem), padded_mask)

    return {'input': Path(path).name, 'area_px': mask.area_px, 'bbox': list(mask.bbox), **padded.record()}


def command_preprocess(results: Namespace, config: RunConfig) -> dict:
    out = output_dir(results.out)
    arguments = [(path, str(out), config['geometry']['s'], results.erosion) for path in results.inputs]
    records = Parallelizer(preprocess_one, arguments, config['run']['jobs']).run()
    print_records(records, out, "preprocess.jsonl")
    return {'images': records}


def training_images(results: Namespace, config: RunConfig) -> tuple[list[tuple[np.ndarray, np.ndarray]], list[str]]:
    """ Training planes with their breast masks, and the name of each source.
    """
    g = config.geometry()

    if results.synthetic:
        seeds = [derive_seed(config.seed, i) for i in range(results.synthetic)]
        return [(striped_phantom(g.N, seed), np.ones((g.N, g.N), dtype=bool)) for seed in seeds], ["striped:{}".format(i) for i in range(len(seeds))]

    if not results.data:
        raise ConfigurationError("train needs --data <manifest> or --synthetic <count>")

    records = read_dataset_manifest(results.data)
    if results.healthy_only:
        records = [record for record in records if record.label == 'healthy']
    if results.mix_with:
        synthetic: dict[str, list[str]] = {}
        for record in read_dataset_manifest(results.mix_with):
            synthetic.setdefault(record.label, []).append(record.path)
        records = mix_synthetic(records, synthetic, results.mix_fraction, derive_seed(config.seed, MIX_STREAM))
    selected = [record for record in records if record.split == 'train'] or records
    if not selected:
        raise ContractError("no training image left in {}".format(results.data))

    info("[TRAIN] > {} training image(s)".format(len(selected)))
    return [prepare_full(read_plane(record.path), g) for record in selected], [Path(record.path).name for record in selected]


def command_train(results: Namespace, config: RunConfig) -> dict:
    out = output_dir(results.out)
    if results.iterations is not None:
        config.set('train', 'max_iterations', str(results.iterations))

    stage = results.stage
    images, sources = training_images(results, config)
    data = TrainingSet(images, config.geometry(), stage)
    net = build_reference_net(config.net_config(stage), derive_seed(config.seed, stage))

    trainer = Trainer(net, config.schedule(), config.train_config(stage, results.init_from), out)
    checkpoint = trainer.run(data)

    return {'checkpoint': trainer.checkpoint_path.name, 'iteration': checkpoint.iteration, 'parameter_count': net.parameter_count(), 'images': sources}


def square_plane(path: str, side: int) -> np.ndarray:
    plane, _ = pad_plane(read_plane(path), side)
    return downscale(plane, side) if plane.shape[0] != side else plane


def generate_one(config_text: str, untrained: bool, seed: int, out: str, reference: Optional[str] = None) -> dict:
    """ One full mammogram written to `out`, conditioned on the contexts of
        `reference` when given.
    """
    config = RunConfig.from_text(config_text)
    if reference:
        models = stage_models(config, untrained, with_stage1=False)
        result = generate_from_reference(models, reference_contexts(square_plane(reference, models.geometry.N), models.geometry), seed)
    else:
        result = generate_mammogram(stage_models(config, untrained), seed)

    directory = output_dir(out)
    write_plane(directory / "global.png", result.global_ctx)
    write_plane(directory / "mid.png", result.mid)
    write_plane(directory / "full.png", result.full)
    record = {'seed': seed, 'files': ['global.png', 'mid.png', 'full.png']}
    if reference:
        record['reference'] = Path(reference).name
    return record


def command_generate(results: Namespace, config: RunConfig) -> dict:
    out = output_dir(results.out)
    text = config.serialize()

    if results.count == 1:
        arguments = [(text, results.untrained, config.seed, str(out), results.reference)]
    else:
        arguments = [(text, results.untrained, config.seed + i, str(out / "{:04d}".format(i)), results.reference) for i in range(results.count)]

    return {'images': Parallelizer(generate_one, arguments, config['run']['jobs']).run()}


def command_sr(results: Namespace, config: RunConfig) -> dict:
    out = output_dir(results.out)
    models = stage_models(config, results.untrained, with_stage1=False)
    result = super_resolve(models, read_plane(results.input), config.seed)

    write_plane(out / "global.png", result.global_ctx)
    write_plane(out / "mid.png", result.mid)
    write_plane(out / "full.png", result.full)
    return {'input': Path(results.input).name, 'scale': config.geometry().scale_factor()}


def anomaly_inputs(path: str, gt: Optional[str], s: int) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """ Image, breast mask and lesion mask at the stage-1 side s.
    """
    oriented = normalize_and_orient(read_plane(path))
    mask = breast_mask(oriented).mask

    image, _ = pad_plane(oriented.plane, s)
    region, _ = pad_plane(mask.astype(np.float32), s)

    truth = None
    if gt:
        truth = read_mask(gt).astype(np.float32)
        if oriented.was_flipped:
            truth = np.fliplr(truth)
        truth, _ = pad_plane(truth, s)
        truth = downscale(truth, s) >= 0.5

    return downscale(image, s), downscale(region, s) >= 0.5, truth


def command_anomaly(results: Namespace, config: RunConfig) -> dict:
    out = output_dir(results.out)
    if results.lam is not None:
        config.set('anomaly', 'lambda', str(results.lam))
    if results.gt and len(results.gt) != len(results.input):
        raise ConfigurationError("{} image(s) but {} ground-truth mask(s)".format(len(results.input), len(results.gt)))
    if results.buckets < 1:
        raise ConfigurationError("--buckets must be positive, got {}".format(results.buckets))

    cfg = config.anomaly_config()
    sched = config.schedule()
    stage1 = load_stage(config, 1, results.untrained)
    truths = results.gt or [None] * len(results.input)
    inputs = [anomaly_inputs(path, gt, config['geometry']['s']) for path, gt in zip(results.input, truths)]

    if results.lambda_sweep:
        if not results.gt:
            raise ConfigurationError("--lambda-sweep needs --gt")
        rows = lambda_sweep(inputs, stage1, sched, cfg, parse_int_list(results.lambda_sweep), config.seed)
        print_records([row.record() for row in rows], out, "sweep.jsonl")
        return {'lambdas': [row.lam for row in rows], 'crossing': tradeoff_crossing(rows)}

    single = len(results.input) == 1
    written = []
    for i, (path, (image, region, truth)) in enumerate(zip(results.input, inputs)):
        denoised = renoise_denoise(image, stage1, sched, cfg, derive_seed(config.seed, i))
        result = build_anomaly_map(image, denoised, region, cfg, truth)

        directory = out if single else output_dir(str(out / Path(path).stem))
        peak = result.map.max()
        write_plane(directory / "denoised.png", denoised)
        write_plane(directory / "map.png", result.map / peak if peak > 0 else result.map)
        write_mask(directory / "mask.png", result.mask)
        written.append((path, directory, result))

    buckets = []
    if results.gt:
        buckets = [row.record() for row in evaluate_buckets([result for _, _, result in written], results.buckets)]
        print_records(buckets, out, "buckets.jsonl")

    records = []
    for path, directory, result in written:
        (directory / "record.json").write_text(json.dumps(result.record(), sort_keys=True) + "\n", encoding='utf-8')
        records.append({'input': Path(path).name, **result.record()})

    return {'images': records, 'buckets': buckets}


def command_metrics(results: Namespace, config: RunConfig) -> dict:
    out = output_dir(results.out) if results.out else None

    if results.metric == 'iou':
        records = [{'metric': 'iou', 'value': iou(read_mask(results.a), read_mask(results.b))}]

    elif results.metric == 'fid':
        _, features_a = read_features(results.features_a)
        _, features_b = read_features(results.features_b)
        records = [{'metric': 'frechet_distance', 'value': frechet_distance(features_a, features_b)}]

    elif results.overlap_sweep:
        models = stage_models(config, results.untrained, with_stage1=results.input is None)
        g = models.geometry

        if results.input:
            reference = reference_contexts(square_plane(results.input, g.N), g)
            global_ctx, mid = reference.global_ctx, reference.mid
        else:
            global_ctx = generate_global(models, config.seed)
            mid = generate_mid(models, global_ctx, config.seed)

        def render(overlap: int):
            swept = replace(models, geometry=replace(g, overlap=overlap))
            return generate_full(swept, mid, global_ctx, config.seed), full_grid(swept.geometry)

        records = [{'metric': 'seam_mse', **row} for row in overlap_sweep(render, parse_int_list(results.overlap_sweep))]

    else:
        if not results.input:
            raise ConfigurationError("metrics seam needs --input or --overlap-sweep")
        plane = read_plane(results.input)
        grid = plan_patch_grid(plane.shape[0], config['geometry']['s'], config['geometry']['overlap'])
        records = [{'metric': 'seam_mse', 'overlap': grid.overlap, **seam_mse(plane, grid).record()}]

    print_records(records, out)
    return {'records': records}


def command_nn_check(results: Namespace, config: RunConfig) -> dict:
    query = read_plane(results.query)
    corpus = [read_plane(path) for path in results.corpus]
    neighbors = nearest_neighbors(query, corpus, results.topk)

    records = [{'rank': rank, 'path': Path(results.corpus[n.index]).name, 'similarity': n.similarity} for rank, n in enumerate(neighbors)]
    print_records(records, output_dir(results.out) if results.out else None, "neighbors.jsonl")
    return {'neighbors': records}


COMMANDS = {
    'preprocess': command_preprocess,
    'train': command_train,
    'generate': command_generate,
    'sr': command_sr,
    'anomaly': command_anomaly,
    'metrics': command_metrics,
    'nn-check': command_nn_check,
}


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(description='mambo: three-stage patch-conditioned diffusion for high-resolution mammograms')

    parser.add_argument('--version',
                        action='version',
                        version='%(prog)s {}'.format(__version__),
                        help="show the version number and exit")

    parser.add_argument('-v', '--verbose',
                        action='store_true',
                        help="increase output verbosity")

    parser.add_argument('--config',
                        metavar='file',
                        type=str,
                        help='path to a run configuration')

    parser.add_argument('--profile',
                        choices=['desk', 'paper', 'custom'],
                        help='configuration profile')

    parser.add_argument('--seed',
                        type=int,
                        help='root seed')

    parser.add_argument('--jobs',
                        type=int,
                        help='bound on parallel per-image jobs')

    parser.add_argument('--set',
                        action='append',
                        metavar='section.key=value',
                        help='override one configuration key')

    parser.add_argument('--show-time',
                        action='store_true',
                        help="show the execution time")

    subparsers = parser.add_subparsers(dest='command', required=True)

    preprocess = subparsers.add_parser('preprocess', help='normalize, orient, mask and pad raw images')
    preprocess.add_argument('inputs', nargs='+', help='PGM or PNG images')
    preprocess.add_argument('--out', required=True, help='output directory')
    preprocess.add_argument('--erosion', type=int, help='side of the erosion element in pixels')

    train = subparsers.add_parser('train', help='train one stage')
    train.add_argument('--stage', type=int, choices=[1, 2, 3], required=True, help='stage to train')
    train.add_argument('--data', help='dataset manifest (path<TAB>split<TAB>label)')
    train.add_argument('--synthetic', type=int, default=0, help='train on this many striped phantoms')
    train.add_argument('--healthy-only', action='store_true', help='keep healthy records only')
    train.add_argument('--init-from', help='checkpoint to resume or fine-tune from')
    train.add_argument('--iterations', type=int, help='iteration count to reach')
    train.add_argument('--mix-with', metavar='manifest', help='manifest of synthetic images replacing part of each label class')
    train.add_argument('--mix-fraction', type=float, default=0.5, help='share of each label class to replace (with --mix-with)')
    train.add_argument('--out', required=True, help='output directory')

    untrained_help = 'use seeded untrained networks for stages without a checkpoint'

    generate = subparsers.add_parser('generate', help='generate full mammograms')
    generate.add_argument('--count', type=int, default=1, help='number of images')
    generate.add_argument('--untrained', action='store_true', help=untrained_help)
    generate.add_argument('--reference', metavar='image', help='condition stages 2 and 3 on the contexts of a real image')
    generate.add_argument('--out', required=True, help='output directory')

    sr = subparsers.add_parser('sr', help='super-resolve a low-resolution image')
    sr.add_argument('--input', required=True, help='low-resolution image')
    sr.add_argument('--untrained', action='store_true', help=untrained_help)
    sr.add_argument('--out', required=True, help='output directory')

    anomaly = subparsers.add_parser('anomaly', help='anomaly segmentation by renoising')
    anomaly.add_argument('--input', nargs='+', required=True, help='images to analyze')
    anomaly.add_argument('--gt', nargs='+', help='ground-truth lesion masks, one per image')
    anomaly.add_argument('--buckets', type=int, default=DEFAULT_BUCKETS, help='lesion-size buckets of the IoU summary (with --gt)')
    anomaly.add_argument('--lambda', dest='lam', type=int, help='forward noising steps')
    anomaly.add_argument('--lambda-sweep', help='comma-separated lambdas (needs --gt)')
    anomaly.add_argument('--untrained', action='store_true', help=untrained_help)
    anomaly.add_argument('--out', required=True, help='output directory')

    metrics = subparsers.add_parser('metrics', help='seam MSE, IoU and Frechet distance')
    metrics.add_argument('metric', choices=['seam', 'iou', 'fid'], help='metric to compute')
    metrics.add_argument('--input', help='stitched plane (seam) or reference image (overlap sweep)')
    metrics.add_argument('--overlap-sweep', help='comma-separated overlaps to generate and compare')
    metrics.add_argument('--a', help='first mask (iou)')
    metrics.add_argument('--b', help='second mask (iou)')
    metrics.add_argument('--features-a', help='first feature file (fid)')
    metrics.add_argument('--features-b', help='second feature file (fid)')
    metrics.add_argument('--untrained', action='store_true', help=untrained_help)
    metrics.add_argument('--out', help='output directory')

    nn_check = subparsers.add_parser('nn-check', help='pixel-space nearest neighbours of a generated image')
    nn_check.add_argument('--query', required=True, help='query image')
    nn_check.add_argument('--corpus', nargs='+', required=True, help='training images')
    nn_check.add_argument('--topk', type=int, default=4, help='number of neighbours')
    nn_check.add_argument('--out', help='output directory')

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """ Main function.

    Returns
    -------
    int
        Exit status: 0, or the category code of the error.
    """
    # Start time
    start_time = time()

    results = build_parser().parse_args(argv)

    # Set the verbose level
    set_verbose(results.verbose)

    try:
        config = load_config(results)
        outputs = COMMANDS[results.command](results, config)
        out = getattr(results, 'out', None)
        if out:
            write_manifest(out, config, results.command, outputs)
    except MamboError as error:
        print(error.line(), file=sys.stderr)
        return error.category.value

    if results.show_time:
        print("# Time:", time() - start_time)

    return 0


if __name__ == '__main__':
    sys.exit(main())
