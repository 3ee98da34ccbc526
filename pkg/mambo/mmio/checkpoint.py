"""
Checkpoint Module

Self-describing container for trained predictors.

Layout (little-endian):
- magic b"MAMBOCKPT\\0" and one version byte,
- header length as uint64,
- JSON header: network config, schedule metadata, stage, iteration,
  optimizer step and the named-tensor index (shape, byte offset),
- tensor data as float32.

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
import struct
from dataclasses import dataclass, field
from logging import info
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from mambo.mmio.errors import ConfigurationError
from mambo.models.unet import NetConfig, UNetPredictor, build_reference_net

MAGIC = b"MAMBOCKPT\0"
VERSION = 1

PARAMETER_PREFIX = "param/"
EMA_PREFIX = "ema/"
EXP_AVG_PREFIX = "adam.exp_avg/"
EXP_AVG_SQ_PREFIX = "adam.exp_avg_sq/"


@dataclass
class Checkpoint:
    """ Decoded checkpoint.

    Attributes
    ----------
    net_config : NetConfig
        Network hyperparameters.
    schedule : dict
        Schedule metadata.
    stage : int
        Pipeline stage the network was trained for.
    iteration : int
        Completed training iterations.
    tensors : dict of str to ndarray
        Named tensors (parameters, EMA shadows, optimizer moments).
    optimizer_step : int
        Adam step counter.
    extra : dict
        Free-form metadata (parameter count, training config).
    """
    net_config: NetConfig
    schedule: dict
    stage: int
    iteration: int
    tensors: dict[str, np.ndarray]
    optimizer_step: int = 0
    extra: dict = field(default_factory=dict)

    def with_prefix(self, prefix: str) -> dict[str, np.ndarray]:
        return {name[len(prefix):]: value for name, value in self.tensors.items() if name.startswith(prefix)}

    @property
    def parameters(self) -> dict[str, np.ndarray]:
        return self.with_prefix(PARAMETER_PREFIX)

    @property
    def has_ema(self) -> bool:
        return any(name.startswith(EMA_PREFIX) for name in self.tensors)


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    """ Write a checkpoint atomically (temporary file then rename).
    """
    index, chunks, offset = [], [], 0
    for name in sorted(checkpoint.tensors):
        data = np.ascontiguousarray(checkpoint.tensors[name], dtype='<f4')
        index.append({'name': name, 'shape': list(data.shape), 'offset': offset})
        chunks.append(data.tobytes())
        offset += data.nbytes

    header = json.dumps({
        'net': checkpoint.net_config.to_dict(),
        'schedule': checkpoint.schedule,
        'stage': checkpoint.stage,
        'iteration': checkpoint.iteration,
        'optimizer_step': checkpoint.optimizer_step,
        'extra': checkpoint.extra,
        'tensors': index,
    }, sort_keys=True).encode('utf-8')

    path = Path(path)
    tmp = path.with_name(path.name + '.tmp')
    with open(tmp, 'wb') as fp:
        fp.write(MAGIC)
        fp.write(bytes([VERSION]))
        fp.write(struct.pack('<Q', len(header)))
        fp.write(header)
        for chunk in chunks:
            fp.write(chunk)
    tmp.replace(path)

    info("[CHECKPOINT] > saved {} (stage {}, iteration {})".format(path, checkpoint.stage, checkpoint.iteration))


def load_checkpoint(path: str | Path) -> Checkpoint:
    """ Read a checkpoint.

    Raises
    ------
    ConfigurationError
        Missing file, bad magic, unsupported version or truncated data.
    """
    try:
        with open(path, 'rb') as fp:
            content = fp.read()
    except OSError as error:
        raise ConfigurationError("cannot read checkpoint {} ({})".format(path, error))

    if not content.startswith(MAGIC):
        raise ConfigurationError("{} is not a checkpoint (bad magic)".format(path))

    position = len(MAGIC)
    version = content[position]
    if version != VERSION:
        raise ConfigurationError("{}: unsupported checkpoint version {}".format(path, version))

    (length,) = struct.unpack_from('<Q', content, position + 1)
    start = position + 9
    header = json.loads(content[start:start + length].decode('utf-8'))
    data = memoryview(content)[start + length:]

    tensors = {}
    for entry in header['tensors']:
        count = int(np.prod(entry['shape'], dtype=np.int64))
        if entry['offset'] + 4 * count > len(data):
            raise ConfigurationError("{}: truncated tensor '{}'".format(path, entry['name']))
        values = np.frombuffer(data, dtype='<f4', count=count, offset=entry['offset'])
        tensors[entry['name']] = values.reshape(entry['shape']).astype(np.float32)

    return Checkpoint(NetConfig.from_dict(header['net']), header['schedule'], header['stage'], header['iteration'], tensors, header.get('optimizer_step', 0), header.get('extra', {}))


def load_parameters(net: UNetPredictor, parameters: dict[str, np.ndarray]) -> None:
    """ Copy named parameters into a network.

    Raises
    ------
    ConfigurationError
        Missing tensor or shape mismatch (both shapes named).
    """
    state = net.module.state_dict()
    for name, target in state.items():
        if name not in parameters:
            raise ConfigurationError("checkpoint lacks tensor '{}'".format(name))
        source = parameters[name]
        if tuple(source.shape) != tuple(target.shape):
            raise ConfigurationError("tensor '{}': checkpoint shape {} vs network shape {}".format(name, tuple(source.shape), tuple(target.shape)))

    net.module.load_state_dict({name: torch.from_numpy(np.array(parameters[name])) for name in state})


def load_predictor(path: str | Path, use_ema: bool = True) -> UNetPredictor:
    """ Rebuild the network stored in a checkpoint.

    Parameters
    ----------
    path : str or Path
        Checkpoint file.
    use_ema : bool, optional
        Prefer the EMA weights when present.
    """
    checkpoint = load_checkpoint(path)
    net = build_reference_net(checkpoint.net_config, seed=0)
    load_parameters(net, checkpoint.with_prefix(EMA_PREFIX) if use_ema and checkpoint.has_ema else checkpoint.parameters)
    net.train(False)
    return net


def optimizer_tensors(optimizer: torch.optim.Optimizer, net: UNetPredictor) -> tuple[dict[str, np.ndarray], int]:
    """ Adam moments keyed by parameter name, and the step counter.
    """
    names = {id(parameter): name for name, parameter in net.module.named_parameters()}
    tensors, step = {}, 0
    for group in optimizer.param_groups:
        for parameter in group['params']:
            state = optimizer.state.get(parameter, {})
            if not state:
                continue
            name = names[id(parameter)]
            tensors[EXP_AVG_PREFIX + name] = state['exp_avg'].detach().numpy().copy()
            tensors[EXP_AVG_SQ_PREFIX + name] = state['exp_avg_sq'].detach().numpy().copy()
            step = int(state['step'])
    return tensors, step


def restore_optimizer(optimizer: torch.optim.Optimizer, net: UNetPredictor, checkpoint: Checkpoint) -> None:
    """ Restore Adam moments saved by `optimizer_tensors`.
    """
    exp_avg, exp_avg_sq = checkpoint.with_prefix(EXP_AVG_PREFIX), checkpoint.with_prefix(EXP_AVG_SQ_PREFIX)
    if not exp_avg:
        return

    for name, parameter in net.module.named_parameters():
        if name not in exp_avg:
            continue
        optimizer.state[parameter] = {
            'step': torch.tensor(float(checkpoint.optimizer_step)),
            'exp_avg': torch.from_numpy(np.array(exp_avg[name])),
            'exp_avg_sq': torch.from_numpy(np.array(exp_avg_sq[name])),
        }


def net_tensors(net: UNetPredictor, ema: Optional[dict[str, torch.Tensor]] = None) -> dict[str, np.ndarray]:
    """ Parameters (and EMA shadows) keyed for a checkpoint.
    """
    tensors = {PARAMETER_PREFIX + name: value.detach().numpy().copy() for name, value in net.module.state_dict().items()}
    if ema is not None:
        tensors.update({EMA_PREFIX + name: value.detach().numpy().copy() for name, value in ema.items()})
    return tensors
