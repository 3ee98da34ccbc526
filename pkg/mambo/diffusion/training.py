"""
Training Module

Training with data channel conditioning: only channel 1 is noised and
scored, the conditioning channels are passed through unchanged.

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
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
from tqdm import tqdm

from mambo.diffusion.schedule import NoiseSchedule
from mambo.exec.utils import is_verbose, rng_for, seed_everything
from mambo.imaging.dataset import TrainingTriple
from mambo.mmio.checkpoint import Checkpoint, load_checkpoint, load_parameters, net_tensors, optimizer_tensors, restore_optimizer, save_checkpoint
from mambo.mmio.errors import ConfigurationError, ContractError
from mambo.models.predictor import NoisePredictor
from mambo.models.unet import UNetPredictor

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

STAGE_ARITIES = {1: (1,), 2: (2, 3), 3: (3,)}


@dataclass
class TrainConfig:
    """ Training hyperparameters.

    Attributes
    ----------
    learning_rate : float
        Adam learning rate.
    batch_size : int
        Samples per iteration.
    max_iterations : int
        Iteration count to reach.
    seed : int
        Root seed of the data order and noise draws.
    stage : int
        1, 2 or 3.
    init_from : str, optional
        Checkpoint to resume (same stage) or fine-tune (other stage) from.
    checkpoint_every : int
        Period of intermediate checkpoints (0 disables them).
    grad_clip : float
        Gradient-norm clipping threshold (0 disables it).
    ema_decay : float
        Decay of the weight EMA (0 disables it).
    """
    learning_rate: float = 5e-4
    batch_size: int = 8
    max_iterations: int = 2000
    seed: int = 0
    stage: int = 3
    init_from: Optional[str] = None
    checkpoint_every: int = 500
    grad_clip: float = 0.0
    ema_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive, got {}".format(self.learning_rate))
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be at least 1, got {}".format(self.batch_size))
        if self.stage not in STAGE_ARITIES:
            raise ConfigurationError("unknown stage {}".format(self.stage))
        if not 0 <= self.ema_decay < 1:
            raise ConfigurationError("EMA decay must lie in [0, 1), got {}".format(self.ema_decay))


class SampleSource(Protocol):
    """ Anything that draws training batches (see TrainingSet).
    """

    def draw(self, rng: np.random.Generator, batch_size: int) -> list[TrainingTriple]:
        ...


def noisy_batch(batch: Sequence[TrainingTriple], arity: int, sched: NoiseSchedule, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ Noise channel 1 of every sample.

    Note
    ----
    Draw order: timesteps (one per sample, uniform in 1..T), then noise.

    Returns
    -------
    tuple of ndarray
        Stacks (B, arity, s, s), timesteps (B,), noise (B, s, s).
    """
    if not batch:
        raise ContractError("empty training batch")

    stacks = np.stack([sample.stack(arity) for sample in batch]).astype(np.float64)
    t = rng.integers(1, sched.T + 1, size=len(batch))
    eps = rng.standard_normal(stacks[:, 0].shape)

    a = np.sqrt(sched.alpha_bar[t])[:, None, None]
    b = np.sqrt(1.0 - sched.alpha_bar[t])[:, None, None]
    stacks[:, 0] = a * stacks[:, 0] + b * eps

    return stacks, t, eps


def denoising_loss(net: NoisePredictor, stacks: np.ndarray, t: np.ndarray, eps: np.ndarray) -> torch.Tensor:
    """ Mean squared error between the drawn noise and the prediction of channel 1.
    """
    x = torch.as_tensor(stacks, dtype=net.dtype)
    prediction = net.forward(x, torch.as_tensor(t, dtype=torch.long))[:, 0]
    target = torch.as_tensor(eps, dtype=prediction.dtype)
    return torch.mean((prediction - target) ** 2)


def train_step(net: NoisePredictor, batch: Sequence[TrainingTriple], sched: NoiseSchedule, rng: np.random.Generator, optimizer: Optional[torch.optim.Optimizer] = None, grad_clip: float = 0.0) -> float:
    """ One training iteration.

    Parameters
    ----------
    net : NoisePredictor
        Predictor, its arity selects the channels used.
    batch : list of TrainingTriple
        Clean samples.
    sched : NoiseSchedule
        Schedule.
    rng : Generator
        Source of timesteps and noise.
    optimizer : Optimizer, optional
        Adam optimizer over net.parameters(), no update when omitted.
    grad_clip : float, optional
        Gradient-norm clipping threshold (0 disables it).

    Returns
    -------
    float
        Loss before the update.

    Raises
    ------
    ConfigurationError
        Arity mismatch between the predictor and the samples.
    """
    stacks, t, eps = noisy_batch(batch, net.arity, sched, rng)

    if optimizer is None or not net.parameters():
        with torch.no_grad():
            return float(denoising_loss(net, stacks, t, eps))

    optimizer.zero_grad()
    loss = denoising_loss(net, stacks, t, eps)
    loss.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(net.parameters(), grad_clip)
    optimizer.step()

    return float(loss.detach())


def make_optimizer(net: NoisePredictor, learning_rate: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(net.parameters(), lr=learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)


class Trainer:
    """ Training loop of one stage.

    Attributes
    ----------
    net : UNetPredictor
        Network being trained.
    sched : NoiseSchedule
        Schedule.
    cfg : TrainConfig
        Hyperparameters.
    out_dir : Path
        Directory of the checkpoints and of train.log.
    iteration : int
        Completed iterations.
    """

    def __init__(self, net: UNetPredictor, sched: NoiseSchedule, cfg: TrainConfig, out_dir: str | Path) -> None:
        """ Initializer.

        Note
        ----
        With `cfg.init_from`, a checkpoint of the same stage is resumed
        (parameters, optimizer moments and iteration); a checkpoint of
        another stage only provides initial parameters.

        Raises
        ------
        ConfigurationError
            Stage/arity mismatch or incompatible checkpoint shapes.
        """
        if net.arity not in STAGE_ARITIES[cfg.stage]:
            raise ConfigurationError("stage {} expects a predictor with {} channel(s), got {}".format(cfg.stage, ' or '.join(map(str, STAGE_ARITIES[cfg.stage])), net.arity))

        self.net: UNetPredictor = net
        self.sched: NoiseSchedule = sched
        self.cfg: TrainConfig = cfg
        self.out_dir: Path = Path(out_dir)
        self.iteration: int = 0

        seed_everything(cfg.seed)
        self.optimizer = make_optimizer(net, cfg.learning_rate)
        self.ema: Optional[dict[str, torch.Tensor]] = None
        if cfg.ema_decay > 0:
            self.ema = {name: value.detach().clone() for name, value in net.module.state_dict().items()}

        if cfg.init_from:
            self._initialize(load_checkpoint(cfg.init_from))

    def _initialize(self, checkpoint: Checkpoint) -> None:
        load_parameters(self.net, checkpoint.parameters)

        if checkpoint.stage == self.cfg.stage:
            restore_optimizer(self.optimizer, self.net, checkpoint)
            self.iteration = checkpoint.iteration
            if self.ema is not None and checkpoint.has_ema:
                self.ema = {name: torch.from_numpy(np.array(value)) for name, value in checkpoint.with_prefix('ema/').items()}
            info("[TRAIN] > resuming stage {} at iteration {}".format(self.cfg.stage, self.iteration))
        else:
            if self.ema is not None:
                self.ema = {name: value.detach().clone() for name, value in self.net.module.state_dict().items()}
            info("[TRAIN] > fine-tuning stage {} from stage {} weights".format(self.cfg.stage, checkpoint.stage))

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / "stage{}.ckpt".format(self.cfg.stage)

    def step(self, data: SampleSource) -> float:
        """ Run iteration `self.iteration` and advance the counter.
        """
        rng = rng_for(self.cfg.seed, self.iteration)
        batch = data.draw(rng, self.cfg.batch_size)

        self.net.train(True)
        loss = train_step(self.net, batch, self.sched, rng, self.optimizer, self.cfg.grad_clip)
        self.iteration += 1

        if self.ema is not None:
            with torch.no_grad():
                for name, value in self.net.module.state_dict().items():
                    self.ema[name].mul_(self.cfg.ema_decay).add_(value, alpha=1.0 - self.cfg.ema_decay)

        return loss

    def save(self) -> Checkpoint:
        tensors = net_tensors(self.net, self.ema)
        moments, step = optimizer_tensors(self.optimizer, self.net)
        tensors.update(moments)

        checkpoint = Checkpoint(self.net.cfg, self.sched.metadata(), self.cfg.stage, self.iteration, tensors, step,
                                {'parameter_count': self.net.parameter_count(), 'train': asdict(self.cfg)})
        save_checkpoint(self.checkpoint_path, checkpoint)
        return checkpoint

    def run(self, data: SampleSource) -> Checkpoint:
        """ Train up to cfg.max_iterations, logging `iteration<TAB>loss`
            lines to train.log.
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        start = self.iteration

        with open(self.out_dir / "train.log", 'a', encoding='utf-8') as log_file:
            for _ in tqdm(range(start, self.cfg.max_iterations), desc="stage {}".format(self.cfg.stage), disable=not is_verbose()):
                loss = self.step(data)
                log_file.write("{}\t{:.8g}\n".format(self.iteration, loss))

                if self.cfg.checkpoint_every and self.iteration % self.cfg.checkpoint_every == 0 and self.iteration < self.cfg.max_iterations:
                    log_file.flush()
                    self.save()

        info("[TRAIN] > stage {}: {} iteration(s) done".format(self.cfg.stage, self.iteration - start))
        return self.save()


def train_loop(cfg: TrainConfig, data: SampleSource, sched: NoiseSchedule, net: UNetPredictor, out_dir: str | Path) -> Checkpoint:
    """ Train a network for one stage and return the final checkpoint.
    """
    return Trainer(net, sched, cfg, out_dir).run(data)
