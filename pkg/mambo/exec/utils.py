"""
Utils to Manage Processes, Verbosity and Seeds

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

import logging as log
import os
import signal
from typing import Sequence

import numpy as np
import torch

KILL = signal.SIGTERM if os.name == 'nt' else signal.SIGKILL

SEED_MODULUS = 2 ** 63


def send_signal_pids(pids: list[int], signal_to_send: signal.Signals):
    """ Send a signal to a list of processes
        (except the current process).

    Parameters
    ----------
    pids : list of int
        List of processes.
    signal_to_send : Signals
        Signal to send.
    """
    current_pid = os.getpid()

    for pid in pids:
        # Do not send a signal to the current process
        if pid == current_pid:
            continue

        try:
            os.kill(pid, signal_to_send)
        except OSError:
            pass


def set_verbose(verbose: bool) -> None:
    # Set the verbose level
    if verbose:
        log.basicConfig(format="%(message)s", level=log.DEBUG)
    else:
        log.basicConfig(format="%(message)s")


def is_verbose() -> bool:
    """ Whether DEBUG messages are emitted (drives the progress bars).
    """
    return log.getLogger().isEnabledFor(log.DEBUG)


def derive_seed(seed: int, *keys: int) -> int:
    """ Derive an independent child seed from a root seed and integer keys.

    Parameters
    ----------
    seed : int
        Root seed.
    keys : int
        Stream identifiers (iteration, patch index, image index, ...).

    Returns
    -------
    int
        Seed in [0, 2^63).
    """
    sequence = np.random.SeedSequence([seed % SEED_MODULUS, *[key % SEED_MODULUS for key in keys]])
    low, high = (int(word) for word in sequence.generate_state(2, dtype=np.uint32))
    return (low | (high << 32)) % SEED_MODULUS


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """ Numpy generator for the stream identified by `keys`.
    """
    return np.random.default_rng(derive_seed(seed, *keys))


def seed_everything(seed: int, threads: int = 1) -> None:
    """ Make torch deterministic for the current process.

    Parameters
    ----------
    seed : int
        Global seed.
    threads : int, optional
        Number of intra-op threads.
    """
    torch.manual_seed(seed % SEED_MODULUS)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True, warn_only=True)


def parse_int_list(text: str) -> Sequence[int]:
    """ Parse a comma-separated list of integers (e.g. an overlap sweep).
    """
    return [int(value) for value in text.replace(' ', '').split(',') if value]
