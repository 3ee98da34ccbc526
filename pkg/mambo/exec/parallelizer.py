"""
Parallelizer module

Bounded pool of worker processes for independent per-image work
(batch generation, preprocessing, anomaly maps). Results are returned in
submission order, whatever the completion order.

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

from logging import info
from multiprocessing import Process, Queue
from queue import Empty
from time import time
from typing import Any, Callable, Optional, Sequence

import torch

from mambo.exec.utils import KILL, send_signal_pids
from mambo.mmio.errors import MamboError

POLL_INTERVAL = 0.5


class Parallelizer:
    """ Helper to run a task on several inputs in parallel.

    Attributes
    ----------
    task : callable
        Top-level function (picklable), called as task(*arguments[i]).
    arguments : list of tuple
        Inputs, one tuple per job.
    jobs : int
        Maximum number of worker processes.
    processes : list of Process
        Worker processes.
    results : Queue of tuple
        (index, success flag, result or error) triples.
    """

    def __init__(self, task: Callable[..., Any], arguments: Sequence[tuple], jobs: int = 1) -> None:
        """ Initializer.

        Parameters
        ----------
        task : callable
            Function to run.
        arguments : list of tuple
            Inputs.
        jobs : int, optional
            Maximum number of worker processes.
        """
        self.task: Callable[..., Any] = task
        self.arguments: list[tuple] = list(arguments)
        self.jobs: int = max(1, min(jobs, len(self.arguments)))

        # Process information
        self.processes: list[Process] = []

        # Queues of pending jobs and results
        self.pending: Queue = Queue()
        self.results: Queue = Queue()

    def __getstate__(self):
        # Capture what is normally pickled
        state = self.__dict__.copy()

        # Remove unpicklable variable
        state['processes'] = None
        return state

    def work(self) -> None:
        """ Worker loop: run jobs until the sentinel.
        """
        torch.set_num_threads(1)

        while True:
            job = self.pending.get()
            if job is None:
                return

            index = job
            try:
                self.results.put((index, True, self.task(*self.arguments[index])))
            except MamboError as error:
                self.results.put((index, False, error))
            except Exception as error:
                self.results.put((index, False, MamboError("job {} failed: {}".format(index, error))))

    def run(self, timeout: Optional[float] = None) -> list[Any]:
        """ Run every job and return the results in submission order.

        Parameters
        ----------
        timeout : float, optional
            Time limit for the whole batch.

        Raises
        ------
        MamboError
            First error raised by a job (remaining jobs are stopped).
        """
        if not self.arguments:
            return []

        # Sequential run, no process
        if self.jobs == 1:
            return [self.task(*args) for args in self.arguments]

        for index in range(len(self.arguments)):
            self.pending.put(index)
        for _ in range(self.jobs):
            self.pending.put(None)

        # Create and start processes
        self.processes = [Process(target=self.work) for _ in range(self.jobs)]
        for proc in self.processes:
            proc.start()

        info("[PARALLELIZER] > {} job(s) on {} process(es)".format(len(self.arguments), self.jobs))
        return self.handle(timeout)

    def handle(self, timeout: Optional[float]) -> list[Any]:
        """ Collect the results, stop the workers on error, timeout or when a
            worker dies without reporting.
        """
        start_time = time()
        collected: dict[int, Any] = {}

        try:
            while len(collected) < len(self.arguments):
                remaining = None if timeout is None else timeout - (time() - start_time)
                if remaining is not None and remaining <= 0:
                    raise MamboError("parallel jobs exceeded the time limit of {} s".format(timeout))

                try:
                    index, success, value = self.results.get(timeout=POLL_INTERVAL if remaining is None else min(POLL_INTERVAL, remaining))
                except Empty:
                    self.check_workers()
                    continue

                if not success:
                    raise value
                collected[index] = value
        except MamboError:
            self.stop()
            raise

        for proc in self.processes:
            proc.join()

        return [collected[index] for index in range(len(self.arguments))]

    def check_workers(self) -> None:
        """ Raise if a worker exited abnormally.
        """
        for proc in self.processes:
            if proc.exitcode not in (None, 0):
                raise MamboError("worker {} died with exit code {}".format(proc.pid, proc.exitcode))

    def stop(self) -> None:
        """ Kill the workers.
        """
        send_signal_pids([proc.pid for proc in self.processes if proc.pid is not None], KILL)
