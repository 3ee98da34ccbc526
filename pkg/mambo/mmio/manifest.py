"""
Manifest Module

Run manifests (`manifest.json`) and dataset manifests
(`path<TAB>split<TAB>label` lines).

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
from importlib import metadata
from pathlib import Path
from typing import Any, Optional, Sequence

from mambo.diffusion.schedule import PAPER_BETA_MAX, PAPER_BETA_MIN, PAPER_TIMESTEPS, build_linear_schedule
from mambo.imaging.dataset import DatasetRecord
from mambo.mmio.config import RunConfig
from mambo.mmio.errors import ContractError

MANIFEST_NAME = "manifest.json"
PACKAGES = ('numpy', 'torch', 'scipy', 'Pillow', 'tqdm')


def package_versions() -> dict[str, Optional[str]]:
    versions: dict[str, Optional[str]] = {'mambo': __version__}
    for package in PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = None
    return versions


def run_manifest(config: RunConfig, command: str, extra: Optional[dict[str, Any]] = None) -> dict[str, Any]:
    """ Resolved config, seed, versions and schedule endpoints (no timestamps).
    """
    reference = build_linear_schedule(PAPER_TIMESTEPS, PAPER_BETA_MIN, PAPER_BETA_MAX)
    return {
        'command': command,
        'seed': config.seed,
        'config': config.to_json(),
        'schedule': {
            'run': config.schedule().metadata(),
            'reference_alpha_bar_T': float(reference.alpha_bar[-1]),
        },
        'versions': package_versions(),
        'outputs': extra or {},
    }


def write_manifest(out_dir: str | Path, config: RunConfig, command: str, extra: Optional[dict[str, Any]] = None) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text(json.dumps(run_manifest(config, command, extra), indent=2, sort_keys=True) + "\n", encoding='utf-8')
    return path


def read_dataset_manifest(filename: str | Path) -> list[DatasetRecord]:
    """ Parse `path<TAB>split<TAB>label` lines; relative paths are resolved
        against the manifest directory.

    Raises
    ------
    ContractError
        Malformed line or unknown label.
    """
    base = Path(filename).parent
    records = []

    try:
        lines = Path(filename).read_text(encoding='utf-8').splitlines()
    except OSError as error:
        raise ContractError("cannot read dataset manifest {} ({})".format(filename, error))

    for number, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith('#'):
            continue
        fields = line.rstrip('\n').split('\t')
        if len(fields) != 3:
            raise ContractError("{}:{}: expected 'path<TAB>split<TAB>label'".format(filename, number))
        path = Path(fields[0])
        records.append(DatasetRecord(str(path if path.is_absolute() else base / path), fields[1], fields[2]))

    return records


def write_dataset_manifest(filename: str | Path, records: Sequence[DatasetRecord]) -> None:
    Path(filename).write_text(''.join("{}\t{}\t{}\n".format(r.path, r.split, r.label) for r in records), encoding='utf-8')
