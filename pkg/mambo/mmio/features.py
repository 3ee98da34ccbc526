"""
Feature File Module

Per-image feature vectors computed by an external network, for the
Frechet distance plug-in.

Layout (little-endian): uint32 record count, uint32 dimension, then per
record a uint16 name length, the UTF-8 name and `dimension` float32 values.

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

import struct
from pathlib import Path

import numpy as np

from mambo.mmio.errors import ContractError


def write_features(path: str | Path, names: list[str], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype='<f4')
    if vectors.ndim != 2 or vectors.shape[0] != len(names):
        raise ContractError("{} name(s) for a feature array of shape {}".format(len(names), vectors.shape))

    with open(path, 'wb') as fp:
        fp.write(struct.pack('<II', vectors.shape[0], vectors.shape[1]))
        for name, vector in zip(names, vectors):
            encoded = name.encode('utf-8')
            fp.write(struct.pack('<H', len(encoded)))
            fp.write(encoded)
            fp.write(vector.tobytes())


def read_features(path: str | Path) -> tuple[list[str], np.ndarray]:
    """ Read a feature file.

    Returns
    -------
    tuple of list of str and ndarray
        Names and a (count, dimension) float64 array.

    Raises
    ------
    ContractError
        Unreadable or truncated file.
    """
    try:
        content = Path(path).read_bytes()
    except OSError as error:
        raise ContractError("cannot read feature file {} ({})".format(path, error))

    try:
        count, dimension = struct.unpack_from('<II', content, 0)
        position = 8
        names, vectors = [], np.empty((count, dimension), dtype=np.float64)
        for i in range(count):
            (length,) = struct.unpack_from('<H', content, position)
            position += 2
            names.append(content[position:position + length].decode('utf-8'))
            position += length
            vectors[i] = np.frombuffer(content, dtype='<f4', count=dimension, offset=position)
            position += 4 * dimension
    except (struct.error, ValueError, UnicodeDecodeError) as error:
        raise ContractError("{}: malformed feature file ({})".format(path, error))

    return names, vectors
