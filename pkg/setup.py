#!/usr/bin/env python3

"""
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

import sys

from cx_Freeze import setup, Executable

# cx_Freeze walks the torch import graph recursively while freezing
sys.setrecursionlimit(10000)


setup(
    name="mambo",
    version="1.0",
    description="mambo - Three-stage patch-conditioned diffusion for high-resolution mammograms",
    author="mambo contributors",
    packages=["mambo", "mambo.exec", "mambo.mmio", "mambo.models", "mambo.diffusion", "mambo.imaging", "mambo.tasks"],
    install_requires=["numpy", "scipy", "torch", "Pillow", "tqdm"],
    options={"build_exe": {"excludes": ["tensorflow"]}},
    executables=[Executable("mambo/__main__.py", target_name="mambo")]
)
