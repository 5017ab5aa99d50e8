"""Build the optional Cython kernels.

If Cython or a C compiler is unavailable the package still installs and
``ecl.kernels`` falls back to the pure-NumPy implementations.
"""
import os

import numpy as np
from setuptools import setup

ext_modules = []
if not os.environ.get("ECL_NO_EXT"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "ecl._ckernels",
                    ["src/ecl/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    optional=True,
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except Exception as exc:  # pragma: no cover - build environment dependent
        print(f"warning: building without compiled kernels ({exc})")
        ext_modules = []

setup(ext_modules=ext_modules)
