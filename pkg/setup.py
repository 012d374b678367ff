"""Builds the optional Cython kernels; the package falls back to numpy when absent."""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("OMNISEG_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "omniseg._kernels._ckernels",
                    ["src/omniseg/_kernels/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
