"""Build script for the optional compiled ADMM kernel.

The package works without the extension (a numpy fallback is selected at
import time); building it just makes per-home solves faster.
"""

import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "loadsteer._kernel._admm",
        ["src/loadsteer/_kernel/_admm.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
