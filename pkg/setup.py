"""Build script for the optional compiled kernel.

The package works without the extension (a pure-Python twin is selected at
import time); the build therefore degrades gracefully when Cython or a C
compiler is unavailable.
"""

import os

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    if not os.path.exists("src/hybridmp/kernels/_speedups.pyx"):
        raise ImportError("no kernel source")
    ext_modules = cythonize(
        [
            Extension(
                "hybridmp.kernels._speedups",
                ["src/hybridmp/kernels/_speedups.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": 3},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
