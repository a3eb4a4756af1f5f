"""Build the optional Cython pairwise-force extension.

The package works without it (a NumPy fallback is selected at import); the
extension is what makes N=4096 particle studies fast.
"""

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "kscontrol._pairwise",
                ["src/kscontrol/_pairwise.pyx"],
                extra_compile_args=["-O3", "-fopenmp"],
                extra_link_args=["-fopenmp"],
                include_dirs=[numpy.get_include()],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
