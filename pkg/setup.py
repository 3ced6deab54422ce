"""Build shim for the optional compiled kernels.

The package is pure Python except for goodlab/_kernels/_hoppairs.pyx, which
accelerates the bounded-BFS pair enumeration used during training. The build
is marked optional: if Cython or a C compiler is missing, installation
proceeds and the package falls back to the numpy implementation at import.
"""

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    extensions = cythonize(
        [
            Extension(
                "goodlab._kernels._hoppairs",
                ["src/goodlab/_kernels/_hoppairs.pyx"],
                include_dirs=[numpy.get_include()],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
