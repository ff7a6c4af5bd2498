"""Build script: compiles the optional Cython kernel extension.

If no C toolchain (or Cython) is available the package still installs;
exann._kernels falls back to the pure-numpy implementation at import time.
"""

import os

from setuptools import setup

EXT_FLAGS = ["-O3", "-ffp-contract=off"]  # no fast-math: kernels must stay IEEE-exact


def _extensions():
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    ext = Extension(
        "exann._kernels._core",
        ["src/exann/_kernels/_core.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=EXT_FLAGS,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize(
        [ext],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": False,
            "initializedcheck": False,
        },
    )


if __name__ == "__main__":
    if os.environ.get("EXANN_SKIP_EXT"):
        setup()
    else:
        setup(ext_modules=_extensions())
