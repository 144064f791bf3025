"""Build hook for the optional compiled kernels.

Without Cython (or a compiler) the package installs pure-Python and
``lapar.kernels`` falls back to numpy.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("LAPAR_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "lapar._ckernels",
                    ["src/lapar/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
