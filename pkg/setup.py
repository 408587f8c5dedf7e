"""Build script for the compiled convolution kernels.

The extension is optional: if Cython or a C compiler is unavailable the
package installs without it and falls back to the numpy reference kernels
at import time.
"""
import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("VESSELFORGE_NO_EXT", "") != "1":
    try:
        import numpy
        from Cython.Build import cythonize

        ext = Extension(
            "vesselforge.kernels._fast",
            ["src/vesselforge/kernels/_fast.pyx"],
            include_dirs=[numpy.get_include()],
            extra_compile_args=["-O3", "-fopenmp"],
            extra_link_args=["-fopenmp"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
        ext_modules = cythonize([ext], compiler_directives={"language_level": "3"})
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
