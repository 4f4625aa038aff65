from setuptools import setup
from setuptools.extension import Extension

import numpy
from Cython.Build import cythonize

# The compiled kernels are an optimisation, not a hard requirement: the
# package falls back to the NumPy implementations in saecmse._kernels_py
# when the extension is unavailable at import time.
extensions = [
    Extension(
        "saecmse._core",
        sources=["src/saecmse/_core.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
