import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python fallback is selected at import
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("MFF_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "mff._ckernels",
                ["src/mff/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
        compiler_directives={"boundscheck": False, "wraparound": False, "cdivision": True},
    )

setup(ext_modules=ext_modules)
