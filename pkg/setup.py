import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("FEDDUAP_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "fedduap.nnkernel._core",
                    ["src/fedduap/nnkernel/_core.pyx"],
                    include_dirs=[np.get_include()],
                    # no -ffast-math / -march=native: results must match the fallback
                    extra_compile_args=["-O2", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
