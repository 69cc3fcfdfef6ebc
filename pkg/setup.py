import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("LGDEA_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "lgdea._kernels._ckernels",
                ["src/lgdea/_kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
