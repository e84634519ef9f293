"""Build the optional Cython kernels.

If Cython or a C compiler is missing the package still installs and the
runtime falls back to the numpy kernels.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("WRENKIT_NO_EXT", "") in ("", "0"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "wrenkit.kernels._core",
                    ["src/wrenkit/kernels/_core.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
