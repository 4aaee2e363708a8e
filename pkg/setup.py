"""Build the optional Cython kernels.

If Cython or a C compiler is missing, the package still installs and runs on
the pure-Python fallback.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("QDIT_NO_EXTENSION", "") in ("", "0"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "qdit._kernels",
                    ["src/qdit/_kernels.pyx"],
                    include_dirs=[np.get_include(), "src/qdit"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    # no FMA contraction: keeps results bit-identical to the fallback
                    extra_compile_args=["-O3", "-march=native", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
