"""Build script: compiles the optional fused-kernel extension.

The package works without the extension (pure-numpy kernels are selected at
import when `divemoe._kernels` is missing), so a failed compile only costs
speed, never functionality.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "divemoe._kernels",
                ["src/divemoe/_kernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    print(f"divemoe: skipping compiled kernels ({exc}); pure-numpy fallback will be used", file=sys.stderr)

setup(ext_modules=ext_modules)
