"""Build script: compiles the optional Cython kernel core.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile only costs speed.
"""

from setuptools import Extension, setup

try:
    import os

    import numpy
    from Cython.Build import cythonize

    rng_lib_dir = os.path.abspath(
        os.path.join(numpy.get_include(), "..", "..", "random", "lib")
    )
    extensions = cythonize(
        [
            Extension(
                "regimelq.kernels._core",
                ["src/regimelq/kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                libraries=["npyrandom"],
                library_dirs=[rng_lib_dir],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - build environment dependent
    print(f"regimelq: building without compiled kernels ({exc})")
    extensions = []

setup(ext_modules=extensions)
