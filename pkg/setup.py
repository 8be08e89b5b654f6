"""Build script for the optional compiled convolution kernels.

The package is fully functional without the extension: ctsseg.kernels
falls back to a vectorised numpy implementation when the compiled lane
is absent (see CTS_KERNELS in ctsseg/kernels/__init__.py).
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "ctsseg.kernels._convcy",
                ["src/ctsseg/kernels/_convcy.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
else:
    ext_modules = []

setup(ext_modules=ext_modules)
