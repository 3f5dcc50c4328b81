"""Build script: compiles the optional Cython DES kernel.

The package works without the extension; servesim.syssim falls back to the
pure-Python kernel when the compiled module is missing.
"""
from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "servesim.syssim._ckernel",
                ["src/servesim/syssim/_ckernel.pyx"],
                language="c++",
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
