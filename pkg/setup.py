"""Build the optional compiled kernels; the package works without them."""

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "fabfix._ckernels",
                ["src/fabfix/_ckernels.pyx"],
                include_dirs=[np.get_include(), "src/fabfix"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3", "-march=native"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    print("Cython/numpy not available; installing pure-Python kernels only")

setup(ext_modules=ext_modules)
