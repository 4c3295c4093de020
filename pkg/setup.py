import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    USE_CYTHON = True
except ImportError:
    USE_CYTHON = False

ext = Extension(
    "qdqkd._kernels._ckernels",
    ["src/qdqkd/_kernels/_ckernels.pyx"],
    include_dirs=[np.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    extra_compile_args=["-O3"],
)

# without Cython the package still installs; the numpy fallback is used
setup(ext_modules=cythonize([ext], compiler_directives={"language_level": "3"}) if USE_CYTHON else [])
