import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

ext = Extension(
    "gsmaps._core",
    ["src/gsmaps/_core.pyx"],
    include_dirs=[np.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    # no fast-math and no FMA contraction: both would change rounding vs the fallback
    extra_compile_args=["-O3", "-fopenmp", "-ffp-contract=off"],
    extra_link_args=["-fopenmp"],
)

setup(ext_modules=cythonize([ext], language_level=3))
