import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

compile_args = ["-O3", "-ffast-math"]
if os.environ.get("LOBBYTE_NATIVE", "1") == "1":
    compile_args += ["-march=native"]

extensions = [
    Extension(
        "lobbyte.kernels._scan",
        ["src/lobbyte/kernels/_scan.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=compile_args,
        libraries=["m"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
