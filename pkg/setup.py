"""Build the optional compiled render core.

The extension is a speedup only: if it fails to build (no compiler, no
Cython), the install still succeeds and srfkit.render falls back to the
pure-NumPy kernels at import time.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "srfkit.render._kernels",
                ["src/srfkit/render/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    print("cython/numpy not available at build time; skipping compiled kernels")

setup(ext_modules=ext_modules)
