"""Build script: compiles the optional ODE core extension.

The package works without the extension (a pure-Python kernel is selected
at import time), so a missing Cython toolchain only costs speed.
"""

from setuptools import Extension, setup

extensions = []
try:
    import numpy as np
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "glucoshield.physiology._ode_core",
                ["src/glucoshield/physiology/_ode_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=extensions)
