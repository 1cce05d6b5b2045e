import os

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # fallback kernels are used at runtime
    cythonize = None

ext_modules = []
if cythonize is not None and os.environ.get("SPINAMP_NO_EXT", "") in ("", "0"):
    ext_modules = cythonize(
        [
            Extension(
                "spinamp._kernels._bloch",
                ["src/spinamp/_kernels/_bloch.pyx"],
                # keep a*b+c unfused so results match the Python fallback bitwise
                extra_compile_args=["-O2", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
