"""Build config for the optional compiled kernel backend.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so a failed compile downgrades to a warning
instead of aborting the install.
"""

import warnings

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the Cython kernels if possible; otherwise keep going."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # toolchain missing, cython absent, ...
            warnings.warn(
                "compiled kernels unavailable (%s); falling back to the "
                "pure-python backend" % exc
            )

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(
                "failed to build %s (%s); falling back to the pure-python "
                "backend" % (ext.name, exc)
            )


def extensions():
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    ext = Extension(
        "todkat.numerics._ckernels",
        ["src/todkat/numerics/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
