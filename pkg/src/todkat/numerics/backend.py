"""Kernel backend selection.

Two interchangeable kernel modules exist: ``_ckernels`` (Cython + BLAS)
and ``_pykernels`` (numpy). The active one is chosen once at import via
the TODKAT_BACKEND environment variable:

    auto    compiled if importable, else python (default)
    cython  compiled, raise if unavailable
    python  numpy fallback
"""

import os

from . import _pykernels

_REQUESTED = os.environ.get("TODKAT_BACKEND", "auto").strip().lower()

if _REQUESTED not in ("auto", "cython", "python"):
    raise RuntimeError(
        "TODKAT_BACKEND must be one of auto/cython/python, got %r"
        % _REQUESTED
    )

kernels = _pykernels
if _REQUESTED in ("auto", "cython"):
    try:
        from . import _ckernels

        kernels = _ckernels
    except ImportError:
        if _REQUESTED == "cython":
            raise RuntimeError(
                "TODKAT_BACKEND=cython but the compiled kernels are not "
                "built; reinstall with a C toolchain or use python/auto"
            )


def backend_name():
    return kernels.NAME


def get_kernels(name=None):
    """Fetch a kernel module by name, defaulting to the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError("unknown backend %r" % name)
