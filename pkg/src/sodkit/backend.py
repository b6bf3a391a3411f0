"""Kernel backend selection.

The compiled extension is preferred. Setting the environment variable
``SODKIT_BACKEND=python`` before import forces the numpy fallback.
"""
import logging
import os

from . import _fallback

log = logging.getLogger(__name__)

_requested = os.environ.get("SODKIT_BACKEND", "auto").lower()

_compiled = None
if _requested != "python":
    try:
        from . import _kernels as _compiled  # type: ignore[no-redef]
    except ImportError:  # extension not built
        if _requested == "compiled":
            raise
        log.debug("compiled kernels unavailable, using numpy fallback")


class _Mixed:
    """Compiled convolution, BLAS-backed DFT.

    The DFT is a pair of dense matrix products, which BLAS runs faster than
    the compiled loops (see benchmarks/bench_kernels.py).
    """

    conv2d_valid = staticmethod(_compiled.conv2d_valid) if _compiled is not None else None
    dft2_planes = staticmethod(_fallback.dft2_planes)


kernels = _Mixed if _compiled is not None else _fallback
name = "compiled" if _compiled is not None else "python"


def get(which: str):
    """Return a specific kernel module ("compiled" or "python")."""
    if which == "python":
        return _fallback
    if which == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {which!r}")


def available() -> list:
    return ["compiled", "python"] if _compiled is not None else ["python"]
