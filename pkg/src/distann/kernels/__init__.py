"""Kernel backend selection.

``DISTANN_BACKEND=numpy`` forces the pure-numpy path; the default is the
numba path, falling back to numpy when numba cannot be imported. Both
backends stay importable as ``distann.kernels.numpy_kernels`` /
``distann.kernels.numba_kernels`` for side-by-side comparison.
"""

import logging
import os

from distann.kernels import numpy_kernels

log = logging.getLogger(__name__)

_requested = os.environ.get("DISTANN_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"DISTANN_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

_impl = numpy_kernels
BACKEND = "numpy"
if _requested == "numba":
    try:
        from distann.kernels import numba_kernels as _impl  # noqa: F811

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - depends on environment
        log.warning("numba unavailable, using numpy kernels")

l2_to_rows = _impl.l2_to_rows
assign_nearest = _impl.assign_nearest
centroid_sums = _impl.centroid_sums
sdc_rows = _impl.sdc_rows
greedy_search = _impl.greedy_search
robust_prune = _impl.robust_prune
build_vamana = _impl.build_vamana


def backend_module(name):
    """Return the kernel module for ``name`` ('numba' or 'numpy')."""
    if name == "numpy":
        return numpy_kernels
    from distann.kernels import numba_kernels

    return numba_kernels
