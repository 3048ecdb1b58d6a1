"""Backend selection for the numeric hot kernels.

The active backend is chosen once at import time:

* ``ICONSIM_BACKEND=numpy`` forces the pure-numpy implementations.
* ``ICONSIM_BACKEND=numba`` requires numba and fails loudly without it.
* unset: numba when importable, numpy otherwise.

Both implementations share one calling convention and agree to float
rounding; ``benchmarks/bench_kernels.py`` compares their throughput.
"""

import os

from . import numpy_impl

_requested = os.environ.get("ICONSIM_BACKEND", "").strip().lower()
if _requested not in ("", "numpy", "numba"):
    raise ValueError(
        f"ICONSIM_BACKEND must be 'numpy' or 'numba', got {_requested!r}"
    )

if _requested == "numpy":
    _impl = numpy_impl
else:
    try:
        from . import numba_impl

        _impl = numba_impl
    except ImportError:
        if _requested == "numba":
            raise
        _impl = numpy_impl

BACKEND = _impl.BACKEND_NAME

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "numpy_impl",
]
