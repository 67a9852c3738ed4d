"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time from the ``STATFLOW_BACKEND``
environment variable:

* ``auto`` (default) -- use numba if it imports, else fall back to numpy.
* ``numba``          -- require the numba implementation.
* ``numpy``          -- force the pure-numpy implementation.

Both implementations expose the same functions and must agree within
floating-point tolerance; ``tests/test_kernels.py`` checks them against
each other and ``benchmarks/kernel_bench.py`` compares their speed.
"""

from __future__ import annotations

import os

_CHOICE = os.environ.get("STATFLOW_BACKEND", "auto").strip().lower()

if _CHOICE in ("", "auto"):
    try:
        from . import _numba_impl as _impl

        BACKEND = "numba"
    except ImportError:
        from . import _numpy_impl as _impl

        BACKEND = "numpy"
elif _CHOICE == "numba":
    from . import _numba_impl as _impl

    BACKEND = "numba"
elif _CHOICE == "numpy":
    from . import _numpy_impl as _impl

    BACKEND = "numpy"
else:
    raise ValueError(
        f"STATFLOW_BACKEND must be 'auto', 'numba' or 'numpy', got {_CHOICE!r}"
    )

conv2d = _impl.conv2d
conv2d_input_grad = _impl.conv2d_input_grad
conv2d_weight_grad = _impl.conv2d_weight_grad
avgpool2 = _impl.avgpool2
avgpool2_backward = _impl.avgpool2_backward

from ._resize import (  # noqa: E402  (shared between backends)
    interp_matrix,
    resize_bilinear,
    resize_bilinear_adjoint,
)

__all__ = [
    "BACKEND",
    "conv2d",
    "conv2d_input_grad",
    "conv2d_weight_grad",
    "avgpool2",
    "avgpool2_backward",
    "interp_matrix",
    "resize_bilinear",
    "resize_bilinear_adjoint",
]
