"""Selects the convolution kernel implementation at import time.

The compiled extension is preferred when it was built; otherwise the numpy
fallback is used. ``SPECTROEMG_KERNELS=numpy|compiled`` forces a choice
(forcing ``compiled`` fails loudly if the extension is missing).
"""

from __future__ import annotations

import os

from . import kernels_numpy

_forced = os.environ.get("SPECTROEMG_KERNELS", "").strip().lower()

if _forced == "numpy":
    _impl = kernels_numpy
elif _forced == "compiled":
    from . import _kernels as _impl  # ImportError here means the build is missing
else:
    if _forced:
        raise ImportError(f"SPECTROEMG_KERNELS must be 'numpy' or 'compiled', got {_forced!r}")
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = kernels_numpy


def kernel_backend() -> str:
    """Name of the active kernel implementation: 'compiled' or 'numpy'."""
    return _impl.NAME


conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_kernels = _impl.conv2d_backward_kernels
