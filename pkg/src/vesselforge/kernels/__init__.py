"""Convolution kernel backend selection.

The compiled Cython backend is preferred when built; the numpy reference
backend is the fallback. Override with VESSELFORGE_BACKEND=compiled or
VESSELFORGE_BACKEND=reference (requesting an unbuilt compiled backend is an
error rather than a silent fallback).
"""
import os

import numpy as np

_choice = os.environ.get("VESSELFORGE_BACKEND", "auto").strip().lower()

if _choice in ("", "auto"):
    try:
        from . import _fast as _impl
        BACKEND = "compiled"
    except ImportError:
        from . import _ref as _impl
        BACKEND = "reference"
elif _choice in ("compiled", "fast"):
    from . import _fast as _impl
    BACKEND = "compiled"
elif _choice in ("reference", "ref", "numpy"):
    from . import _ref as _impl
    BACKEND = "reference"
else:
    raise ValueError(
        f"VESSELFORGE_BACKEND={_choice!r} not recognized "
        "(use auto, compiled, or reference)")

_DTYPES = (np.float32, np.float64)


def _check(arr, name):
    if arr.dtype not in _DTYPES:
        raise TypeError(f"{name} must be float32 or float64, got {arr.dtype}")
    return np.ascontiguousarray(arr)


def conv3d_forward(x, w, stride=1, pad=0):
    x = _check(x, "input")
    w = _check(w, "weight")
    if x.dtype != w.dtype:
        raise TypeError(f"dtype mismatch: input {x.dtype} vs weight {w.dtype}")
    return _impl.conv3d_forward(x, w, int(stride), int(pad))


def conv3d_grad_input(gy, w, x_shape, stride=1, pad=0):
    gy = _check(gy, "grad_output")
    w = _check(w, "weight")
    return _impl.conv3d_grad_input(gy, w, tuple(x_shape), int(stride), int(pad))


def conv3d_grad_weight(gy, x, w_shape, stride=1, pad=0):
    gy = _check(gy, "grad_output")
    x = _check(x, "input")
    return _impl.conv3d_grad_weight(gy, x, tuple(w_shape), int(stride), int(pad))


def set_threads(n):
    """Set kernel thread count (compiled backend only; no-op on reference)."""
    _impl.set_threads(int(n))


def max_threads():
    return _impl.max_threads()


def backends_available():
    """Names of importable backends, compiled first when present."""
    out = []
    try:
        from . import _fast  # noqa: F401
        out.append("compiled")
    except ImportError:
        pass
    out.append("reference")
    return out
