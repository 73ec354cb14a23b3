"""Backend selection for the kernel-matrix kernels.

The compiled extension is used when it imports; setting the environment
variable ``GPTRAIN_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

import numpy as np

from . import _kernels_py
from ._kernels_py import window_values

if os.environ.get("GPTRAIN_PURE_PYTHON", "") not in ("", "0"):
    _ext = None
else:
    try:
        from . import _kernels_ext as _ext
    except ImportError:
        _ext = None

backend = _ext if _ext is not None else _kernels_py
BACKEND_NAME = "compiled" if _ext is not None else "python"
BACKENDS = {"python": _kernels_py}
if _ext is not None:
    BACKENDS["compiled"] = _ext


def use_backend(name):
    """Switch the active backend (``"python"`` or ``"compiled"``)."""
    global backend, BACKEND_NAME
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
    backend = BACKENDS[name]
    BACKEND_NAME = name


def correlation(d, T, a, window):
    """Unscaled noise-free covariance for an array of time differences."""
    d = np.asarray(d, dtype=float)
    out = np.ones_like(d)
    if window:
        out = window_values(np.abs(d) / T[0])[0]
    g = np.zeros_like(d)
    for j in range(len(a)):
        g += a[j] * np.sin(np.pi * d / T[j + 1]) ** 2
    return out * np.exp(-g)
