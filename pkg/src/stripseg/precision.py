"""Build-wide floating point mode.

All tensors are stored as 32-bit reals by default. Gradient-check harnesses
switch the build into 64-bit mode, where central finite differences are
reliable; nothing else should.
"""

from contextlib import contextmanager

import numpy as np

_REAL_DTYPE = np.float32


def real_dtype():
    """Dtype new tensors are created with (float32 unless in 64-bit mode)."""
    return _REAL_DTYPE


def set_real_dtype(dtype):
    global _REAL_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"real dtype must be float32 or float64, got {dtype}")
    _REAL_DTYPE = dtype.type


@contextmanager
def float64_mode():
    """Temporarily create all new tensors in 64-bit precision."""
    global _REAL_DTYPE
    saved = _REAL_DTYPE
    _REAL_DTYPE = np.float64
    try:
        yield
    finally:
        _REAL_DTYPE = saved
