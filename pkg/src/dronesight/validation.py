"""Small input-validation helpers shared by the public entry points."""

from __future__ import annotations

import numpy as np


def as_float_array(x, name, shape=None, ndim=None):
    """Coerce to a float64 ndarray and check shape/finiteness.

    `shape` may contain -1 for free axes.  Raises ValueError on any
    violation; the offending argument is named in the message.
    """
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim} dimensions, got {arr.ndim}")
    if shape is not None:
        if arr.ndim != len(shape):
            raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
        for want, got in zip(shape, arr.shape):
            if want != -1 and want != got:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_positive(value, name, allow_zero=False):
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"{name}: must be finite, got {value}")
    if allow_zero:
        if value < 0:
            raise ValueError(f"{name}: must be >= 0, got {value}")
    elif value <= 0:
        raise ValueError(f"{name}: must be > 0, got {value}")
    return value


def check_in_range(value, name, low, high, inclusive=True):
    value = float(value)
    ok = low <= value <= high if inclusive else low < value < high
    if not ok:
        bounds = "[]" if inclusive else "()"
        raise ValueError(
            f"{name}: must lie in {bounds[0]}{low}, {high}{bounds[1]}, got {value}"
        )
    return value


def check_index(value, name, size=None):
    value = int(value)
    if value < 0:
        raise ValueError(f"{name}: must be >= 0, got {value}")
    if size is not None and value >= size:
        raise ValueError(f"{name}: index {value} out of range for size {size}")
    return value


def check_unit_vector(v, name, atol=1e-6):
    v = as_float_array(v, name, shape=(3,))
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > atol:
        raise ValueError(f"{name}: expected a unit vector, norm is {norm}")
    return v
