"""Small argument checks shared by the numeric modules."""

import numbers

import numpy as np

from .exceptions import DomainError, InvalidInputError

MIN_BITWIDTH = 2
MAX_BITWIDTH = 32


def check_bitwidth(k, name="bitwidth"):
    if isinstance(k, bool) or not isinstance(k, numbers.Integral):
        raise DomainError(f"{name} must be an integer, got {k!r}")
    k = int(k)
    if not MIN_BITWIDTH <= k <= MAX_BITWIDTH:
        raise DomainError(
            f"{name} must be in [{MIN_BITWIDTH}, {MAX_BITWIDTH}], got {k}")
    return k


def check_finite_array(values, name="values", allow_empty=False):
    """Return ``values`` as a float64 array, rejecting NaN/inf and (optionally) empties."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0 and not allow_empty:
        raise InvalidInputError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def check_positive(x, name):
    if not np.isfinite(x) or x <= 0:
        raise DomainError(f"{name} must be a positive finite number, got {x!r}")
    return float(x)


def check_non_negative(x, name):
    if np.isnan(x) or x < 0:
        raise DomainError(f"{name} must be >= 0, got {x!r}")
    return float(x)
