"""Fixed-point tensors: affine quantization, rounding modes and the regulated update.

A real value ``r`` is represented by an integer code ``q`` through
``r = scale * (q - zero_point)``.  Codes of a ``k``-bit tensor live in
``[0, 2**k - 1]`` and every element of a tensor shares one
``(scale, zero_point)`` pair.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError
from .validation import check_bitwidth, check_finite_array, check_non_negative

logger = logging.getLogger(__name__)

#: Substituted for the resolution of a tensor whose values are all equal.
SCALE_FLOOR = 2.0 ** -24

# Bound on per-element update steps before casting to int64; far beyond any
# 32-bit code range so the clamp that follows is unaffected.
_MAX_STEPS = float(2 ** 40)

_KINDS = ("nearest", "floor", "stochastic")


@dataclass(frozen=True)
class RoundingMode:
    """How a real-valued code position is mapped to an integer.

    ``stochastic`` rounds ``x`` up with probability ``x - floor(x)``.  Its
    draws come from a generator; :meth:`generator` builds the one fixed by
    ``seed``, and callers that make several calls should create it once and
    pass it along so the draw sequence continues between calls.
    """

    kind: str = "nearest"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise DomainError(f"unknown rounding mode {self.kind!r}; expected one of {_KINDS}")

    @classmethod
    def nearest(cls):
        return cls("nearest")

    @classmethod
    def floor(cls):
        return cls("floor")

    @classmethod
    def stochastic(cls, seed=0):
        return cls("stochastic", int(seed))

    @property
    def is_stochastic(self):
        return self.kind == "stochastic"

    def generator(self):
        return np.random.default_rng(self.seed)


NEAREST = RoundingMode.nearest()
FLOOR = RoundingMode.floor()


def round_values(x, mode, rng=None):
    """Round ``x`` element-wise according to ``mode``; returns a float array of integers."""
    x = np.asarray(x, dtype=np.float64)
    if mode.kind == "nearest":
        return np.rint(x)
    if mode.kind == "floor":
        return np.floor(x)
    if rng is None:
        rng = mode.generator()
    low = np.floor(x)
    return low + (rng.random(x.shape) < (x - low))


@dataclass(frozen=True)
class QuantParams:
    """Scale, zero point and bitwidth of one tensor.

    The zero point is an integer but is not confined to the code range: a
    tensor whose values are all positive gets a negative zero point, so that
    the scale stays exactly ``(max - min) / (2**k - 1)``.
    """

    scale: float
    zero_point: int
    bitwidth: int

    def __post_init__(self):
        check_bitwidth(self.bitwidth)
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise DomainError(f"scale must be positive and finite, got {self.scale!r}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "zero_point", int(self.zero_point))
        object.__setattr__(self, "bitwidth", int(self.bitwidth))

    @property
    def qmax(self):
        return (1 << self.bitwidth) - 1

    @property
    def real_min(self):
        return self.scale * (0 - self.zero_point)

    @property
    def real_max(self):
        return self.scale * (self.qmax - self.zero_point)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Integer codes plus the parameters that give them a real value.

    Codes are stored as int64 regardless of bitwidth; the array is marked
    read-only so a tensor never changes after construction.
    """

    codes: np.ndarray
    params: QuantParams

    def __post_init__(self):
        codes = np.array(self.codes, dtype=np.int64, copy=True)
        if codes.size and (codes.min() < 0 or codes.max() > self.params.qmax):
            raise DomainError(
                f"codes outside [0, {self.params.qmax}] for a {self.params.bitwidth}-bit tensor")
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

    @property
    def shape(self):
        return self.codes.shape

    @property
    def size(self):
        return self.codes.size

    @property
    def bitwidth(self):
        return self.params.bitwidth

    def __repr__(self):
        p = self.params
        return (f"QuantizedTensor(shape={self.shape}, bitwidth={p.bitwidth}, "
                f"scale={p.scale:.6g}, zero_point={p.zero_point})")


def compute_params(values, k):
    """Scale and zero point covering ``[min(values), max(values)]`` at ``k`` bits.

    The scale equals the tensor's resolution ``(max - min) / (2**k - 1)``.
    The zero point is the integer that puts code 0 nearest to ``min``, which
    keeps every value within half a step of the grid.

    A constant tensor has no range; it gets ``SCALE_FLOOR`` and a zero point
    that places the constant on the middle code.
    """
    arr = check_finite_array(values)
    k = check_bitwidth(k, "k")
    lo = float(arr.min())
    hi = float(arr.max())
    levels = (1 << k) - 1
    scale = (hi - lo) / levels
    if scale > 0:
        return QuantParams(scale, int(np.rint(-lo / scale)), k)
    logger.info("zero-range tensor (value %r); using scale floor %g", lo, SCALE_FLOOR)
    mid = 1 << (k - 1)
    return QuantParams(SCALE_FLOOR, mid - int(np.rint(lo / SCALE_FLOOR)), k)


def quantize(values, params, mode=NEAREST, rng=None):
    """Quantize ``values`` onto the grid of ``params``, saturating at the code limits."""
    arr = check_finite_array(values, allow_empty=True)
    x = arr / params.scale + params.zero_point
    codes = np.clip(round_values(x, mode, rng), 0, params.qmax)
    return QuantizedTensor(codes.astype(np.int64), params)


def dequantize(qt):
    """Real values ``scale * (codes - zero_point)``."""
    p = qt.params
    return p.scale * (qt.codes - p.zero_point).astype(np.float64)


def epsilon(qt):
    """Smallest representable change of an element of ``qt``."""
    return qt.params.scale


def requantize(qt, new_k, mode=NEAREST, rng=None):
    """Move ``qt`` to ``new_k`` bits, rebuilding its parameters from its current values.

    The parameters are recomputed from the min/max of the dequantized
    values, so this also serves to refresh a tensor's scale at unchanged
    bitwidth.
    """
    new_k = check_bitwidth(new_k, "new_k")
    values = dequantize(qt)
    return quantize(values, compute_params(values, new_k), mode, rng)


def apply_update(qt, grads, lr, mode=None, rng=None, overflow="saturate"):
    """One SGD step carried out directly on the codes.

    The real step ``lr * g`` is expressed in units of the tensor's
    resolution and rounded with ``mode``; the codes move by that many steps.
    Under ``FLOOR`` any step smaller than one resolution unit is lost
    (quantization underflow).

    ``overflow`` decides what happens to codes pushed past the grid:
    ``"saturate"`` clamps them and leaves the parameters untouched;
    ``"expand"`` re-ranges the tensor over its updated values (same
    bitwidth, rounding with ``mode``) so the weight range can grow.
    """
    if mode is None:
        mode = RoundingMode.stochastic()
    if overflow not in ("saturate", "expand"):
        raise DomainError(f"overflow must be 'saturate' or 'expand', got {overflow!r}")
    g = check_finite_array(grads, "grads", allow_empty=True)
    if g.shape != qt.shape:
        raise DomainError(f"gradient shape {g.shape} does not match tensor shape {qt.shape}")
    lr = check_non_negative(lr, "lr")
    steps = round_values(lr * g / epsilon(qt), mode, rng)
    steps = np.clip(steps, -_MAX_STEPS, _MAX_STEPS).astype(np.int64)
    codes = qt.codes - steps
    p = qt.params
    if overflow == "expand" and codes.size and (codes.min() < 0 or codes.max() > p.qmax):
        values = p.scale * (codes - p.zero_point).astype(np.float64)
        return quantize(values, compute_params(values, p.bitwidth), mode, rng)
    return QuantizedTensor(np.clip(codes, 0, p.qmax), p)
