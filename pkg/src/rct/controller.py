"""Underflow metric, per-tensor bitwidth policy and the quantized training loop.

For each parameter tensor the controller measures how large gradients are
relative to the tensor's resolution (``gavg``).  At periodic policy ticks
tensors whose ``gavg`` fell below ``t_min`` gain one bit and tensors above
``t_max`` lose one.  Between ticks the codes are updated in place through
:func:`rct.quant.apply_update`; no float copy of the weights is kept.
"""

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .exceptions import DomainError
from .quant import NEAREST, SCALE_FLOOR, RoundingMode, apply_update, dequantize, epsilon, requantize
from .validation import MAX_BITWIDTH, MIN_BITWIDTH, check_finite_array

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ("step", "layer", "bitwidth", "gavg")

#: Unchanged tensors are re-ranged at a tick when their live values leave
#: more than this fraction of the code grid's span unused.
REFRESH_SLACK = 0.1


@dataclass(frozen=True)
class PolicyConfig:
    """Thresholds and clamps of the bitwidth policy.

    ``interval=None`` means "ten ticks per epoch" and is resolved by the
    training loop.  ``update_eps`` selects which resolution regulates the
    update on a tick step: ``"post"`` (after the bitwidth change) or
    ``"pre"``.
    """

    t_min: float = 1.0
    t_max: float = 100.0
    k_min: int = MIN_BITWIDTH
    k_max: int = MAX_BITWIDTH
    interval: int = None
    update_eps: str = "post"

    def __post_init__(self):
        if not (self.t_min >= 0 and self.t_max > self.t_min):
            raise DomainError(f"need 0 <= t_min < t_max, got t_min={self.t_min}, t_max={self.t_max}")
        if not MIN_BITWIDTH <= self.k_min <= self.k_max <= MAX_BITWIDTH:
            raise DomainError(f"need 2 <= k_min <= k_max <= 32, got {self.k_min}, {self.k_max}")
        if self.interval is not None and (int(self.interval) != self.interval or self.interval < 1):
            raise DomainError(f"interval must be a positive integer, got {self.interval!r}")
        if self.update_eps not in ("post", "pre"):
            raise DomainError(f"update_eps must be 'post' or 'pre', got {self.update_eps!r}")

    @classmethod
    def disabled(cls, **kwargs):
        """A policy whose dead band is everything: bitwidths never change."""
        return cls(t_min=0.0, t_max=math.inf, **kwargs)

    @property
    def enabled(self):
        return self.t_min > 0 or math.isfinite(self.t_max)

    def to_dict(self):
        d = asdict(self)
        if math.isinf(d["t_max"]):
            d["t_max"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "t_max" in d:
            d["t_max"] = float(d["t_max"])
        return cls(**d)


@dataclass(frozen=True)
class LayerStats:
    layer_name: str
    gavg: float
    bitwidth: int
    n_params: int
    epsilon: float


@dataclass
class BitwidthHistory:
    """Per-tick records of ``(step, layer, bitwidth, gavg)``."""

    records: list = field(default_factory=list)

    def append(self, step, layer, bitwidth, gavg):
        if self.records and step < self.records[-1][0]:
            raise DomainError(f"history steps must be non-decreasing ({step} after {self.records[-1][0]})")
        self.records.append((int(step), str(layer), int(bitwidth), float(gavg)))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def last_bitwidths(self):
        out = {}
        for _, layer, k, _ in self.records:
            out[layer] = k
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for step, layer, k, g in self.records:
            w.writerow((step, layer, k, repr(g)))
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(self.to_csv())

    @classmethod
    def read_csv(cls, path):
        hist = cls()
        with open(path, encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != HISTORY_FIELDS:
                raise DomainError(f"{path}: expected header {','.join(HISTORY_FIELDS)}")
            for row in reader:
                hist.append(int(row["step"]), row["layer"], int(row["bitwidth"]), float(row["gavg"]))
        return hist


def compute_gavg(grads, eps):
    """Mean of ``|g / eps|`` over a gradient tensor.

    Learning rate and momentum are deliberately left out, so the value
    depends only on the gradient and the tensor's resolution.
    """
    if not (np.isfinite(eps) and eps > 0):
        raise DomainError(f"eps must be positive, got {eps!r}")
    g = check_finite_array(grads, "grads")
    return float(np.abs(g).mean() / eps)


def adjust_bitwidth(stats, cfg):
    """New bitwidth for each entry of ``stats``: +1 below ``t_min``, -1 above ``t_max``."""
    out = []
    for s in stats:
        k = s.bitwidth
        if s.gavg < cfg.t_min and k < cfg.k_max:
            k += 1
        elif s.gavg > cfg.t_max and k > cfg.k_min:
            k -= 1
        out.append(k)
    return out


def collect_stats(model, grads):
    stats = []
    for name, qt in model.tensors().items():
        eps = epsilon(qt)
        stats.append(LayerStats(name, compute_gavg(grads[name], eps), qt.bitwidth, qt.size, eps))
    return stats


def _needs_refresh(qt):
    values = dequantize(qt)
    if values.max() == values.min() and qt.params.scale == SCALE_FLOOR:
        return False
    span = qt.params.scale * qt.params.qmax
    return span - (values.max() - values.min()) > REFRESH_SLACK * span


def apply_bitwidths(model, new_bits, mode=NEAREST, rng=None):
    """Requantize tensors whose bitwidth changed; re-range those that drifted.

    Returns the names of tensors that were rewritten.
    """
    touched = []
    for name, k in new_bits.items():
        qt = model.get_tensor(name)
        if k != qt.bitwidth or _needs_refresh(qt):
            model.set_tensor(name, requantize(qt, k, mode, rng))
            touched.append(name)
    return touched


def policy_tick(model, grads, history, cfg, step, rng=None):
    """Evaluate ``gavg`` per tensor, apply the policy and log the tick.

    Returns ``(model, history, stats)``; ``stats`` are measured with the
    resolution in force before the adjustment.
    """
    stats = collect_stats(model, grads)
    new_bits = dict(zip((s.layer_name for s in stats), adjust_bitwidth(stats, cfg)))
    apply_bitwidths(model, new_bits, NEAREST, rng)
    for s in stats:
        history.append(step, s.layer_name, new_bits[s.layer_name], s.gavg)
        if new_bits[s.layer_name] != s.bitwidth:
            logger.debug("step %d: %s %d -> %d bits (gavg %.4g)",
                         step, s.layer_name, s.bitwidth, new_bits[s.layer_name], s.gavg)
    return model, history, stats


def _update_all(model, grads, lr, rounding, rng, overflow):
    for name, qt in model.tensors().items():
        model.set_tensor(name, apply_update(qt, grads[name], lr, rounding, rng, overflow))


def train_step(model, batch, targets, lr, cfg, step, history, rounding=None, rng=None,
               ledger=None, batch_index=None, reduction="mean", overflow="expand"):
    """Forward, backward, optional policy tick, then the quantized update.

    The tick fires when ``batch_index`` (defaults to ``step``) is a multiple
    of ``cfg.interval``.  Returns ``(model, loss, history)``.
    """
    if rounding is None:
        rounding = RoundingMode.stochastic()
    if rng is None:
        rng = rounding.generator()
    interval = cfg.interval or 1
    idx = step if batch_index is None else batch_index
    logits, cache = nn.forward(model, batch)
    loss = nn.cross_entropy(logits, targets, reduction)
    grads = nn.backward(model, cache, targets, reduction)
    del cache
    if ledger is not None:
        ledger.record_compute(model, len(batch))
    if idx % interval == 0:
        if cfg.update_eps == "pre":
            stats = collect_stats(model, grads)
            new_bits = dict(zip((s.layer_name for s in stats), adjust_bitwidth(stats, cfg)))
            _update_all(model, grads, lr, rounding, rng, overflow)
            apply_bitwidths(model, new_bits, NEAREST, rng)
            for s in stats:
                history.append(step, s.layer_name, new_bits[s.layer_name], s.gavg)
        else:
            policy_tick(model, grads, history, cfg, step, rng)
            _update_all(model, grads, lr, rounding, rng, overflow)
    else:
        _update_all(model, grads, lr, rounding, rng, overflow)
    if ledger is not None:
        ledger.record_movement(model)
    return model, loss, history


def default_interval(steps_per_epoch):
    """Ten policy ticks per epoch."""
    return max(1, math.ceil(steps_per_epoch / 10))


def iter_batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def fit(model, X, y, *, lr, batch_size, epochs, cfg, rounding, rng, history=None, ledger=None,
        on_epoch=None, reduction="mean", overflow="expand"):
    """Run ``epochs`` passes of quantized SGD with the bitwidth policy.

    ``rng`` drives both the batch shuffle and stochastic rounding.  Returns
    ``(model, history, losses)`` with one mean loss per epoch.
    """
    if history is None:
        history = BitwidthHistory()
    n = len(X)
    steps_per_epoch = math.ceil(n / batch_size)
    if cfg.interval is None:
        cfg = PolicyConfig(cfg.t_min, cfg.t_max, cfg.k_min, cfg.k_max,
                           default_interval(steps_per_epoch), cfg.update_eps)
    losses = []
    step = 0
    for epoch in range(epochs):
        epoch_loss = 0.0
        for i, idx in enumerate(iter_batches(n, batch_size, rng)):
            model, loss, history = train_step(model, X[idx], y[idx], lr, cfg, step, history,
                                              rounding, rng, ledger, batch_index=i,
                                              reduction=reduction, overflow=overflow)
            epoch_loss += loss if reduction == "sum" else loss * len(idx)
            step += 1
        losses.append(epoch_loss / n)
        if on_epoch is not None:
            on_epoch(epoch, model)
    return model, history, losses


def fit_float(layers, input_shape, params, X, y, *, lr, batch_size, epochs, rng, act_bits=None,
              ledger=None, reduction="mean"):
    """Plain float64 SGD on the same architecture; the reference for parity checks.

    ``params`` (a dict of float arrays) is updated in place.  A 32-bit
    placeholder model carries the layer structure; its codes are never read.
    """
    model = nn.quantize_model(layers, input_shape, params, 32, act_bits)
    n = len(X)
    losses = []
    for _ in range(epochs):
        epoch_loss = 0.0
        for idx in iter_batches(n, batch_size, rng):
            logits, cache = nn.forward(model, X[idx], weights=params, act_bits=act_bits)
            epoch_loss += nn.cross_entropy(logits, y[idx], "sum")
            grads = nn.backward(model, cache, y[idx], reduction)
            for name, g in grads.items():
                params[name] -= lr * g
            if ledger is not None:
                ledger.record_compute(model, len(idx))
                ledger.record_movement(model)
        losses.append(epoch_loss / n)
    return model, params, losses

