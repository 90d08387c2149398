"""A small feed-forward network whose parameters exist only as quantized tensors.

Forward passes dequantize weights on the fly and fake-quantize the input of
every Dense/Conv2D layer to ``act_bits`` (8 by default), so each GEMM sees a
low-bit activation operand and a ``k``-bit weight operand.  The logits are
left in working precision.  Gradients are computed in float64 with a
straight-through estimator across the activation quantizers.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DomainError, UsageError
from .quant import NEAREST, compute_params, dequantize, quantize
from .validation import check_bitwidth, check_finite_array

DEFAULT_ACT_BITS = 8


def fake_quant_activation(x, k=DEFAULT_ACT_BITS):
    """Quantize ``x`` with its own min/max at ``k`` bits and map it back to reals."""
    return _fake_quant(x, k)[0]


def _fake_quant(x, k):
    x = check_finite_array(x, "activation")
    k = check_bitwidth(k, "k")
    lo, hi = x.min(), x.max()
    if lo == hi:
        return x.copy(), None
    params = compute_params(x, k)
    out = dequantize(quantize(x, params, NEAREST))
    # Dynamic range covers the batch, so the STE mask is all-true here; it is
    # kept so a fixed clip range would be honoured.
    half = params.scale / 2
    mask = (x >= params.real_min - half) & (x <= params.real_max + half)
    return out, (None if mask.all() else mask)


class Layer:
    """Base class. Parameterized layers override ``param_names``."""

    kind = "layer"
    param_names = ()

    def __init__(self, name):
        self.name = name

    def tensors(self):
        return {p: getattr(self, p) for p in self.param_names}

    def macs(self, input_shape, batch):
        return 0


class Dense(Layer):
    kind = "dense"
    param_names = ("weight", "bias")

    def __init__(self, in_features, out_features, weight=None, bias=None, name="dense"):
        super().__init__(name)
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.weight = weight
        self.bias = bias

    def param_shapes(self):
        return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}

    def fan_in(self):
        return self.in_features

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise DomainError(
                f"{self.name}: expected input shape ({self.in_features},), got {tuple(input_shape)}")
        return (self.out_features,)

    def macs(self, input_shape, batch):
        return batch * self.in_features * self.out_features

    def forward(self, x, w, b):
        return x @ w.T + b

    def backward(self, x, w, dy):
        return dy @ w, dy.T @ x, dy.sum(axis=0)


class Conv2D(Layer):
    """2-D convolution on ``(N, C, H, W)`` inputs, weights ``(out, in, kh, kw)``."""

    kind = "conv2d"
    param_names = ("weight", "bias")

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 weight=None, bias=None, name="conv2d"):
        super().__init__(name)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise DomainError(f"{name}: invalid kernel/stride/padding")
        self.weight = weight
        self.bias = bias

    def param_shapes(self):
        k = self.kernel
        return {"weight": (self.out_channels, self.in_channels, k, k),
                "bias": (self.out_channels,)}

    def fan_in(self):
        return self.in_channels * self.kernel ** 2

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise DomainError(
                f"{self.name}: expected ({self.in_channels}, H, W) input, got {tuple(input_shape)}")
        _, h, w = input_shape
        oh = (h + 2 * self.padding - self.kernel) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if oh < 1 or ow < 1:
            raise DomainError(f"{self.name}: kernel larger than padded input")
        return (self.out_channels, oh, ow)

    def macs(self, input_shape, batch):
        _, oh, ow = self.output_shape(input_shape)
        return batch * oh * ow * self.out_channels * self.in_channels * self.kernel ** 2

    def _cols(self, x):
        p, k, s = self.padding, self.kernel, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, oh, ow = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
        return cols, (n, oh, ow)

    def forward(self, x, w, b):
        cols, (n, oh, ow) = self._cols(x)
        out = cols @ w.reshape(self.out_channels, -1).T + b
        return out.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, x, w, dy):
        p, k, s = self.padding, self.kernel, self.stride
        cols, (n, oh, ow) = self._cols(x)
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        dw = (dy2.T @ cols).reshape(w.shape)
        db = dy2.sum(axis=0)
        dcols = (dy2 @ w.reshape(self.out_channels, -1)).reshape(n, oh, ow, self.in_channels, k, k)
        dxp = np.zeros((n, self.in_channels, x.shape[2] + 2 * p, x.shape[3] + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else dxp
        return dx, dw, db


class ReLU(Layer):
    kind = "relu"

    def output_shape(self, input_shape):
        return tuple(input_shape)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)


@dataclass
class ForwardCache:
    """Per-layer inputs and masks needed by :func:`backward`.

    Holds activations only; weights are dequantized again in the backward
    pass rather than kept here.
    """

    version: int
    act_bits: object
    logits: np.ndarray
    entries: list = field(default_factory=list)
    weights: dict = None


class Model:
    """Ordered layers with a softmax cross-entropy loss.

    Parameter tensors are addressed as ``"<layer>.<param>"`` (for example
    ``"fc1.weight"``).  Every assignment through :meth:`set_tensor` bumps
    ``version`` so forward caches from before the change are rejected.
    """

    def __init__(self, layers, input_shape, act_bits=DEFAULT_ACT_BITS):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise DomainError(f"layer names must be unique, got {names}")
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.act_bits = None if act_bits is None else check_bitwidth(act_bits, "act_bits")
        self.version = 0
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(layer.output_shape(self.shapes[-1]))
        for layer in self.param_layers:
            for pname, shape in layer.param_shapes().items():
                qt = getattr(layer, pname)
                if qt is not None and qt.shape != shape:
                    raise DomainError(f"{layer.name}.{pname}: shape {qt.shape} != {shape}")

    @property
    def param_layers(self):
        return [layer for layer in self.layers if layer.param_names]

    @property
    def output_shape(self):
        return self.shapes[-1]

    def tensor_names(self):
        return [f"{layer.name}.{p}" for layer in self.param_layers for p in layer.param_names]

    def tensors(self):
        """Mapping of tensor name to QuantizedTensor, in layer order."""
        return {f"{layer.name}.{p}": getattr(layer, p)
                for layer in self.param_layers for p in layer.param_names}

    def _locate(self, name):
        lname, _, pname = name.rpartition(".")
        for layer in self.param_layers:
            if layer.name == lname and pname in layer.param_names:
                return layer, pname
        raise KeyError(name)

    def get_tensor(self, name):
        layer, pname = self._locate(name)
        return getattr(layer, pname)

    def set_tensor(self, name, qt):
        layer, pname = self._locate(name)
        if qt.shape != getattr(layer, pname).shape:
            raise DomainError(f"{name}: shape {qt.shape} != {getattr(layer, pname).shape}")
        setattr(layer, pname, qt)
        self.version += 1

    def bitwidths(self):
        return {name: qt.bitwidth for name, qt in self.tensors().items()}

    def n_params(self):
        return sum(qt.size for qt in self.tensors().values())

    def layer_macs(self, batch=1):
        """Forward MACs per parameterized layer for a batch of ``batch`` samples."""
        out = {}
        for layer, shape in zip(self.layers, self.shapes):
            if layer.param_names:
                out[layer.name] = layer.macs(shape, batch)
        return out


def build_layers(specs, input_shape):
    """Instantiate (tensor-less) layers from config dicts.

    Each spec has a ``type`` of ``dense`` (``units``), ``conv2d``
    (``filters``, ``kernel``, optional ``stride``/``padding``), ``relu`` or
    ``flatten``, and an optional ``name``.
    """
    layers = []
    shape = tuple(input_shape)
    for i, spec in enumerate(specs):
        kind = spec.get("type")
        name = spec.get("name", f"{kind}{i}")
        if kind == "dense":
            if len(shape) != 1:
                raise DomainError(f"{name}: dense layer needs a flat input, got {shape}")
            layer = Dense(shape[0], spec["units"], name=name)
        elif kind == "conv2d":
            if len(shape) != 3:
                raise DomainError(f"{name}: conv2d needs (C, H, W) input, got {shape}")
            layer = Conv2D(shape[0], spec["filters"], spec["kernel"],
                           spec.get("stride", 1), spec.get("padding", 0), name=name)
        elif kind == "relu":
            layer = ReLU(name)
        elif kind == "flatten":
            layer = Flatten(name)
        else:
            raise DomainError(f"unknown layer type {kind!r}")
        shape = layer.output_shape(shape)
        layers.append(layer)
    return layers


def init_weights(layers, rng):
    """He-uniform weights and fan-in scaled uniform biases, as float arrays."""
    params = {}
    for layer in layers:
        if not layer.param_names:
            continue
        shapes = layer.param_shapes()
        fan_in = layer.fan_in()
        w_bound = np.sqrt(6.0 / fan_in)
        b_bound = 1.0 / np.sqrt(fan_in)
        params[f"{layer.name}.weight"] = rng.uniform(-w_bound, w_bound, shapes["weight"])
        params[f"{layer.name}.bias"] = rng.uniform(-b_bound, b_bound, shapes["bias"])
    return params


def quantize_model(layers, input_shape, float_params, bitwidth, act_bits=DEFAULT_ACT_BITS,
                   mode=NEAREST, rng=None):
    """Attach quantized copies of ``float_params`` to ``layers`` and return a Model.

    ``bitwidth`` is an int for every tensor or a mapping of tensor name to int.
    """
    for layer in layers:
        for pname in layer.param_names:
            name = f"{layer.name}.{pname}"
            k = bitwidth[name] if isinstance(bitwidth, dict) else bitwidth
            values = float_params[name]
            setattr(layer, pname, quantize(values, compute_params(values, k), mode, rng))
    return Model(layers, input_shape, act_bits)


def build_model(specs, input_shape, bitwidth=8, rng=None, act_bits=DEFAULT_ACT_BITS):
    """Build and initialize a quantized model from layer specs."""
    rng = np.random.default_rng(rng)
    layers = build_layers(specs, input_shape)
    return quantize_model(layers, input_shape, init_weights(layers, rng), bitwidth, act_bits)


def _weights(model, layer, override):
    if override is not None:
        return override[f"{layer.name}.weight"], override[f"{layer.name}.bias"]
    return dequantize(layer.weight), dequantize(layer.bias)


def forward(model, batch, weights=None, act_bits="model"):
    """Run ``batch`` through ``model``; returns ``(logits, cache)``.

    ``weights`` optionally maps tensor names to float arrays used instead of
    the model's dequantized tensors (float baselines and gradient checks).
    ``act_bits=None`` disables activation quantization.
    """
    if act_bits == "model":
        act_bits = model.act_bits
    x = check_finite_array(batch, "batch")
    if x.shape[1:] != model.input_shape:
        raise DomainError(f"batch shape {x.shape[1:]} does not match model input {model.input_shape}")
    entries = []
    for layer in model.layers:
        if layer.param_names:
            mask = None
            if act_bits is not None:
                x, mask = _fake_quant(x, act_bits)
            w, b = _weights(model, layer, weights)
            entries.append((x, mask))
            x = layer.forward(x, w, b)
        elif layer.kind == "relu":
            entries.append(x > 0)
            x = np.maximum(x, 0.0)
        else:
            entries.append(x.shape)
            x = x.reshape(x.shape[0], -1)
    return x, ForwardCache(model.version, act_bits, x, entries, weights)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_reduction(reduction):
    if reduction not in ("mean", "sum"):
        raise DomainError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def cross_entropy(logits, targets, reduction="mean"):
    """Softmax cross-entropy of integer class ``targets``, averaged or summed over the batch."""
    _check_reduction(reduction)
    targets = np.asarray(targets)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(len(targets)), targets]
    return float(nll.mean() if reduction == "mean" else nll.sum())


def backward(model, cache, targets, reduction="mean"):
    """Gradients of the cross-entropy for every parameter tensor.

    With ``reduction="sum"`` the per-sample gradients are accumulated rather
    than averaged, so gradient magnitude grows with batch size.  Returns a
    dict keyed like :meth:`Model.tensors`.
    """
    _check_reduction(reduction)
    if cache.version != model.version:
        raise UsageError("forward cache is stale: model parameters changed since forward()")
    targets = np.asarray(targets)
    n = cache.logits.shape[0]
    if targets.shape != (n,):
        raise DomainError(f"targets shape {targets.shape} does not match batch size {n}")
    dy = softmax(cache.logits)
    dy[np.arange(n), targets] -= 1.0
    if reduction == "mean":
        dy /= n
    grads = {}
    for layer, entry in zip(reversed(model.layers), reversed(cache.entries)):
        if layer.param_names:
            x, mask = entry
            w, _ = _weights(model, layer, cache.weights)
            dy, dw, db = layer.backward(x, w, dy)
            if mask is not None:
                dy = dy * mask
            grads[f"{layer.name}.bias"] = db
            grads[f"{layer.name}.weight"] = dw
        elif layer.kind == "relu":
            dy = dy * entry
        else:
            dy = dy.reshape(entry)
    return {name: grads[name] for name in model.tensor_names()}


def predict(model, batch, weights=None, act_bits="model"):
    logits, _ = forward(model, batch, weights, act_bits)
    return logits.argmax(axis=1)


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped: int


def _relu_pattern(cache):
    return [e for e in cache.entries if isinstance(e, np.ndarray) and e.dtype == bool]


def gradient_check(model, batch, targets, weights=None, h=1e-5, floor=1e-4):
    """Compare :func:`backward` against central differences of the mean loss.

    Runs in float64 with activation quantization off, at ``weights`` or the
    model's dequantized tensors.  The error of an element is
    ``|a - n| / max(|a|, |n|, floor)``.  Elements whose perturbation flips a
    ReLU are skipped, since the loss has a kink there.
    """
    if weights is None:
        weights = {name: dequantize(qt) for name, qt in model.tensors().items()}
    weights = {name: np.array(w, dtype=np.float64) for name, w in weights.items()}
    logits, cache = forward(model, batch, weights, act_bits=None)
    analytic = backward(model, cache, targets, "mean")
    worst, checked, skipped = 0.0, 0, 0
    for name, w in weights.items():
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + h
            lp, cp = forward(model, batch, weights, act_bits=None)
            w[idx] = orig - h
            lm, cm = forward(model, batch, weights, act_bits=None)
            w[idx] = orig
            if not all(np.array_equal(a, b) for a, b in zip(_relu_pattern(cp), _relu_pattern(cm))):
                skipped += 1
                continue
            num = (cross_entropy(lp, targets) - cross_entropy(lm, targets)) / (2 * h)
            a = analytic[name][idx]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
            checked += 1
    return GradCheckResult(worst, checked, skipped)
