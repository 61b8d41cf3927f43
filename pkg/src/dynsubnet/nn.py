"""Minimal CNN engine: graph construction, forward/backward, SGD, evaluation.

Tensors are plain numpy arrays in NCHW layout. Parameters live in a flat
``weights`` dict keyed ``"<layer index>.<name>"`` so sub-net slicing and the
checkpoint container can address them uniformly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigurationError, DataError, NumericError

KINDS = ("conv2d", "linear", "batchnorm2d", "relu", "avgpool2d", "flatten", "residual-add")
PARAMETRIC = ("conv2d", "linear", "batchnorm2d")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class LayerSpec:
    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | None = None
    stride: int = 1
    padding: int | None = None
    prunable: bool = False
    tie_group: str | None = None
    inputs: tuple[int, ...] | None = None

    _KEYS = {"in": "in_channels", "out": "out_channels"}

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for key, value in d.items():
            name = cls._KEYS.get(key, key)
            if name not in cls.__dataclass_fields__:
                raise ConfigurationError(f"unknown layer key {key!r}")
            kw[name] = tuple(value) if name == "inputs" and value is not None else value
        return cls(**kw)

    def to_dict(self):
        d = {"kind": self.kind, "in": self.in_channels, "out": self.out_channels}
        if self.kind == "conv2d" or (self.kind == "avgpool2d" and self.kernel is not None):
            d["kernel"] = self.kernel
        if self.kind in ("conv2d", "avgpool2d") and self.stride != 1:
            d["stride"] = self.stride
        if self.padding is not None:
            d["padding"] = self.padding
        if self.prunable:
            d["prunable"] = True
        if self.tie_group is not None:
            d["tie_group"] = self.tie_group
        if self.inputs is not None:
            d["inputs"] = list(self.inputs)
        return d

    @property
    def pad(self):
        if self.padding is not None:
            return self.padding
        return (self.kernel or 1) // 2


@dataclass
class TrainHyper:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")


@dataclass
class ModelGraph:
    layers: list[LayerSpec]
    weights: dict[str, np.ndarray]
    num_classes: int
    input_shape: tuple[int, int, int]
    shapes: list[tuple[int, ...]] = field(default_factory=list, repr=False)
    optimizer: "SGD | None" = field(default=None, repr=False, compare=False)

    def sources(self, i):
        return layer_sources(self.layers, i)

    def param_names(self):
        """Trainable parameter names (BN running statistics excluded)."""
        names = []
        for i, spec in enumerate(self.layers):
            if spec.kind in PARAMETRIC:
                names += [f"{i}.weight", f"{i}.bias"]
        return names

    def bn_layers(self):
        return [i for i, s in enumerate(self.layers) if s.kind == "batchnorm2d"]

    def prunable_layers(self):
        return [i for i, s in enumerate(self.layers) if s.prunable]

    def copy(self):
        return ModelGraph(
            [replace(s) for s in self.layers],
            {k: v.copy() for k, v in self.weights.items()},
            self.num_classes,
            tuple(self.input_shape),
            list(self.shapes),
        )

    def astype(self, dtype):
        m = self.copy()
        m.weights = {k: v.astype(dtype) for k, v in m.weights.items()}
        return m


def layer_sources(layers, i):
    spec = layers[i]
    if spec.kind == "residual-add":
        return list(spec.inputs)
    return [i - 1]


def infer_shapes(layers, input_shape, num_classes=None, allow_empty=False):
    """Validate the layer chain and return per-layer output shapes (no batch dim).

    Fills in ``in_channels``/``out_channels`` of pass-through layers in place.
    """
    if not layers:
        raise ConfigurationError("layer list is empty")
    lo = 0 if allow_empty else 1
    shapes = []
    consumed = set()

    def shape_of(j):
        return tuple(input_shape) if j == -1 else shapes[j]

    def where(j):
        return "input" if j == -1 else f"layer {j}"

    for i, spec in enumerate(layers):
        if spec.kind not in KINDS:
            raise ConfigurationError(f"layer {i}: unknown kind {spec.kind!r}")
        if spec.prunable and spec.kind not in ("conv2d", "linear"):
            raise ConfigurationError(f"layer {i}: only conv2d and linear layers may be prunable")
        srcs = layer_sources(layers, i)
        if spec.kind == "residual-add":
            if spec.inputs is None or len(spec.inputs) != 2:
                raise ConfigurationError(f"layer {i}: residual-add needs exactly two inputs")
            if any(not -1 <= j < i for j in srcs):
                raise ConfigurationError(f"layer {i}: residual-add inputs must precede it")
        elif spec.inputs is not None:
            raise ConfigurationError(f"layer {i}: only residual-add takes explicit inputs")
        consumed.update(srcs)
        src = shape_of(srcs[0])
        if spec.kind in ("conv2d", "batchnorm2d", "avgpool2d"):
            if len(src) != 3:
                raise ConfigurationError(f"layer {i}: {spec.kind} needs a CxHxW input from {where(srcs[0])}")
        channels = src[0]
        if spec.kind in ("conv2d", "linear", "batchnorm2d"):
            if spec.in_channels is None:
                raise ConfigurationError(f"layer {i}: {spec.kind} needs 'in'")
            if spec.in_channels != channels:
                raise ConfigurationError(
                    f"channel mismatch between {where(srcs[0])} (out={channels}) "
                    f"and layer {i} (in={spec.in_channels})"
                )
        if spec.kind == "conv2d":
            if spec.out_channels is None or spec.out_channels < lo or not spec.kernel or spec.kernel < 1:
                raise ConfigurationError(f"layer {i}: conv2d needs positive out and kernel")
            if spec.stride < 1:
                raise ConfigurationError(f"layer {i}: stride must be positive")
            _, h, w = src
            ho = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
            wo = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
            if ho < 1 or wo < 1:
                raise ConfigurationError(f"layer {i}: conv output would be empty")
            shape = (spec.out_channels, ho, wo)
        elif spec.kind == "linear":
            if len(src) != 1:
                raise ConfigurationError(f"layer {i}: linear needs a flat input (add a flatten layer)")
            if spec.out_channels is None or spec.out_channels < lo:
                raise ConfigurationError(f"layer {i}: linear needs positive out")
            shape = (spec.out_channels,)
        elif spec.kind == "batchnorm2d":
            spec.out_channels = channels
            shape = src
        elif spec.kind == "avgpool2d":
            c, h, w = src
            k = spec.kernel
            if k is None:
                shape = (c, 1, 1)
            else:
                if k < 1 or h < k or w < k:
                    raise ConfigurationError(f"layer {i}: pooling window {k} larger than input {h}x{w}")
                shape = (c, h // k, w // k)
            spec.in_channels = spec.out_channels = c
        elif spec.kind == "flatten":
            spec.in_channels = channels
            shape = (int(np.prod(src)),)
            spec.out_channels = shape[0]
        elif spec.kind == "relu":
            spec.in_channels = spec.out_channels = channels
            shape = src
        else:  # residual-add
            other = shape_of(srcs[1])
            if other[0] != src[0]:
                raise ConfigurationError(
                    f"residual-add layer {i}: producers {where(srcs[0])} (out={src[0]}) and "
                    f"{where(srcs[1])} (out={other[0]}) differ in channels"
                )
            if other != src:
                raise ConfigurationError(f"residual-add layer {i}: producer shapes {src} and {other} differ")
            spec.in_channels = spec.out_channels = channels
            shape = src
        shapes.append(tuple(int(s) for s in shape))

    if any(i not in consumed for i in range(len(layers) - 1)):
        dangling = [i for i in range(len(layers) - 1) if i not in consumed]
        raise ConfigurationError(f"layers {dangling} feed nothing; the graph must have a single output")
    if len(shapes[-1]) != 1:
        raise ConfigurationError("the last layer must produce a flat logits vector")
    if num_classes is not None and shapes[-1][0] != num_classes:
        raise ConfigurationError(f"last layer produces {shapes[-1][0]} outputs, expected {num_classes} classes")
    return shapes


def build_model(spec, num_classes, seed=0, input_shape=(3, 32, 32), dtype=np.float32):
    """Build a graph and initialize its weights deterministically from ``seed``.

    Conv/linear weights use Kaiming-uniform fan-in scaling, biases start at 0;
    batch-norm scale is 1 and shift 0.
    """
    layers = [LayerSpec.from_dict(s) if isinstance(s, dict) else replace(s) for s in spec]
    shapes = infer_shapes(layers, input_shape, num_classes)
    rng = np.random.default_rng(seed)
    weights = {}
    for i, s in enumerate(layers):
        if s.kind == "conv2d":
            fan_in = s.in_channels * s.kernel * s.kernel
            bound = math.sqrt(6.0 / fan_in)
            weights[f"{i}.weight"] = rng.uniform(
                -bound, bound, (s.out_channels, s.in_channels, s.kernel, s.kernel)
            ).astype(dtype)
            weights[f"{i}.bias"] = np.zeros(s.out_channels, dtype)
        elif s.kind == "linear":
            bound = math.sqrt(6.0 / s.in_channels)
            weights[f"{i}.weight"] = rng.uniform(-bound, bound, (s.out_channels, s.in_channels)).astype(dtype)
            weights[f"{i}.bias"] = np.zeros(s.out_channels, dtype)
        elif s.kind == "batchnorm2d":
            c = s.out_channels
            weights[f"{i}.weight"] = np.ones(c, dtype)
            weights[f"{i}.bias"] = np.zeros(c, dtype)
            weights[f"{i}.running_mean"] = np.zeros(c, dtype)
            weights[f"{i}.running_var"] = np.ones(c, dtype)
    return ModelGraph(layers, weights, num_classes, tuple(input_shape), shapes)


# -- architecture files ------------------------------------------------------


def load_architecture(path):
    """Read an architecture JSON file: ``{"input": [C,H,W], "num_classes": n, "layers": [...]}``."""
    with open(path) as fh:
        doc = json.load(fh)
    return parse_architecture(doc)


def parse_architecture(doc):
    try:
        layers = [LayerSpec.from_dict(d) for d in doc["layers"]]
        return layers, int(doc["num_classes"]), tuple(doc.get("input", (3, 32, 32)))
    except KeyError as exc:
        raise ConfigurationError(f"architecture file is missing {exc}") from None


def dump_architecture(layers, num_classes, input_shape, path=None):
    doc = {"input": list(input_shape), "num_classes": num_classes, "layers": [s.to_dict() for s in layers]}
    text = json.dumps(doc, indent=1)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


# -- forward / backward ------------------------------------------------------


def _conv_forward(x, w, b, spec):
    n, _, h, wd = x.shape
    cout, cin, k, _ = w.shape
    s, p = spec.stride, spec.pad
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    cols = kernels.im2col(np.ascontiguousarray(x), k, s, p)
    out = cols @ w.reshape(cout, cols.shape[1]).T
    out += b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    return out, cols


def _conv_backward(dout, cols, x_shape, w, spec, need_dx):
    n, cin, h, wd = x_shape
    cout = w.shape[0]
    dm = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (dm.T @ cols).reshape(w.shape)
    db = dm.sum(axis=0)
    dx = None
    if need_dx:
        dcols = np.ascontiguousarray(dm @ w.reshape(cout, cols.shape[1]))
        dx = kernels.col2im(dcols, n, cin, h, wd, w.shape[2], spec.stride, spec.pad)
    return dx, dw, db


def forward(model, x, train=False, weights=None, update_stats=True, bn_override=None):
    """Run the graph on ``x``.

    ``train`` selects batch statistics for batch-norm (and, with
    ``update_stats``, updates the running statistics in ``model.weights``).
    ``weights`` substitutes parameter tensors (e.g. noise-perturbed copies);
    ``bn_override`` maps BN layer index to ``(mean, var)`` used in inference mode.

    Returns ``(logits, tape)``; the tape feeds :func:`backward`.
    """
    w = model.weights if weights is None else weights
    outs = {-1: x}
    refs = _ref_counts(model.layers)
    tape = {"train": train, "cache": {}, "bn_batch": {}, "x_shape": x.shape}
    cache = tape["cache"]
    for i, spec in enumerate(model.layers):
        srcs = layer_sources(model.layers, i)
        a = outs[srcs[0]]
        kind = spec.kind
        if kind == "conv2d":
            out, cols = _conv_forward(a, w[f"{i}.weight"], w[f"{i}.bias"], spec)
            cache[i] = (cols, a.shape)
        elif kind == "linear":
            out = a @ w[f"{i}.weight"].T + w[f"{i}.bias"]
            cache[i] = a
        elif kind == "batchnorm2d":
            gamma, beta = w[f"{i}.weight"], w[f"{i}.bias"]
            if train:
                mean = a.mean(axis=(0, 2, 3))
                var = a.var(axis=(0, 2, 3))
                tape["bn_batch"][i] = (mean, var, a.shape[0] * a.shape[2] * a.shape[3])
                if update_stats:
                    rm = model.weights[f"{i}.running_mean"]
                    rv = model.weights[f"{i}.running_var"]
                    rm *= 1 - BN_MOMENTUM
                    rm += BN_MOMENTUM * mean.astype(rm.dtype)
                    rv *= 1 - BN_MOMENTUM
                    rv += BN_MOMENTUM * var.astype(rv.dtype)
            elif bn_override is not None and i in bn_override:
                mean, var = bn_override[i]
            else:
                mean, var = model.weights[f"{i}.running_mean"], model.weights[f"{i}.running_var"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (a - mean[None, :, None, None]) * inv_std[None, :, None, None]
            out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
            cache[i] = (xhat, inv_std)
        elif kind == "relu":
            out = np.maximum(a, 0)
            cache[i] = a > 0
        elif kind == "avgpool2d":
            n, c, h, wd = a.shape
            k = spec.kernel
            if k is None:
                out = a.mean(axis=(2, 3), keepdims=True)
            else:
                ho, wo = h // k, wd // k
                out = a[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))
            cache[i] = a.shape
        elif kind == "flatten":
            out = a.reshape(a.shape[0], -1)
            cache[i] = a.shape
        else:
            out = a + outs[srcs[1]]
        out = out.astype(x.dtype, copy=False)
        outs[i] = out
        for j in srcs:
            refs[j] -= 1
            if refs[j] == 0 and j != -1:
                del outs[j]
    return outs[len(model.layers) - 1], tape


def _ref_counts(layers):
    refs = {-1: 0}
    for i in range(len(layers)):
        refs.setdefault(i, 0)
        for j in layer_sources(layers, i):
            refs[j] = refs.get(j, 0) + 1
    refs[len(layers) - 1] = refs.get(len(layers) - 1, 0) + 1
    return refs


def backward(model, tape, dlogits, weights=None, input_grad=False):
    """Backpropagate ``dlogits`` through the recorded tape; returns a grads dict."""
    w = model.weights if weights is None else weights
    cache = tape["cache"]
    grads = {}
    pending = {len(model.layers) - 1: dlogits}
    for i in range(len(model.layers) - 1, -1, -1):
        g = pending.pop(i, None)
        if g is None:
            continue
        spec = model.layers[i]
        srcs = layer_sources(model.layers, i)
        need_dx = input_grad or any(j != -1 for j in srcs)
        kind = spec.kind
        if kind == "conv2d":
            cols, x_shape = cache[i]
            dx, grads[f"{i}.weight"], grads[f"{i}.bias"] = _conv_backward(
                g, cols, x_shape, w[f"{i}.weight"], spec, need_dx
            )
        elif kind == "linear":
            a = cache[i]
            grads[f"{i}.weight"] = g.T @ a
            grads[f"{i}.bias"] = g.sum(axis=0)
            dx = g @ w[f"{i}.weight"]
        elif kind == "batchnorm2d":
            xhat, inv_std = cache[i]
            gamma = w[f"{i}.weight"]
            grads[f"{i}.weight"] = (g * xhat).sum(axis=(0, 2, 3))
            grads[f"{i}.bias"] = g.sum(axis=(0, 2, 3))
            dxhat = g * gamma[None, :, None, None]
            if tape["train"]:
                m = g.shape[0] * g.shape[2] * g.shape[3]
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                dx = (dxhat - s1 / m - xhat * s2 / m) * inv_std[None, :, None, None]
            else:
                dx = dxhat * inv_std[None, :, None, None]
        elif kind == "relu":
            dx = g * cache[i]
        elif kind == "avgpool2d":
            n, c, h, wd = cache[i]
            k = spec.kernel
            if k is None:
                dx = np.broadcast_to(g / (h * wd), (n, c, h, wd)).copy()
            else:
                ho, wo = h // k, wd // k
                dx = np.zeros((n, c, h, wd), g.dtype)
                dx[:, :, : ho * k, : wo * k] = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        elif kind == "flatten":
            dx = g.reshape(cache[i])
        else:
            dx = g
        if dx is None:
            continue
        dx = dx.astype(g.dtype, copy=False)
        for j in srcs:
            if j == -1 and not input_grad:
                continue
            pending[j] = dx if j not in pending else pending[j] + dx
    if input_grad:
        grads["input"] = pending.get(-1)
    return grads


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy; returns ``(loss, dlogits)``."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    loss = -float(np.mean(logp[np.arange(n), labels], dtype=np.float64))
    d = e / s
    d[np.arange(n), labels] -= 1
    return loss, d / n


def check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes}); got range [{labels.min()}, {labels.max()}]")
    return labels


# -- optimization ------------------------------------------------------------


class SGD:
    """Momentum SGD (``v = mu*v + g; w -= lr*v``).

    With ``masks``, only masked elements have their velocity and value
    touched, so parameters outside a sampled sub-net stay bit-identical.
    """

    def __init__(self, lr, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, params, grads, masks=None):
        for name, g in grads.items():
            if name not in params:
                continue
            p = params[name]
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p)
            m = None if masks is None else masks.get(name)
            if m is None:
                v *= self.momentum
                v += g
                if self.lr != 0:
                    p -= self.lr * v
            else:
                v[m] = self.momentum * v[m] + g[m]
                if self.lr != 0:
                    p[m] -= self.lr * v[m]


def _diagnostics(model, tape):
    lines = []
    for i, spec in enumerate(model.layers):
        if spec.kind in PARAMETRIC:
            wt = model.weights[f"{i}.weight"]
            lines.append(f"layer {i} ({spec.kind}): max|w|={np.abs(wt).max() if wt.size else 0:.3g}"
                         f" finite={bool(np.isfinite(wt).all())}")
    return "; ".join(lines)


def train_step(model, batch, hyper, optimizer=None):
    """One momentum-SGD step on the full model; returns the batch loss."""
    x, y = batch
    y = check_labels(y, model.num_classes)
    if optimizer is None:
        if model.optimizer is None or model.optimizer.lr != hyper.learning_rate:
            model.optimizer = SGD(hyper.learning_rate, hyper.momentum)
        optimizer = model.optimizer
    logits, tape = forward(model, x, train=True)
    loss, d = cross_entropy(logits, y)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}: {_diagnostics(model, tape)}")
    grads = backward(model, tape, d)
    optimizer.step(model.weights, grads)
    return loss


def predict(model, x, batch_size=512, bn_override=None):
    outs = []
    for s in range(0, len(x), batch_size):
        logits, _ = forward(model, x[s:s + batch_size], train=False, bn_override=bn_override)
        outs.append(logits)
    return np.concatenate(outs) if outs else np.zeros((0, model.num_classes), np.float32)


def _xy(dataset):
    if isinstance(dataset, tuple):
        return dataset
    return dataset.x, dataset.y


def _batches(dataset, batch_size, rng):
    if hasattr(dataset, "batches"):
        yield from dataset.batches(batch_size, rng)
        return
    x, y = dataset
    order = rng.permutation(len(y))
    for s in range(0, len(y), batch_size):
        idx = order[s:s + batch_size]
        yield x[idx], y[idx]


def evaluate_accuracy(model, dataset, batch_size=512, bn_override=None):
    """Top-1 accuracy in inference mode."""
    x, y = _xy(dataset)
    if len(y) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    logits = predict(model, x, batch_size, bn_override)
    return float(np.mean(logits.argmax(axis=1) == np.asarray(y)))


def train_epochs(model, dataset, hyper, epochs, log=None):
    """Plain full-model training loop used by the pretrain stage."""
    rng = np.random.default_rng(hyper.seed)
    opt = SGD(hyper.learning_rate, hyper.momentum)
    losses = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for x, y in _batches(dataset, hyper.batch_size, rng):
            total += train_step(model, (x, y), hyper, opt) * len(y)
            count += len(y)
        losses.append(total / count)
        if log is not None:
            log(f"epoch {epoch + 1}/{epochs} loss {losses[-1]:.4f}")
    return losses
