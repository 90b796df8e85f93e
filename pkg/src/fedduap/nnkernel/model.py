"""Small conv/dense networks with hand-written forward and backward passes.

Parameters are float64 numpy arrays. The flat parameter layout is fixed:
layers in order, and within each parametrised layer the weight tensor
(row-major) followed by the bias vector.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MODEL_FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Input or parameter shapes do not compose; names the offending layer."""

    def __init__(self, layer_index: int, kind: str, message: str):
        self.layer_index = layer_index
        self.kind = kind
        super().__init__(f"layer {layer_index} ({kind}): {message}")


@dataclass
class Conv2D:
    weight: np.ndarray  # (out_channels, in_channels, k, k)
    bias: np.ndarray  # (out_channels,)
    stride: int = 1
    padding: int = 0
    kind: ClassVar[str] = "conv2d"

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def output_shape(self, shape):
        c, h, w = shape
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def dims(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
        }


@dataclass
class Dense:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    kind: ClassVar[str] = "dense"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def output_shape(self, shape):
        return (self.out_dim,)

    def dims(self) -> dict:
        return {"in_dim": self.in_dim, "out_dim": self.out_dim}


@dataclass
class ReLU:
    kind: ClassVar[str] = "relu"

    def output_shape(self, shape):
        return tuple(shape)

    def dims(self) -> dict:
        return {}


@dataclass
class Flatten:
    kind: ClassVar[str] = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def dims(self) -> dict:
        return {}


PARAM_LAYERS = (Conv2D, Dense)


@dataclass
class Model:
    layers: list
    input_shape: tuple  # (channels, height, width)
    _shapes: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self._shapes = self._check_shapes()

    def _check_shapes(self) -> list:
        shapes = [self.input_shape]
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2D):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ShapeError(i, layer.kind, f"expects {layer.in_channels} input channels, got shape {shape}")
                if layer.bias.shape != (layer.out_channels,):
                    raise ShapeError(i, layer.kind, "bias does not match out_channels")
                if layer.weight.shape[2] != layer.weight.shape[3]:
                    raise ShapeError(i, layer.kind, "kernel must be square")
                if layer.out_channels < 1:
                    raise ShapeError(i, layer.kind, "needs at least one filter")
            elif isinstance(layer, Dense):
                if len(shape) != 1 or shape[0] != layer.in_dim:
                    raise ShapeError(i, layer.kind, f"expects input of size {layer.in_dim}, got shape {shape}")
                if layer.bias.shape != (layer.out_dim,):
                    raise ShapeError(i, layer.kind, "bias does not match out_dim")
            shape = layer.output_shape(shape)
            if any(d < 1 for d in shape):
                raise ShapeError(i, layer.kind, f"output shape {shape} is empty")
            shapes.append(shape)
        return shapes

    @property
    def shapes(self) -> list:
        """Activation shapes: entry i is the input shape of layer i; the last is the output."""
        return list(self._shapes)

    @property
    def num_classes(self) -> int:
        return self._shapes[-1][0]

    def parameter_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers if isinstance(l, PARAM_LAYERS))

    def copy(self) -> "Model":
        return copy.deepcopy(self)


def parameter_count(model: Model) -> int:
    return model.parameter_count()


# ---------------------------------------------------------------- init


def init_model(input_shape, conv_specs, num_classes, seed=0, hidden=()) -> Model:
    """Build conv -> ReLU blocks, Flatten, optional hidden Dense+ReLU, Dense head.

    ``conv_specs`` is a sequence of ``(filters, kernel, stride, padding)``.
    Weights are drawn He-uniform from a generator seeded with ``seed``.
    """
    rng = np.random.default_rng(seed)
    layers = []
    shape = tuple(input_shape)
    for filters, k, stride, pad in conv_specs:
        fan_in = shape[0] * k * k
        bound = np.sqrt(6.0 / fan_in)
        conv = Conv2D(
            rng.uniform(-bound, bound, size=(filters, shape[0], k, k)),
            np.zeros(filters),
            stride=stride,
            padding=pad,
        )
        layers += [conv, ReLU()]
        shape = conv.output_shape(shape)
    layers.append(Flatten())
    width = int(np.prod(shape))
    for h in hidden:
        bound = np.sqrt(6.0 / width)
        layers += [Dense(rng.uniform(-bound, bound, size=(h, width)), np.zeros(h)), ReLU()]
        width = h
    bound = np.sqrt(6.0 / (width + num_classes))
    layers.append(Dense(rng.uniform(-bound, bound, size=(num_classes, width)), np.zeros(num_classes)))
    return Model(layers, input_shape)


# ---------------------------------------------------------------- conv kernels


def _im2col(x, k, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(dcols, x_shape, k, stride, padding, ho, wo):
    n, c, h, w = x_shape
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    d = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def conv2d_forward(layer: Conv2D, x):
    cols, ho, wo = _im2col(x, layer.kernel_size, layer.stride, layer.padding)
    out = cols @ layer.weight.reshape(layer.out_channels, -1).T + layer.bias
    out = out.reshape(x.shape[0], ho, wo, layer.out_channels).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


# ---------------------------------------------------------------- forward / backward


@dataclass
class ForwardResult:
    loss: float
    logits: np.ndarray
    feature_maps: dict  # conv layer index -> (batch, filters, H, W)
    activations: list = field(repr=False)  # input of each layer, then the logits
    caches: list = field(repr=False)


def _softmax_xent(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    total = ez.sum(axis=1, keepdims=True)
    probs = ez / total
    n = logits.shape[0]
    logp = z[np.arange(n), labels] - np.log(total[:, 0])
    return float(-logp.mean()), probs


def _check_batch(model: Model, x, labels):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(0, model.layers[0].kind if model.layers else "input",
                         f"batch shape {x.shape} does not match input shape {model.input_shape}")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (x.shape[0],):
            raise ValueError(f"expected {x.shape[0]} labels, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
            raise ValueError(f"labels outside 0..{model.num_classes - 1}")
    return x, labels


def _feature_map_owner(model: Model, i: int) -> int:
    """Conv output is exposed after the ReLU that directly follows it, if any."""
    nxt = i + 1
    if nxt < len(model.layers) and isinstance(model.layers[nxt], ReLU):
        return nxt + 1
    return nxt


def logits(model: Model, x) -> np.ndarray:
    x, _ = _check_batch(model, x, None)
    h = x
    for layer in model.layers:
        h = _layer_forward(layer, h)[0]
    return h


def feature_maps(model: Model, x) -> dict:
    """Per-Conv2D output maps (after a directly following ReLU), keyed by layer index."""
    x, _ = _check_batch(model, x, None)
    acts = [x]
    h = x
    for layer in model.layers:
        h = _layer_forward(layer, h)[0]
        acts.append(h)
    return {
        i: acts[_feature_map_owner(model, i)]
        for i, layer in enumerate(model.layers)
        if isinstance(layer, Conv2D)
    }


def _layer_forward(layer, h):
    if isinstance(layer, Conv2D):
        return conv2d_forward(layer, h)
    if isinstance(layer, Dense):
        return h @ layer.weight.T + layer.bias, None
    if isinstance(layer, ReLU):
        return np.maximum(h, 0.0), None
    if isinstance(layer, Flatten):
        return h.reshape(h.shape[0], -1), None
    raise TypeError(f"unknown layer {layer!r}")


def forward(model: Model, x, labels) -> ForwardResult:
    """Mean softmax cross-entropy over the batch, with per-conv feature maps."""
    x, labels = _check_batch(model, x, labels)
    acts = [x]
    caches = []
    h = x
    for layer in model.layers:
        h, cache = _layer_forward(layer, h)
        acts.append(h)
        caches.append(cache)
    loss, _ = _softmax_xent(h, labels)
    fmaps = {
        i: acts[_feature_map_owner(model, i)]
        for i, layer in enumerate(model.layers)
        if isinstance(layer, Conv2D)
    }
    return ForwardResult(loss, h, fmaps, acts, caches)


def _backward_from(model: Model, fwd: ForwardResult, labels, douts=None) -> list:
    """Per-layer parameter gradients; ``douts`` (if given) collects dL/d(output) of each layer."""
    n = fwd.logits.shape[0]
    _, probs = _softmax_xent(fwd.logits, labels)
    delta = probs
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        a_in = fwd.activations[i]
        if douts is not None:
            douts[i] = delta
        if isinstance(layer, Dense):
            grads[i] = (delta.T @ a_in, delta.sum(axis=0))
            if i:
                delta = delta @ layer.weight
        elif isinstance(layer, Conv2D):
            o = layer.out_channels
            d2 = delta.transpose(0, 2, 3, 1).reshape(-1, o)
            cols = fwd.caches[i]
            grads[i] = ((d2.T @ cols).reshape(layer.weight.shape), d2.sum(axis=0))
            if i:
                _, _, ho, wo = delta.shape
                dcols = d2 @ layer.weight.reshape(o, -1)
                delta = _col2im(dcols, a_in.shape, layer.kernel_size, layer.stride, layer.padding, ho, wo)
        elif isinstance(layer, ReLU):
            delta = delta * (a_in > 0)
        elif isinstance(layer, Flatten):
            delta = delta.reshape(a_in.shape)
    return grads


def backward(model: Model, x, labels) -> np.ndarray:
    """Gradient of the mean batch loss, in flat parameter order."""
    return loss_and_grad(model, x, labels)[1]


def loss_and_grad(model: Model, x, labels):
    fwd = forward(model, x, labels)
    labels = np.asarray(labels, dtype=np.int64)
    grads = _backward_from(model, fwd, labels)
    parts = []
    for layer, g in zip(model.layers, grads):
        if isinstance(layer, PARAM_LAYERS):
            parts += [g[0].ravel(), g[1].ravel()]
    flat = np.concatenate(parts) if parts else np.zeros(0)
    return fwd.loss, flat


# ---------------------------------------------------------------- flat parameters


def flatten_params(model: Model) -> np.ndarray:
    parts = []
    for layer in model.layers:
        if isinstance(layer, PARAM_LAYERS):
            parts += [layer.weight.ravel(), layer.bias.ravel()]
    return np.concatenate(parts).astype(np.float64) if parts else np.zeros(0)


def unflatten_params(template: Model, flat) -> Model:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.ndim != 1 or flat.size != template.parameter_count():
        raise ValueError(f"expected {template.parameter_count()} parameters, got {flat.size}")
    out = []
    pos = 0
    for layer in template.layers:
        if isinstance(layer, PARAM_LAYERS):
            nw, nb = layer.weight.size, layer.bias.size
            w = flat[pos : pos + nw].reshape(layer.weight.shape).copy()
            b = flat[pos + nw : pos + nw + nb].copy()
            pos += nw + nb
            if isinstance(layer, Conv2D):
                out.append(Conv2D(w, b, layer.stride, layer.padding))
            else:
                out.append(Dense(w, b))
        else:
            out.append(type(layer)())
    return Model(out, template.input_shape)


def sgd_step(model: Model, grad, lr: float) -> Model:
    """Return a new model with ``w - lr * grad``; ``model`` is not modified."""
    grad = np.asarray(grad, dtype=np.float64)
    m = model.parameter_count()
    if grad.shape != (m,):
        raise ValueError(f"gradient has {grad.size} entries, model has {m} parameters")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    return unflatten_params(model, flatten_params(model) - lr * grad)


# ---------------------------------------------------------------- serialization


def _floats(a) -> list:
    # repr of a Python float round-trips exactly (shortest repr, <= 17 digits)
    return [float(v) for v in np.asarray(a).ravel()]


def model_to_dict(model: Model) -> dict:
    layers = []
    for layer in model.layers:
        entry = {"kind": layer.kind, "dims": layer.dims()}
        if isinstance(layer, PARAM_LAYERS):
            entry["weights"] = _floats(layer.weight)
            entry["bias"] = _floats(layer.bias)
        layers.append(entry)
    return {"version": MODEL_FORMAT_VERSION, "input_shape": list(model.input_shape), "layers": layers}


def model_from_dict(doc: dict) -> Model:
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('version')!r}")
    layers = []
    for i, entry in enumerate(doc["layers"]):
        kind, dims = entry["kind"], entry.get("dims", {})
        if kind == "conv2d":
            k = dims["kernel_size"]
            w = np.array(entry["weights"], dtype=np.float64).reshape(dims["out_channels"], dims["in_channels"], k, k)
            layers.append(Conv2D(w, np.array(entry["bias"], dtype=np.float64), dims["stride"], dims["padding"]))
        elif kind == "dense":
            w = np.array(entry["weights"], dtype=np.float64).reshape(dims["out_dim"], dims["in_dim"])
            layers.append(Dense(w, np.array(entry["bias"], dtype=np.float64)))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise ValueError(f"layer {i}: unknown kind {kind!r}")
    return Model(layers, tuple(doc["input_shape"]))


def save_model(model: Model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path) -> Model:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
