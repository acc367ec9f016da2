"""Target models: layer-graph specs, init, forward/gradients, hashing.

Two gradient paths exist on purpose:

* ``loss_and_grads`` runs the tape backward — the cheap path used to
  produce leaked gradients and to train models.
* ``grads_graph`` spells out the backward formulas as forward ops on a
  graph, so an attack objective built from those gradients can itself be
  differentiated with plain first-order reverse mode.

Both paths are tested to agree to machine precision and against finite
differences.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import rng
from . import tensor as T
from .tensor import Graph, Var


class SpecError(ValueError):
    """Raised when a layer chain is inconsistent."""


@dataclass(frozen=True)
class Linear:
    in_dim: int
    out_dim: int
    bias: bool = True


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int
    k: int
    stride: int = 1
    pad: int = 0
    bias: bool = True


@dataclass(frozen=True)
class Activation:
    kind: str  # relu | sigmoid | tanh | leaky_relu
    alpha: float = 0.01  # used by leaky_relu only


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Reshape:
    shape: tuple


@dataclass(frozen=True)
class Head:
    """Linear classifier with bias; exactly one, always last."""

    in_dim: int
    out_dim: int


ACTIVATION_KINDS = ("relu", "sigmoid", "tanh", "leaky_relu")


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple  # (C, H, W)
    num_classes: int


def _layer_out_shape(layer, shape, idx):
    """Shape of one layer's output given its input shape (no batch axis)."""
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Reshape):
        if int(np.prod(layer.shape)) != int(np.prod(shape)):
            raise SpecError(
                f"layer {idx} (reshape to {layer.shape}): element count "
                f"mismatch with input shape {shape}"
            )
        return tuple(layer.shape)
    if isinstance(layer, (Linear, Head)):
        if len(shape) != 1 or shape[0] != layer.in_dim:
            raise SpecError(
                f"layer {idx} ({type(layer).__name__} in={layer.in_dim}): "
                f"expects flat input of that width, got shape {shape}"
            )
        return (layer.out_dim,)
    if isinstance(layer, Conv):
        if len(shape) != 3 or shape[0] != layer.in_ch:
            raise SpecError(
                f"layer {idx} (conv in_ch={layer.in_ch}): input shape {shape} "
                "does not match"
            )
        h = (shape[1] + 2 * layer.pad - layer.k) // layer.stride + 1
        w = (shape[2] + 2 * layer.pad - layer.k) // layer.stride + 1
        if h < 1 or w < 1:
            raise SpecError(f"layer {idx} (conv): output collapses on input {shape}")
        return (layer.out_ch, h, w)
    if isinstance(layer, Activation):
        if layer.kind not in ACTIVATION_KINDS:
            raise SpecError(f"layer {idx}: unknown activation {layer.kind!r}")
        return shape
    raise SpecError(f"layer {idx}: unknown layer type {type(layer).__name__}")


def validate_spec(spec: ModelSpec) -> None:
    """Check the layer chain; raises SpecError naming the first broken link."""
    heads = [i for i, l in enumerate(spec.layers) if isinstance(l, Head)]
    if len(heads) != 1 or heads[0] != len(spec.layers) - 1:
        raise SpecError("spec must have exactly one classifier head, last")
    shape = tuple(spec.input_shape)
    for idx, layer in enumerate(spec.layers):
        shape = _layer_out_shape(layer, shape, idx)
    if shape != (spec.num_classes,):
        raise SpecError(
            f"head produces {shape[0]} logits but spec declares "
            f"{spec.num_classes} classes"
        )


def param_names(spec: ModelSpec) -> list:
    names = []
    for idx, layer in enumerate(spec.layers):
        if isinstance(layer, (Linear, Head, Conv)):
            names.append(f"L{idx}.weight")
            if not isinstance(layer, Conv) or layer.bias:
                if isinstance(layer, Linear) and not layer.bias:
                    continue
                names.append(f"L{idx}.bias")
    return names


def head_index(spec: ModelSpec) -> int:
    return len(spec.layers) - 1


def build_model(spec: ModelSpec, init: str = "kaiming_uniform", seed: int = 0) -> dict:
    """Initialize parameters: Kaiming-uniform fan-in weights, zero biases."""
    validate_spec(spec)
    if init != "kaiming_uniform":
        raise ValueError(f"unknown init scheme {init!r}")
    params = {}
    for idx, layer in enumerate(spec.layers):
        g = rng.stream(seed, idx)
        if isinstance(layer, (Linear, Head)):
            fan_in = layer.in_dim
            bound = math.sqrt(6.0 / fan_in)
            params[f"L{idx}.weight"] = g.uniform(
                -bound, bound, size=(layer.out_dim, layer.in_dim)
            )
            if isinstance(layer, Head) or layer.bias:
                params[f"L{idx}.bias"] = np.zeros(layer.out_dim)
        elif isinstance(layer, Conv):
            fan_in = layer.in_ch * layer.k * layer.k
            bound = math.sqrt(6.0 / fan_in)
            params[f"L{idx}.weight"] = g.uniform(
                -bound, bound, size=(layer.out_ch, layer.in_ch, layer.k, layer.k)
            )
            if layer.bias:
                params[f"L{idx}.bias"] = np.zeros(layer.out_ch)
    return params


def _act(layer: Activation, pre: Var) -> Var:
    if layer.kind == "relu":
        return T.relu(pre)
    if layer.kind == "sigmoid":
        return T.sigmoid(pre)
    if layer.kind == "tanh":
        return T.tanh(pre)
    return T.leaky_relu(pre, layer.alpha)


def _act_deriv(layer: Activation, pre: Var, out: Var) -> Var:
    """Derivative of the activation as a graph value (differentiable)."""
    if layer.kind == "relu":
        return T.heaviside(pre)
    if layer.kind == "sigmoid":
        # s * (1 - s)
        return T.mul(out, T.shift(T.scale(out, -1.0), 1.0))
    if layer.kind == "tanh":
        return T.shift(T.scale(T.mul(out, out), -1.0), 1.0)
    # leaky: 1 where pre > 0 else alpha
    return T.shift(T.scale(T.heaviside(pre), 1.0 - layer.alpha), layer.alpha)


def forward_graph(g: Graph, spec: ModelSpec, pvars: dict, x: Var):
    """Record the forward pass; returns (logits, per-layer trace).

    The trace holds (layer, input var, pre-activation var, output var) per
    layer, enough to spell out the backward pass.
    """
    if x.value.shape[1:] != tuple(spec.input_shape):
        raise SpecError(
            f"input shape {x.value.shape[1:]} does not match spec "
            f"{tuple(spec.input_shape)}"
        )
    trace = []
    cur = x
    for idx, layer in enumerate(spec.layers):
        inp = cur
        pre = None
        if isinstance(layer, Flatten):
            cur = T.flatten_batch(cur)
        elif isinstance(layer, Reshape):
            cur = T.reshape(cur, (cur.value.shape[0],) + tuple(layer.shape))
        elif isinstance(layer, (Linear, Head)):
            w = pvars[f"L{idx}.weight"]
            pre = T.matmul(cur, T.transpose(w))
            bname = f"L{idx}.bias"
            if bname in pvars:
                pre = T.bias_add(pre, pvars[bname])
            cur = pre
        elif isinstance(layer, Conv):
            w = pvars[f"L{idx}.weight"]
            pre = T.conv2d(cur, w, stride=layer.stride, pad=layer.pad)
            bname = f"L{idx}.bias"
            if bname in pvars:
                pre = T.bias_add(pre, pvars[bname])
            cur = pre
        elif isinstance(layer, Activation):
            pre = inp
            cur = _act(layer, inp)
        trace.append((layer, inp, pre, cur))
    return cur, trace


def forward(spec: ModelSpec, params: dict, x: np.ndarray) -> np.ndarray:
    """Plain forward pass returning logits."""
    g = Graph()
    pvars = {n: g.leaf(v, n) for n, v in params.items()}
    logits, _ = forward_graph(g, spec, pvars, g.leaf(T.as_tensor(x)))
    return logits.value


def loss_and_grads(spec: ModelSpec, params: dict, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy loss and gradient for every parameter tensor."""
    g = Graph()
    pvars = {n: g.leaf(v, n) for n, v in params.items()}
    logits, _ = forward_graph(g, spec, pvars, g.leaf(T.as_tensor(x)))
    loss = T.softmax_cross_entropy(logits, y)
    grads = g.backward(loss)
    out = {n: grads[n] for n in params}
    for n, gr in out.items():
        T.check_finite(gr, f"gradient of {n}")
    return float(loss.value), out


def grads_graph(g: Graph, spec: ModelSpec, pvars: dict, x: Var, y: np.ndarray):
    """Cross-entropy gradients spelled out as graph ops.

    Returns (loss var, {param name: gradient var}). The gradient vars are
    ordinary forward values, so a distance between them and leaked
    gradients can be differentiated w.r.t. ``x`` (or w.r.t. the params).
    """
    logits, trace = forward_graph(g, spec, pvars, x)
    loss = T.softmax_cross_entropy(logits, y)
    batch = x.value.shape[0]
    y = np.asarray(y, dtype=np.int64)
    onehot = np.zeros((batch, spec.num_classes))
    onehot[np.arange(batch), y] = 1.0
    # d loss / d logits for the batch-mean cross entropy
    delta = T.scale(T.sub(T.softmax(logits), g.leaf(onehot)), 1.0 / batch)
    grads: dict = {}
    for idx in range(len(spec.layers) - 1, -1, -1):
        layer, inp, pre, out = trace[idx]
        if isinstance(layer, (Linear, Head)):
            grads[f"L{idx}.weight"] = T.matmul(T.transpose(delta), inp)
            if f"L{idx}.bias" in pvars:
                grads[f"L{idx}.bias"] = T.sum_axes(delta, (0,))
            delta = T.matmul(delta, pvars[f"L{idx}.weight"])
        elif isinstance(layer, Conv):
            w = pvars[f"L{idx}.weight"]
            grads[f"L{idx}.weight"] = T.conv2d_weight_grad(
                inp, delta, w.value.shape, stride=layer.stride, pad=layer.pad
            )
            if f"L{idx}.bias" in pvars:
                grads[f"L{idx}.bias"] = T.sum_axes(delta, (0, 2, 3))
            delta = T.conv2d_input_grad(
                delta, w, inp.value.shape, stride=layer.stride, pad=layer.pad
            )
        elif isinstance(layer, Activation):
            delta = T.mul(delta, _act_deriv(layer, pre, out))
        elif isinstance(layer, (Flatten, Reshape)):
            delta = T.reshape(delta, inp.value.shape)
    return loss, grads


def preactivations(spec: ModelSpec, params: dict, x: np.ndarray) -> list:
    """Pre-activation values feeding each activation layer."""
    g = Graph()
    pvars = {n: g.leaf(v, n) for n, v in params.items()}
    _, trace = forward_graph(g, spec, pvars, g.leaf(T.as_tensor(x)))
    return [
        pre.value
        for layer, _inp, pre, _out in trace
        if isinstance(layer, Activation)
    ]


# ---------------------------------------------------------------------------
# identity & serialization
# ---------------------------------------------------------------------------


def _layer_descriptor(layer) -> str:
    if isinstance(layer, Flatten):
        return "flatten"
    if isinstance(layer, Reshape):
        return f"reshape{tuple(layer.shape)}"
    if isinstance(layer, Linear):
        return f"linear({layer.in_dim}->{layer.out_dim},bias={layer.bias})"
    if isinstance(layer, Conv):
        return (
            f"conv({layer.in_ch}->{layer.out_ch},k={layer.k},"
            f"s={layer.stride},p={layer.pad},bias={layer.bias})"
        )
    if isinstance(layer, Activation):
        return f"act({layer.kind})"
    if isinstance(layer, Head):
        return f"head({layer.in_dim}->{layer.out_dim})"
    raise SpecError(f"unknown layer type {type(layer).__name__}")


def layer_descriptors(spec: ModelSpec) -> list:
    return [_layer_descriptor(l) for l in spec.layers]


def structural_hash(spec: ModelSpec) -> str:
    """Digest of layer kinds/shapes/order; blind to parameter values."""
    text = ";".join(
        layer_descriptors(spec)
        + [f"input{tuple(spec.input_shape)}", f"classes={spec.num_classes}"]
    )
    return hashlib.sha256(text.encode()).hexdigest()


def spec_to_json(spec: ModelSpec) -> str:
    layers = []
    for l in spec.layers:
        d = {"type": type(l).__name__}
        for f in l.__dataclass_fields__:
            v = getattr(l, f)
            d[f] = list(v) if isinstance(v, tuple) else v
        layers.append(d)
    return json.dumps(
        {
            "layers": layers,
            "input_shape": list(spec.input_shape),
            "num_classes": spec.num_classes,
        }
    )


_LAYER_TYPES = {
    "Linear": Linear,
    "Conv": Conv,
    "Activation": Activation,
    "Flatten": Flatten,
    "Reshape": Reshape,
    "Head": Head,
}


def spec_from_json(text: str) -> ModelSpec:
    raw = json.loads(text)
    layers = []
    for d in raw["layers"]:
        cls = _LAYER_TYPES[d.pop("type")]
        kwargs = {
            k: tuple(v) if isinstance(v, list) else v for k, v in d.items()
        }
        layers.append(cls(**kwargs))
    return ModelSpec(
        layers=tuple(layers),
        input_shape=tuple(raw["input_shape"]),
        num_classes=raw["num_classes"],
    )


# ---------------------------------------------------------------------------
# the canonical zoo
# ---------------------------------------------------------------------------


def mlp2(input_shape=(1, 8, 8), hidden=32, num_classes=4, act="relu") -> ModelSpec:
    d = int(np.prod(input_shape))
    return ModelSpec(
        layers=(Flatten(), Linear(d, hidden), Activation(act), Head(hidden, num_classes)),
        input_shape=tuple(input_shape),
        num_classes=num_classes,
    )


def cnn_s(input_shape=(1, 8, 8), width=8, num_classes=4, act="relu") -> ModelSpec:
    c, h, w = input_shape
    return ModelSpec(
        layers=(
            Conv(c, width, 3, 1, 1),
            Activation(act),
            Conv(width, 2 * width, 3, 1, 1),
            Activation(act),
            Flatten(),
            Head(2 * width * h * w, num_classes),
        ),
        input_shape=tuple(input_shape),
        num_classes=num_classes,
    )


def cnn_s_deep(input_shape=(1, 8, 8), width=8, num_classes=4, act="relu") -> ModelSpec:
    """CNN-S with a doubled conv stack."""
    c, h, w = input_shape
    return ModelSpec(
        layers=(
            Conv(c, width, 3, 1, 1),
            Activation(act),
            Conv(width, width, 3, 1, 1),
            Activation(act),
            Conv(width, 2 * width, 3, 1, 1),
            Activation(act),
            Conv(2 * width, 2 * width, 3, 1, 1),
            Activation(act),
            Flatten(),
            Head(2 * width * h * w, num_classes),
        ),
        input_shape=tuple(input_shape),
        num_classes=num_classes,
    )


def linear_first(input_shape=(1, 8, 8), neurons=128, num_classes=4, act="relu") -> ModelSpec:
    """Wide fully connected layer straight on the pixels."""
    d = int(np.prod(input_shape))
    return ModelSpec(
        layers=(
            Flatten(),
            Linear(d, neurons),
            Activation(act),
            Head(neurons, num_classes),
        ),
        input_shape=tuple(input_shape),
        num_classes=num_classes,
    )


ZOO = {
    "mlp2": mlp2,
    "cnn_s": cnn_s,
    "cnn_s_deep": cnn_s_deep,
    "linear_first": linear_first,
}
