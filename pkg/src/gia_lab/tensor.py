"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are numpy float64 arrays; a :class:`Graph` is a tape of primitive-op
nodes recorded during the forward pass. ``Graph.backward`` walks the tape
once in reverse and returns a gradient for every leaf.

Only first-order differentiation is provided. Code that needs gradients
*of* gradients (the attack objectives) builds the backward formulas of the
target model explicitly as forward ops — see ``models.grads_graph``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels

TV_EPS = 1e-8

# op kinds accepted by the public forward_op dispatcher
PUBLIC_OPS = (
    "matmul",
    "conv2d",
    "add",
    "scale",
    "relu",
    "sigmoid",
    "tanh",
    "leaky_relu",
    "softmax_cross_entropy",
    "mse",
    "total_variation",
    "reshape",
    "slice",
    "sum",
    "mean",
)


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for an op."""


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=np.float64)


def check_finite(value: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{what} contains non-finite entries")
    return value


def _shape_err(op: str, *shapes) -> ShapeError:
    pretty = ", ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: invalid operand shapes {pretty}")


class Node:
    """One primitive-op record on the tape."""

    __slots__ = ("idx", "op", "value", "parents", "vjp", "name", "requires_grad")

    def __init__(self, idx, op, value, parents, vjp, name=None, requires_grad=True):
        self.idx = idx
        self.op = op
        self.value = value
        self.parents = parents  # tuple of parent Nodes
        self.vjp = vjp  # grad_out -> tuple of parent grads (None = no flow)
        self.name = name
        self.requires_grad = requires_grad


class Var:
    """Handle to a tape node; carries the graph it was recorded on."""

    __slots__ = ("graph", "node")

    def __init__(self, graph: "Graph", node: Node):
        self.graph = graph
        self.node = node

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @property
    def shape(self) -> tuple:
        return self.node.value.shape

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return sub(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return mul(self, other)


class Graph:
    """Tape of primitive ops. Confined to one worker; not thread-safe."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, name: str | None = None, grad: bool = True) -> Var:
        """A tape input. ``grad=False`` marks a constant: backward neither
        returns nor propagates a gradient for it."""
        node = Node(len(self.nodes), "leaf", as_tensor(value), (), None, name, grad)
        self.nodes.append(node)
        return Var(self, node)

    def record(self, op, value, parents: Sequence[Var], vjp: Callable, name=None) -> Var:
        pnodes = tuple(p.node for p in parents)
        node = Node(
            len(self.nodes),
            op,
            value,
            pnodes,
            vjp,
            name,
            any(p.requires_grad for p in pnodes),
        )
        self.nodes.append(node)
        return Var(self, node)

    def backward(self, loss: Var) -> dict:
        """Gradients of a scalar loss for every leaf.

        Returns {node idx: gradient array}; named leaves are also keyed by
        name. Each node is visited exactly once, in reverse tape order.
        """
        if loss.node.value.shape != ():
            raise ShapeError(
                f"backward: loss must be scalar-shaped, got {loss.node.value.shape}"
            )
        grads: dict[int, np.ndarray] = {loss.node.idx: np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes[: loss.node.idx + 1]):
            if node.vjp is None:
                continue  # leaf: keep its accumulated gradient
            g = grads.pop(node.idx, None)
            if g is None:
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(parent.idx)
                grads[parent.idx] = pg if acc is None else acc + pg
        out: dict = {}
        for node in self.nodes:
            if node.op == "leaf" and node.requires_grad:
                g = grads.get(node.idx)
                if g is None:
                    g = np.zeros_like(node.value)
                out[node.idx] = g
                if node.name is not None:
                    out[node.name] = g
        return out


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise _shape_err("matmul", av.shape, bv.shape)
    out = av @ bv
    na, nb = a.node, b.node

    def vjp(g):
        return (
            g @ bv.T if na.requires_grad else None,
            av.T @ g if nb.requires_grad else None,
        )

    return a.graph.record("matmul", out, (a, b), vjp)


def transpose(a: Var) -> Var:
    if a.value.ndim != 2:
        raise _shape_err("transpose", a.value.shape)
    out = np.ascontiguousarray(a.value.T)

    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return a.graph.record("transpose", out, (a,), vjp)


def conv2d(x: Var, w: Var, stride: int = 1, pad: int = 0) -> Var:
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise _shape_err("conv2d", xv.shape, wv.shape)
    if (xv.shape[2] + 2 * pad - wv.shape[2]) % stride or (
        xv.shape[3] + 2 * pad - wv.shape[3]
    ) % stride:
        raise _shape_err("conv2d (stride does not tile input)", xv.shape, wv.shape)
    if xv.shape[2] + 2 * pad < wv.shape[2] or xv.shape[3] + 2 * pad < wv.shape[3]:
        raise _shape_err("conv2d (kernel larger than padded input)", xv.shape, wv.shape)
    out = kernels.conv2d_forward(xv, wv, stride, pad)
    nx, nw = x.node, w.node

    def vjp(g):
        return (
            kernels.conv2d_input_grad(g, wv, xv.shape, stride, pad)
            if nx.requires_grad
            else None,
            kernels.conv2d_weight_grad(xv, g, wv.shape, stride, pad)
            if nw.requires_grad
            else None,
        )

    return x.graph.record("conv2d", out, (x, w), vjp)


def conv2d_input_grad(dy: Var, w: Var, x_shape: tuple, stride: int = 1, pad: int = 0) -> Var:
    """Adjoint of conv2d in its input (a transposed convolution)."""
    dyv, wv = dy.value, w.value
    if dyv.ndim != 4 or wv.ndim != 4 or dyv.shape[1] != wv.shape[0]:
        raise _shape_err("conv2d_input_grad", dyv.shape, wv.shape)
    x_shape = (dyv.shape[0],) + tuple(x_shape[1:])
    out = kernels.conv2d_input_grad(dyv, wv, x_shape, stride, pad)
    ndy, nw = dy.node, w.node

    def vjp(g):
        return (
            kernels.conv2d_forward(g, wv, stride, pad) if ndy.requires_grad else None,
            kernels.conv2d_weight_grad(g, dyv, wv.shape, stride, pad)
            if nw.requires_grad
            else None,
        )

    return dy.graph.record("conv2d_input_grad", out, (dy, w), vjp)


def conv2d_weight_grad(x: Var, dy: Var, w_shape: tuple, stride: int = 1, pad: int = 0) -> Var:
    """Adjoint of conv2d in its weight."""
    xv, dyv = x.value, dy.value
    if xv.ndim != 4 or dyv.ndim != 4 or xv.shape[0] != dyv.shape[0]:
        raise _shape_err("conv2d_weight_grad", xv.shape, dyv.shape)
    out = kernels.conv2d_weight_grad(xv, dyv, tuple(w_shape), stride, pad)
    nx, ndy = x.node, dy.node

    def vjp(g):
        return (
            kernels.conv2d_input_grad(dyv, g, xv.shape, stride, pad)
            if nx.requires_grad
            else None,
            kernels.conv2d_forward(xv, g, stride, pad) if ndy.requires_grad else None,
        )

    return x.graph.record("conv2d_weight_grad", out, (x, dy), vjp)


def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise _shape_err("add", a.value.shape, b.value.shape)
    return a.graph.record("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise _shape_err("sub", a.value.shape, b.value.shape)
    return a.graph.record("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise _shape_err("mul", a.value.shape, b.value.shape)
    av, bv = a.value, b.value
    return a.graph.record("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.graph.record("scale", a.value * c, (a,), lambda g: (g * c,))


def divide(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise _shape_err("divide", a.value.shape, b.value.shape)
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g):
        return (g / bv, -g * av / (bv * bv))

    return a.graph.record("divide", out, (a, b), vjp)


def shift(a: Var, c: float) -> Var:
    """Add a scalar constant elementwise."""
    return a.graph.record("shift", a.value + float(c), (a,), lambda g: (g,))


def bias_add(x: Var, b: Var) -> Var:
    """Add a per-channel/per-feature bias: (B,F)+(F,) or (B,C,H,W)+(C,)."""
    xv, bv = x.value, b.value
    if bv.ndim != 1:
        raise _shape_err("bias_add", xv.shape, bv.shape)
    if xv.ndim == 2 and xv.shape[1] == bv.shape[0]:
        out = xv + bv

        def vjp(g):
            return (g, g.sum(axis=0))

    elif xv.ndim == 4 and xv.shape[1] == bv.shape[0]:
        out = xv + bv[None, :, None, None]

        def vjp(g):
            return (g, g.sum(axis=(0, 2, 3)))

    else:
        raise _shape_err("bias_add", xv.shape, bv.shape)
    return x.graph.record("bias_add", out, (x, b), vjp)


def channel_affine(x: Var, mult: np.ndarray, offset: np.ndarray) -> Var:
    """x * mult[c] + offset[c] with constant per-channel coefficients."""
    xv = x.value
    mult = as_tensor(mult)
    offset = as_tensor(offset)
    if xv.ndim != 4 or mult.shape != (xv.shape[1],) or offset.shape != mult.shape:
        raise _shape_err("channel_affine", xv.shape, mult.shape, offset.shape)
    m = mult[None, :, None, None]
    out = xv * m + offset[None, :, None, None]
    return x.graph.record("channel_affine", out, (x,), lambda g: (g * m,))


def relu(a: Var) -> Var:
    mask = (a.value > 0).astype(np.float64)
    return a.graph.record("relu", a.value * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Var, alpha: float = 0.01) -> Var:
    slope = np.where(a.value > 0, 1.0, float(alpha))
    return a.graph.record(
        "leaky_relu", a.value * slope, (a,), lambda g: (g * slope,)
    )


def sigmoid(a: Var) -> Var:
    s = 1.0 / (1.0 + np.exp(-a.value))
    return a.graph.record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    return a.graph.record("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def heaviside(a: Var) -> Var:
    """Unit step of the value; gradient is zero almost everywhere."""
    out = (a.value > 0).astype(np.float64)
    return a.graph.record("heaviside", out, (a,), lambda g: (np.zeros_like(a.value),))


def softmax(a: Var) -> Var:
    if a.value.ndim != 2:
        raise _shape_err("softmax", a.value.shape)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return a.graph.record("softmax", s, (a,), vjp)


def sqrt(a: Var) -> Var:
    r = np.sqrt(a.value)

    def vjp(g):
        return (g / (2.0 * r),)

    return a.graph.record("sqrt", r, (a,), vjp)


def tsum(a: Var) -> Var:
    shp = a.value.shape
    return a.graph.record(
        "sum", np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shp).astype(np.float64),)
    )


def tmean(a: Var) -> Var:
    n = a.value.size
    shp = a.value.shape
    return a.graph.record(
        "mean",
        np.asarray(a.value.mean()),
        (a,),
        lambda g: ((np.broadcast_to(g, shp) / n).astype(np.float64),),
    )


def sum_axes(a: Var, axes: tuple) -> Var:
    axes = tuple(sorted(int(ax) for ax in axes))
    out = a.value.sum(axis=axes)
    shp = a.value.shape

    def vjp(g):
        ge = g
        for ax in axes:
            ge = np.expand_dims(ge, ax)
        return (np.broadcast_to(ge, shp).astype(np.float64),)

    return a.graph.record("sum_axes", out, (a,), vjp)


def reshape(a: Var, new_shape: tuple) -> Var:
    new_shape = tuple(int(d) for d in new_shape)
    if int(np.prod(new_shape)) != a.value.size:
        raise _shape_err(f"reshape to {new_shape}", a.value.shape)
    old = a.value.shape
    return a.graph.record(
        "reshape", a.value.reshape(new_shape), (a,), lambda g: (g.reshape(old),)
    )


def tslice(a: Var, index) -> Var:
    out = np.ascontiguousarray(a.value[index])
    shp = a.value.shape

    def vjp(g):
        full = np.zeros(shp, dtype=np.float64)
        full[index] = g
        return (full,)

    return a.graph.record("slice", out, (a,), vjp)


def take_rows(a: Var, idx) -> Var:
    """Gather rows by integer index; duplicates accumulate in the backward."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.ascontiguousarray(a.value[idx])
    shp = a.value.shape

    def vjp(g):
        full = np.zeros(shp, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full,)

    return a.graph.record("take_rows", out, (a,), vjp)


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    vals = [p.value for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(vals))
        )

    return parts[0].graph.record("concat", out, tuple(parts), vjp)


def softmax_cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean cross-entropy over the batch; labels are integer class ids."""
    z = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise _shape_err("softmax_cross_entropy", z.shape, labels.shape)
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ValueError(
            f"softmax_cross_entropy: labels outside [0, {z.shape[1]}): {labels}"
        )
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    picked = zs[np.arange(z.shape[0]), labels]
    out = np.asarray((lse - picked).mean())
    p = np.exp(zs) / np.exp(zs).sum(axis=1, keepdims=True)
    onehot = np.zeros_like(z)
    onehot[np.arange(z.shape[0]), labels] = 1.0

    def vjp(g):
        return (g * (p - onehot) / z.shape[0],)

    return logits.graph.record("softmax_cross_entropy", out, (logits,), vjp)


def mse(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise _shape_err("mse", a.value.shape, b.value.shape)
    d = a.value - b.value
    n = d.size
    out = np.asarray((d * d).mean())

    def vjp(g):
        c = g * 2.0 * d / n
        return (c, -c)

    return a.graph.record("mse", out, (a, b), vjp)


def total_variation(x: Var) -> Var:
    """Isotropic total variation of an image batch (B,C,H,W).

    Sum over interior anchors of sqrt(dh^2 + dv^2 + TV_EPS), where dh/dv are
    the forward differences; the epsilon keeps it differentiable at zero.
    """
    v = x.value
    if v.ndim != 4:
        raise _shape_err("total_variation", v.shape)
    if v.shape[2] < 2 or v.shape[3] < 2:
        raise ShapeError(
            f"total_variation: H and W must be >= 2, got {v.shape}"
        )
    dh = v[:, :, :-1, 1:] - v[:, :, :-1, :-1]
    dv = v[:, :, 1:, :-1] - v[:, :, :-1, :-1]
    r = np.sqrt(dh * dh + dv * dv + TV_EPS)
    out = np.asarray(r.sum())

    def vjp(g):
        gx = np.zeros_like(v)
        coef_h = g * dh / r
        coef_v = g * dv / r
        gx[:, :, :-1, 1:] += coef_h
        gx[:, :, :-1, :-1] -= coef_h
        gx[:, :, 1:, :-1] += coef_v
        gx[:, :, :-1, :-1] -= coef_v
        return (gx,)

    return x.graph.record("total_variation", out, (x,), vjp)


def flatten_batch(x: Var) -> Var:
    """(B, ...) -> (B, prod(rest))."""
    b = x.value.shape[0]
    return reshape(x, (b, x.value.size // b))


# ---------------------------------------------------------------------------
# public dispatcher
# ---------------------------------------------------------------------------


def forward_op(kind: str, *inputs: Var, **attrs) -> Var:
    """Apply a primitive op by name; see PUBLIC_OPS for the accepted kinds."""
    if kind == "matmul":
        return matmul(*inputs)
    if kind == "conv2d":
        return conv2d(*inputs, stride=attrs.get("stride", 1), pad=attrs.get("pad", 0))
    if kind == "add":
        return add(*inputs)
    if kind == "scale":
        return scale(inputs[0], attrs["c"])
    if kind == "relu":
        return relu(*inputs)
    if kind == "sigmoid":
        return sigmoid(*inputs)
    if kind == "tanh":
        return tanh(*inputs)
    if kind == "leaky_relu":
        return leaky_relu(inputs[0], attrs.get("alpha", 0.01))
    if kind == "softmax_cross_entropy":
        return softmax_cross_entropy(inputs[0], attrs["labels"])
    if kind == "mse":
        return mse(*inputs)
    if kind == "total_variation":
        return total_variation(*inputs)
    if kind == "reshape":
        return reshape(inputs[0], attrs["shape"])
    if kind == "slice":
        return tslice(inputs[0], attrs["index"])
    if kind == "sum":
        return tsum(*inputs)
    if kind == "mean":
        return tmean(*inputs)
    raise ValueError(f"unknown op kind {kind!r}; expected one of {PUBLIC_OPS}")
