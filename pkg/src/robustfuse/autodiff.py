"""Tape-based reverse-mode autodiff over a small, closed set of numpy primitives.

Every network, loss and attack in the package is expressed with the primitives
registered in ``PRIMITIVES``; nothing else records onto a tape.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple

import numpy as np


class ShapeError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(kind: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{kind}: cannot combine extents {a} and {b}") from None


# --------------------------------------------------------------------------
# primitive definitions
#
# forward(values, attrs) -> (out, cache)
# vjp(g, values, out, cache, attrs, needs) -> list of input gradients (None when
#   the input does not need one)
# --------------------------------------------------------------------------


class Primitive(NamedTuple):
    arity: tuple  # (min, max) number of inputs
    check: Callable
    forward: Callable
    vjp: Callable


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, arity, check, forward, vjp):
    PRIMITIVES[name] = Primitive(arity, check, forward, vjp)


def _no_check(kind, shapes, attrs):
    pass


# elementwise binary (numpy broadcasting)


def _check_binary(kind, shapes, attrs):
    _broadcast_shape(kind, shapes[0], shapes[1])


def _check_bmul(kind, shapes, attrs):
    out = _broadcast_shape(kind, shapes[0], shapes[1])
    if out != shapes[0]:
        raise ShapeError(f"{kind}: operand {shapes[1]} does not expand to {shapes[0]}")


_register(
    "add", (2, 2), _check_binary,
    lambda v, a: (v[0] + v[1], None),
    lambda g, v, o, c, a, n: [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)],
)
_register(
    "sub", (2, 2), _check_binary,
    lambda v, a: (v[0] - v[1], None),
    lambda g, v, o, c, a, n: [_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)],
)


def _mul_vjp(g, v, o, c, a, n):
    return [
        _unbroadcast(g * v[1], v[0].shape) if n[0] else None,
        _unbroadcast(g * v[0], v[1].shape) if n[1] else None,
    ]


_register("mul", (2, 2), _check_binary, lambda v, a: (v[0] * v[1], None), _mul_vjp)
_register("broadcast_mul", (2, 2), _check_bmul, lambda v, a: (v[0] * v[1], None), _mul_vjp)


def _div_vjp(g, v, o, c, a, n):
    return [
        _unbroadcast(g / v[1], v[0].shape) if n[0] else None,
        _unbroadcast(-g * o / v[1], v[1].shape) if n[1] else None,
    ]


_register("div", (2, 2), _check_binary, lambda v, a: (v[0] / v[1], None), _div_vjp)

# elementwise unary

_register(
    "relu", (1, 1), _no_check,
    lambda v, a: (np.maximum(v[0], 0), None),
    lambda g, v, o, c, a, n: [g * (v[0] > 0)],
)


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_register(
    "sigmoid", (1, 1), _no_check,
    lambda v, a: (_sigmoid(v[0]), None),
    lambda g, v, o, c, a, n: [g * o * (1 - o)],
)
_register(
    "square", (1, 1), _no_check,
    lambda v, a: (v[0] * v[0], None),
    lambda g, v, o, c, a, n: [2 * g * v[0]],
)
_register(
    "sqrt", (1, 1), _no_check,
    lambda v, a: (np.sqrt(v[0]), None),
    lambda g, v, o, c, a, n: [0.5 * g / o],
)
_register(
    "clip", (1, 1), _no_check,
    lambda v, a: (np.clip(v[0], a["lo"], a["hi"]), None),
    lambda g, v, o, c, a, n: [g * ((v[0] > a["lo"]) & (v[0] < a["hi"]))],
)


# softmax family


def _check_axis(kind, shapes, attrs):
    ax = attrs.get("axis", 1)
    if not -len(shapes[0]) <= ax < len(shapes[0]):
        raise ShapeError(f"{kind}: axis {ax} out of range for extents {shapes[0]}")


def _softmax_fwd(v, a):
    x = v[0]
    e = np.exp(x - x.max(axis=a["axis"], keepdims=True))
    return e / e.sum(axis=a["axis"], keepdims=True), None


def _log_softmax_fwd(v, a):
    x = v[0]
    z = x - x.max(axis=a["axis"], keepdims=True)
    return z - np.log(np.exp(z).sum(axis=a["axis"], keepdims=True)), None


_register(
    "softmax", (1, 1), _check_axis, _softmax_fwd,
    lambda g, v, o, c, a, n: [o * (g - (g * o).sum(axis=a["axis"], keepdims=True))],
)
_register(
    "log_softmax", (1, 1), _check_axis, _log_softmax_fwd,
    lambda g, v, o, c, a, n: [g - np.exp(o) * g.sum(axis=a["axis"], keepdims=True)],
)


# structural


def _check_concat(kind, shapes, attrs):
    ref = shapes[0]
    for s in shapes[1:]:
        if len(s) != len(ref) or s[:1] + s[2:] != ref[:1] + ref[2:]:
            raise ShapeError(f"{kind}: extents {ref} and {s} differ outside the channel axis")


def _concat_vjp(g, v, o, c, a, n):
    bounds = np.cumsum([0] + [x.shape[1] for x in v])
    return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(v))]


_register(
    "concat", (1, 64), _check_concat,
    lambda v, a: (np.concatenate(v, axis=1), None),
    _concat_vjp,
)


def _slice_vjp(g, v, o, c, a, n):
    out = np.zeros_like(v[0])
    out[a["key"]] = g
    return [out]


_register("slice", (1, 1), _no_check, lambda v, a: (v[0][a["key"]], None), _slice_vjp)


# reductions


def _check_4d(kind, shapes, attrs):
    if len(shapes[0]) != 4:
        raise ShapeError(f"{kind}: expects (B,C,H,W) extents, got {shapes[0]}")


def _chan_extreme(fn):
    def fwd(v, a):
        x = v[0]
        idx = fn(x, axis=1)[:, None]
        return np.take_along_axis(x, idx, axis=1), idx

    def vjp(g, v, o, c, a, n):
        out = np.zeros_like(v[0])
        np.put_along_axis(out, c, g, axis=1)
        return [out]

    return fwd, vjp


_register("channel_max", (1, 1), _check_4d, *_chan_extreme(np.argmax))
_register("channel_min", (1, 1), _check_4d, *_chan_extreme(np.argmin))


def _mean_vjp(axes):
    def vjp(g, v, o, c, a, n):
        x = v[0]
        count = np.prod([x.shape[i] for i in axes(x)]) if x.ndim else 1
        return [np.broadcast_to(g.reshape(o.shape) / count, x.shape).copy()]

    return vjp


def _gap_axes(x):
    return (2, 3)


def _spatial_axes(x):
    return tuple(range(1, x.ndim))


def _all_axes(x):
    return tuple(range(x.ndim))


_register(
    "global_avg_pool", (1, 1), _check_4d,
    lambda v, a: (v[0].mean(axis=(2, 3), keepdims=True), None),
    _mean_vjp(_gap_axes),
)
_register(
    "spatial_mean", (1, 1), _no_check,
    lambda v, a: (v[0].mean(axis=_spatial_axes(v[0]), keepdims=True), None),
    _mean_vjp(_spatial_axes),
)


def _scalar_mean_vjp(g, v, o, c, a, n):
    return [np.full_like(v[0], g / v[0].size)]


_register(
    "mean", (1, 1), _no_check,
    lambda v, a: (np.asarray(v[0].mean(), dtype=v[0].dtype), None),
    _scalar_mean_vjp,
)


# convolution: NCHW input, (O, C, k, k) kernel, optional (O,) bias, stride 1


def _conv_geometry(k, dilation, padding):
    span = dilation * (k - 1) + 1
    pad = (span - 1) // 2 if padding == "same" else 0
    return span, pad


def _check_conv(kind, shapes, attrs):
    x, w = shapes[0], shapes[1]
    if len(x) != 4 or len(w) != 4:
        raise ShapeError(f"{kind}: input {x} and kernel {w} must both be 4-D")
    if w[2] != w[3]:
        raise ShapeError(f"{kind}: kernel must be square, got {w[2]}x{w[3]}")
    if x[1] != w[1]:
        raise ShapeError(f"{kind}: input has {x[1]} channels, kernel expects {w[1]}")
    padding = attrs.get("padding", "same")
    if padding not in ("same", "valid"):
        raise ShapeError(f"{kind}: unknown padding {padding!r}")
    if padding == "same" and w[2] % 2 == 0:
        raise ShapeError(f"{kind}: same padding needs an odd kernel, got {w[2]}")
    span, _ = _conv_geometry(w[2], attrs.get("dilation", 1), padding)
    if padding == "valid" and (x[2] < span or x[3] < span):
        raise ShapeError(f"{kind}: window {span} larger than image {x[2]}x{x[3]}")
    if len(shapes) == 3 and shapes[2] != (w[0],):
        raise ShapeError(f"{kind}: bias {shapes[2]} does not match {w[0]} output channels")


def _im2col_conv(x, w, d, pad):
    # channel-major im2col: cols is (C, k, k, B, Ho, Wo), then a single GEMM
    B, C = x.shape[0], x.shape[1]
    O, k = w.shape[0], w.shape[2]
    span = d * (k - 1) + 1
    xt = x.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = xt.shape[2] - span + 1, xt.shape[3] - span + 1
    if k == 1:
        cols = np.ascontiguousarray(xt)
    else:
        cols = np.empty((C, k, k, B, Ho, Wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xt[:, :, i * d:i * d + Ho, j * d:j * d + Wo]
    out = (w.reshape(O, -1) @ cols.reshape(C * k * k, -1)).reshape(O, B, Ho, Wo)
    return out, cols


def _conv_fwd(v, a):
    w = v[1]
    _, pad = _conv_geometry(w.shape[2], a["dilation"], a["padding"])
    out, cols = _im2col_conv(v[0], w, a["dilation"], pad)
    if len(v) == 3:
        out += v[2][:, None, None, None]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)), cols


def _conv_vjp(g, v, o, c, a, n):
    x, w = v[0], v[1]
    k, d = w.shape[2], a["dilation"]
    span, pad = _conv_geometry(k, d, a["padding"])
    O, C = w.shape[0], w.shape[1]
    grads = [None, None] + ([None] if len(v) == 3 else [])
    if n[1] or (len(v) == 3 and n[2]):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, -1)
        if n[1]:
            grads[1] = (gt @ c.reshape(C * k * k, -1).T).reshape(w.shape)
        if len(v) == 3 and n[2]:
            grads[2] = gt.sum(axis=1)
    if n[0]:
        # input gradient = correlation of g with the flipped, transposed kernel
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx, _ = _im2col_conv(g, wf, d, span - 1 - pad)
        grads[0] = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
    return grads


_register("conv2d", (2, 3), _check_conv, _conv_fwd, _conv_vjp)

_DEFAULT_ATTRS = {
    "conv2d": {"dilation": 1, "padding": "same"},
    "softmax": {"axis": 1},
    "log_softmax": {"axis": 1},
}


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------


@dataclass
class Node:
    kind: str  # primitive id, or "leaf" / "const"
    inputs: tuple
    attrs: dict
    value: np.ndarray
    requires_grad: bool
    name: str | None = None
    cache: object = None


class Var:
    """Handle to a node on a tape; supports arithmetic that records primitives."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", id: int):
        self.tape = tape
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def _lift(self, other):
        return other if isinstance(other, Var) else self.tape.const(other)

    def __add__(self, other):
        return self.tape.apply("add", [self, self._lift(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.apply("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.tape.apply("sub", [self._lift(other), self])

    def __mul__(self, other):
        return self.tape.apply("mul", [self, self._lift(other)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.apply("div", [self, self._lift(other)])

    def __rtruediv__(self, other):
        return self.tape.apply("div", [self._lift(other), self])

    def __neg__(self):
        return self.tape.apply("sub", [self.tape.const(0.0), self])

    def __getitem__(self, key):
        return self.tape.apply("slice", [self], key=key)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


class Tape:
    """Append-only record of a computation; nodes are stored in topological order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}

    def _push(self, node: Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def leaf(self, name: str, value) -> Var:
        if name in self.leaves:
            raise ValueError(f"leaf {name!r} already bound on this tape")
        arr = np.array(value, dtype=self.dtype)
        var = self._push(Node("leaf", (), {}, arr, True, name=name))
        self.leaves[name] = var.id
        return var

    def const(self, value) -> Var:
        arr = np.asarray(value, dtype=self.dtype)
        return self._push(Node("const", (), {}, arr, False))

    def bind(self, params: "ParameterStore | dict", trainable: bool = True) -> dict[str, Var]:
        """Put every parameter on the tape, as a gradient leaf or as a constant."""
        items = params.items()
        if trainable:
            return {k: self.leaf(k, v) for k, v in items}
        return {k: self.const(v) for k, v in items}

    def apply(self, kind: str, inputs: list, **attrs) -> Var:
        return apply_primitive(kind, inputs, attrs)

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        return backward(self, loss)


def apply_primitive(kind: str, inputs: list, attrs: dict | None = None) -> Var:
    prim = PRIMITIVES.get(kind)
    if prim is None:
        raise ValueError(f"unknown primitive {kind!r}")
    inputs = [x for x in inputs if x is not None]
    lo, hi = prim.arity
    if not lo <= len(inputs) <= hi:
        raise ShapeError(f"{kind}: expects {lo}..{hi} inputs, got {len(inputs)}")
    tape = inputs[0].tape
    if any(x.tape is not tape for x in inputs):
        raise ValueError(f"{kind}: inputs come from different tapes")
    full = dict(_DEFAULT_ATTRS.get(kind, {}))
    full.update(attrs or {})
    values = [tape.nodes[x.id].value for x in inputs]
    prim.check(kind, [v.shape for v in values], full)
    out, cache = prim.forward(values, full)
    out = np.asarray(out, dtype=tape.dtype)
    req = any(tape.nodes[x.id].requires_grad for x in inputs)
    return tape._push(
        Node(kind, tuple(x.id for x in inputs), full, out, req, cache=cache if req else None)
    )


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Gradient of a scalar node w.r.t. every leaf on the tape (zeros if unreachable)."""
    root = tape.nodes[loss.id]
    if root.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got extents {root.value.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(root.value)}
    for nid in range(loss.id, -1, -1):
        g = grads.pop(nid, None)
        node = tape.nodes[nid]
        if g is None or node.kind in ("leaf", "const"):
            if g is not None:
                grads[nid] = g  # keep leaf gradients
            continue
        if not node.requires_grad:
            continue
        parents = [tape.nodes[i] for i in node.inputs]
        needs = [p.requires_grad for p in parents]
        in_grads = PRIMITIVES[node.kind].vjp(
            g, [p.value for p in parents], node.value, node.cache, node.attrs, needs
        )
        for pid, need, pg in zip(node.inputs, needs, in_grads):
            if not need or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    out = {}
    for name, nid in tape.leaves.items():
        v = tape.nodes[nid].value
        g = grads.get(nid)
        out[name] = np.zeros_like(v) if g is None else np.asarray(g, dtype=v.dtype).reshape(v.shape)
    return out


# --------------------------------------------------------------------------
# functional wrappers
# --------------------------------------------------------------------------


def conv2d(x: Var, w: Var, b: Var | None = None, dilation: int = 1, padding: str = "same") -> Var:
    return apply_primitive("conv2d", [x, w, b], {"dilation": dilation, "padding": padding})


def relu(x: Var) -> Var:
    return apply_primitive("relu", [x])


def sigmoid(x: Var) -> Var:
    return apply_primitive("sigmoid", [x])


def softmax(x: Var, axis: int = 1) -> Var:
    return apply_primitive("softmax", [x], {"axis": axis})


def log_softmax(x: Var, axis: int = 1) -> Var:
    return apply_primitive("log_softmax", [x], {"axis": axis})


def concat(xs: list[Var]) -> Var:
    return apply_primitive("concat", list(xs))


def global_avg_pool(x: Var) -> Var:
    return apply_primitive("global_avg_pool", [x])


def channel_max(x: Var) -> Var:
    return apply_primitive("channel_max", [x])


def channel_min(x: Var) -> Var:
    return apply_primitive("channel_min", [x])


def spatial_mean(x: Var) -> Var:
    return apply_primitive("spatial_mean", [x])


def mean(x: Var) -> Var:
    return apply_primitive("mean", [x])


def square(x: Var) -> Var:
    return apply_primitive("square", [x])


def sqrt(x: Var) -> Var:
    return apply_primitive("sqrt", [x])


def clip(x: Var, lo: float, hi: float) -> Var:
    return apply_primitive("clip", [x], {"lo": lo, "hi": hi})


def broadcast_mul(x: Var, s: Var) -> Var:
    return apply_primitive("broadcast_mul", [x, s])


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def finite_difference_check(
    f: Callable[[Tape, Var], Var],
    x: np.ndarray,
    step: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences of ``f`` at ``x``.

    ``f`` receives a float64 tape and the leaf for ``x`` and returns a scalar node.
    With ``max_coords`` only a seeded subset of coordinates is probed.
    """
    x = np.array(x, dtype=np.float64)

    def value(arr):
        tape = Tape(np.float64)
        out = f(tape, tape.leaf("x", arr))
        return float(out.value), tape, out

    base, tape, out = value(x)
    if not np.isfinite(base):
        raise ValueError("finite_difference_check: f is not finite at the base point")
    analytic = tape.backward(out)["x"]

    coords = np.arange(x.size)
    if max_coords is not None and max_coords < x.size:
        coords = np.sort(np.random.default_rng(seed).choice(x.size, max_coords, replace=False))
    worst = 0.0
    flat = x.reshape(-1)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        fp = value(x)[0]
        flat[i] = orig - step
        fm = value(x)[0]
        flat[i] = orig
        num = (fp - fm) / (2 * step)
        ana = analytic.reshape(-1)[i]
        err = abs(ana - num) / max(1.0, abs(ana), abs(num))
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


class ParamSpec(NamedTuple):
    shape: tuple
    init: str = "kernel"  # "kernel" | "zeros" | "const"
    value: float = 0.0


@dataclass
class ParameterStore:
    """Named parameter arrays; iteration is always sorted by name."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int | None = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.params))

    def names(self) -> list[str]:
        return sorted(self.params)

    def items(self):
        return [(k, self.params[k]) for k in sorted(self.params)]

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.params.items()}, self.seed)

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore({k: v.astype(dtype) for k, v in self.params.items()}, self.seed)

    def subset(self, prefix: str) -> "ParameterStore":
        return ParameterStore({k: v for k, v in self.params.items() if k.startswith(prefix)}, self.seed)

    def update(self, other: "ParameterStore | dict") -> None:
        src = other.params if isinstance(other, ParameterStore) else other
        self.params.update({k: v.copy() for k, v in src.items()})

    def num_values(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def equals(self, other: "ParameterStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[k], other[k]) for k in self.names()
        )


def init_parameters(spec: dict, seed: int, dtype=np.float32) -> ParameterStore:
    """Initialize parameters from ``{name: ParamSpec | shape}``.

    Rank-4 kernels get N(0, 2/fan_in); everything else declared as a bare shape is
    zero. Each tensor draws from its own stream keyed by (seed, name), so adding a
    parameter never perturbs the others.
    """
    store = ParameterStore(seed=seed)
    for name in sorted(spec):
        ps = spec[name]
        if not isinstance(ps, ParamSpec):
            shape = tuple(ps)
            ps = ParamSpec(shape, "kernel" if len(shape) == 4 else "zeros")
        shape = tuple(int(s) for s in ps.shape)
        if any(s <= 0 for s in shape):
            raise ValueError(f"parameter {name!r} has non-positive extent {shape}")
        if ps.init == "kernel":
            fan_in = int(np.prod(shape[1:]))
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif ps.init == "zeros":
            arr = np.zeros(shape)
        elif ps.init == "const":
            arr = np.full(shape, ps.value)
        else:
            raise ValueError(f"unknown init {ps.init!r} for {name!r}")
        store[name] = arr.astype(dtype)
    return store
