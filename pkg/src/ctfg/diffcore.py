"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are recorded define-by-run: every operator on a :class:`Tensor` that
requires gradients appends a node holding its inputs and a local backward
rule.  :func:`backward` walks the nodes in reverse construction order.

Operator catalog: add, sub, mul, div (by constant), matmul, transpose,
reshape, concat, getitem, softmax, layer_norm, gelu, relu, exp, log, sum,
mean, masked_fill, clamp, minimum.  Everything else is composed from these.
"""

from __future__ import annotations

import contextlib
import itertools
import struct
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Tensor", "GraphError", "ShapeError", "NonFiniteError",
    "no_grad", "checked", "is_checked", "tensor", "parameter", "forward", "backward",
    "add", "sub", "mul", "div", "matmul", "transpose", "reshape", "concat", "getitem",
    "softmax", "log_softmax", "layer_norm", "gelu", "relu", "exp", "log", "sum", "mean",
    "masked_fill", "clamp", "minimum",
    "AdamState", "adam_init", "adam_step",
    "save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC", "CHECKPOINT_VERSION",
]

_GRAD_ENABLED = True
_CHECKED = True
_counter = itertools.count()


class GraphError(ValueError):
    """Raised for malformed graphs; ``node`` names the offending operation."""

    def __init__(self, message: str, node: str | None = None):
        self.node = node
        super().__init__(f"[{node}] {message}" if node else message)


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Toggle finiteness assertions on every operator output."""
    global _CHECKED
    prev, _CHECKED = _CHECKED, enabled
    try:
        yield
    finally:
        _CHECKED = prev


def is_checked() -> bool:
    return _CHECKED


class Tensor:
    """A float64 array with an optional link to the node that produced it."""

    __slots__ = ("data", "requires_grad", "parents", "grad_fn", "op", "name", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to Tensor's reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.grad_fn = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __matmul__ = lambda a, b: matmul(a, b)
    __neg__ = lambda a: mul(a, -1.0)
    __getitem__ = lambda a, idx: getitem(a, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _check_leaf(t: Tensor) -> Tensor:
    if _CHECKED and not np.all(np.isfinite(t.data)):
        raise NonFiniteError("non-finite values at construction", node=t.name)
    return t


def tensor(data, name: str | None = None) -> Tensor:
    """Constant (non-trainable) tensor."""
    return _check_leaf(Tensor(data, requires_grad=False, name=name))


def parameter(data, name: str) -> Tensor:
    """Trainable leaf tensor."""
    return _check_leaf(Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    node_name = f"{op}#{next(_counter)}"
    if _CHECKED and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output in {op}", node=node_name)
    out = Tensor(data)
    out.op = node_name
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.grad_fn = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, *shapes) -> None:
    try:
        np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {shapes}", node=op) from None


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, c: float) -> Tensor:
    """Division by a constant scalar."""
    if isinstance(c, Tensor):
        raise GraphError("div only supports constant divisors; compose with exp/log", node="div")
    return mul(a, 1.0 / float(c))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, "log", (x,), lambda g: (g / x.data,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = _as_tensor(x)
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner),)

    return _make(out, "gelu", (x,), grad_fn)


def clamp(x, lo: float, hi: float) -> Tensor:
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), "clamp", (x,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("minimum", a.shape, b.shape)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), "minimum", (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def masked_fill(x, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``; no gradient flows there."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    _broadcast_shape("masked_fill", x.shape, mask.shape)
    keep = ~mask
    out = np.where(mask, value, x.data)
    return _make(out, "masked_fill", (x,), lambda g: (_unbroadcast(g * keep, x.shape),))


# --- structural ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}", node="matmul")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, "matmul", (a, b), grad_fn)


def transpose(x, axes: Iterable[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = _as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}", node="transpose")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}", node="reshape") from None
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def concat(xs, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concat {[x.shape for x in xs]} on axis {axis}", node="concat") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, "concat", tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(x, index) -> Tensor:
    x = _as_tensor(x)
    out = x.data[index]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), "getitem", (x,), grad_fn)


# --- reductions and normalizations -----------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), "sum", (x,), grad_fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, "softmax", (x,), grad_fn)


def log_softmax(x, axis: int = -1) -> Tensor:
    """Composed log-sum-exp form; the max shift is a constant."""
    x = _as_tensor(x)
    shifted = sub(x, x.data.max(axis=axis, keepdims=True))
    return sub(shifted, log(sum(exp(shifted), axis=axis, keepdims=True)))


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine; compose gain/bias with mul/add)."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def grad_fn(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),) if n else (g,)

    return _make(xhat, "layer_norm", (x,), grad_fn)


# --- graph evaluation ------------------------------------------------------

def forward(fn, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Evaluate a graph-building callable on named inputs and return arrays.

    ``fn`` receives constant tensors keyed like ``inputs`` and returns a
    tensor or a mapping of named tensors.
    """
    out = fn(**{k: tensor(v, name=k) for k, v in inputs.items()})
    if isinstance(out, Tensor):
        return {"output": out.data}
    return {k: v.data for k, v in out.items()}


def _topo(seed: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(seed, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(seed: Tensor, params: Mapping[str, Tensor], upstream=None) -> dict[str, np.ndarray]:
    """Gradients of ``seed`` w.r.t. every tensor in ``params``.

    ``upstream`` defaults to ones (i.e. a scalar seed gets gradient 1).
    Parameters the seed does not depend on receive zero arrays.
    """
    if not isinstance(seed, Tensor):
        raise GraphError("seed is not a tensor of this graph")
    upstream = np.ones(seed.shape) if upstream is None else np.asarray(upstream, dtype=np.float64)
    if upstream.shape != seed.shape:
        raise ShapeError(f"upstream grad {upstream.shape} != seed {seed.shape}", node=seed.op)
    grads: dict[int, np.ndarray] = {id(seed): upstream}
    if seed.requires_grad:
        for node in reversed(_topo(seed)):
            g = grads.get(id(node))
            if g is None or node.grad_fn is None:
                continue
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    return {name: np.array(grads.get(id(p), np.zeros(p.shape)), dtype=np.float64).reshape(p.shape)
            for name, p in params.items()}


# --- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Mapping[str, Tensor | np.ndarray], lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    shapes = {k: np.shape(p.data if isinstance(p, Tensor) else p) for k, p in params.items()}
    return AdamState(m={k: np.zeros(s) for k, s in shapes.items()},
                     v={k: np.zeros(s) for k, s in shapes.items()},
                     lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: Mapping[str, Tensor | np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState):
    """One bias-corrected Adam update, applied in place. Returns (params, state)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else p
        g = grads[name]
        if g.shape != arr.shape or state.m[name].shape != arr.shape:
            raise ShapeError(f"adam: grad {g.shape} vs param {arr.shape}", node=name)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        arr -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# --- checkpoint ------------------------------------------------------------

CHECKPOINT_MAGIC = b"CTFG"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write named arrays: magic, u32 version, then per entry
    (u32 name length, name, u32 rank, u64 extents, little-endian f64 data)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name in sorted(arrays):
        a = arrays[name]
        arr = np.asarray(a.data if isinstance(a, Tensor) else a, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a CTFG checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 8, {}
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return out
