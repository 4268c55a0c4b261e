"""Dense tensors with reverse-mode differentiation.

Everything the model needs runs through :class:`Tensor` and the primitives
registered in :data:`PRIMITIVES`.  The engine is deliberately small: numpy
arrays underneath, a recorded closure per op, and a topological sweep in
:func:`backward`.  :func:`finite_diff_grad` is the independent oracle used to
check it.
"""

from __future__ import annotations

import contextlib
import math
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_state = {"dtype": np.float32, "grad_enabled": True}


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


class AttentionError(ValueError):
    pass


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new constants (float32 / float64)."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = data
        elif isinstance(data, np.generic) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = np.asarray(data)  # 0-d results come back as numpy scalars
        else:
            arr = np.asarray(data, dtype=dtype or _state["dtype"])
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_state["dtype"]))


_new_tensor = object.__new__


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    # op outputs are already float arrays, so skip the constructor's dtype checks
    out = _new_tensor(Tensor)
    out.data = data if type(data) is np.ndarray else np.asarray(data)
    out.grad = None
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._op = "leaf"
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(op: str, fn, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return fn(a, b)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = _binary("add", np.add, a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def multiply(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    out = _binary("multiply", np.multiply, ad, bd)

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _result(out, (a, b), bw, "multiply")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError("matmul", ad.shape, bd.shape)
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError("matmul", ad.shape, bd.shape) from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(out, (a, b), bw, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` as one node; ``w`` is 2-d and ``x`` may carry batch axes."""
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.ndim < 1 or xd.shape[-1] != wd.shape[0]:
        raise ShapeError("affine", xd.shape, wd.shape)
    out = np.matmul(xd, wd)
    if b is not None:
        if b.data.shape != (wd.shape[1],):
            raise ShapeError("affine", wd.shape, b.data.shape)
        out = out + b.data
    d_in, d_out = wd.shape

    def bw(g):
        gx = np.matmul(g, wd.T)
        gw = np.matmul(xd.reshape(-1, d_in).T, g.reshape(-1, d_out))
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, d_out).sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, bw, "affine")


def attention_scores(q: Tensor, k: Tensor, scale: float) -> Tensor:
    """``scale * q @ k^T`` over the last two axes."""
    qd, kd = q.data, k.data
    if qd.ndim < 2 or kd.ndim != qd.ndim or qd.shape[-1] != kd.shape[-1]:
        raise ShapeError("attention_scores", qd.shape, kd.shape)
    out = np.matmul(qd, np.swapaxes(kd, -1, -2)) * scale

    def bw(g):
        g = g * scale
        return np.matmul(g, kd), np.matmul(np.swapaxes(g, -1, -2), qd)

    return _result(out, (q, k), bw, "attention_scores")


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``(..., L, D)`` -> ``(..., H, L, D/H)``."""
    shape = x.shape
    if len(shape) < 2 or shape[-1] % heads:
        raise ShapeError("split_heads", shape, (heads,))
    *lead, length, dim = shape
    n = len(shape) + 1
    perm = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    out = np.transpose(x.data.reshape(*lead, length, heads, dim // heads), perm)
    return _result(out, (x,), lambda g: (np.transpose(g, perm).reshape(shape),), "split_heads")


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`."""
    shape = x.shape
    if len(shape) < 3:
        raise ShapeError("merge_heads", shape)
    *lead, heads, length, dh = shape
    n = len(shape)
    perm = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    out = np.transpose(x.data, perm).reshape(*lead, length, heads * dh)
    return _result(out, (x,), lambda g: (np.transpose(g.reshape(*lead, length, heads, dh), perm),), "merge_heads")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(out, tensors, bw, "concat")


def slice_(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    try:
        out = a.data[idx]
    except IndexError:
        raise ShapeError("slice", a.shape) from None
    shape, dtype = a.shape, a.data.dtype

    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), bw, "slice")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, np.integer, slice)) for i in items)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    orig = a.shape
    return _result(out, (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    n = a.ndim
    if len(axes) != n or set(axes) != set(range(n)):
        raise ShapeError("transpose", a.shape, axes)
    inv = tuple(sorted(range(n), key=axes.__getitem__))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _result(np.asarray(out), (a,), bw, "mean")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_np(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) computed without overflow."""
    x = a.data
    y = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _result(y, (a,), lambda g: (g * (1.0 - _sigmoid_np(x)),), "log_sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(y, (a,), bw, "gelu")


def _masked(x: np.ndarray, mask: np.ndarray | None, op: str) -> np.ndarray:
    if mask is None:
        return x
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, x, -np.inf)
    except ValueError:
        raise ShapeError(op, x.shape, mask.shape) from None
    if out.shape != x.shape:
        raise ShapeError(op, x.shape, mask.shape)
    # broadcasting only repeats rows, so checking the unbroadcast mask suffices
    if not mask.any(axis=-1).all():
        raise AttentionError(f"{op}: every position masked in some row")
    return out


def softmax(a: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis.  ``mask`` is True where a position is kept;
    dropped positions get exactly zero weight."""
    x = _masked(a.data, mask, "softmax")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (a,), bw, "softmax")


def log_softmax(a: Tensor, mask=None) -> Tensor:
    x = _masked(a.data, mask, "log_softmax")
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g):
        g = np.where(np.isfinite(y), g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(y, (a,), bw, "log_softmax")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ids.shape)
    shape, dtype = table.shape, table.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), bw, "embedding")


_add_reduce = np.add.reduce


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    xd = x.data
    xc = xd - _add_reduce(xd, -1, None, None, True) / d
    inv = 1.0 / np.sqrt(_add_reduce(xc * xc, -1, None, None, True) / d + eps)
    xhat = xc * inv
    out = xhat * gamma.data
    out += beta.data

    def bw(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), bw, "layer_norm")


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "affine": affine,
    "split_heads": split_heads,
    "attention_scores": attention_scores,
    "merge_heads": merge_heads,
    "add": add,
    "multiply": multiply,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_,
    "sum": sum_,
    "mean": mean,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "gelu": gelu,
    "softmax": softmax,
    "log": log,
    "embedding": embedding,
    "layer_norm": layer_norm,
    "transpose": transpose,
    "log_softmax": log_softmax,
    "log_sigmoid": log_sigmoid,
    "reshape": reshape,
    "neg": neg,
}


def apply_primitive(tag: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[tag]
    except KeyError:
        raise ValueError(f"unknown primitive {tag!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: "ParamStore | None" = None) -> dict[str, np.ndarray] | None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    With ``params`` given, returns ``name -> gradient`` for every parameter;
    parameters off the graph get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is None:
        return None
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}


# ---------------------------------------------------------------- parameters


class ParamStore(OrderedDict):
    """Ordered ``name -> Tensor`` map of trainable parameters."""

    def __setitem__(self, name, value):
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        if not isinstance(value, Tensor):
            value = Tensor(value)
        value.requires_grad = True
        super().__setitem__(name, value)

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def astype(self, dtype) -> None:
        for t in self.values():
            t.data = t.data.astype(dtype)

    def numel(self) -> int:
        return sum(t.data.size for t in self.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.items():
            if state[k].shape != v.shape:
                raise ShapeError("load_state", v.shape, state[k].shape)
            v.data = np.array(state[k], dtype=v.data.dtype)


def finite_diff_grad(
    loss_fn: Callable[[], Tensor | float],
    params: ParamStore,
    eps: float = 1e-4,
    names: Iterable[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate, one scalar parameter at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")

    def evaluate() -> float:
        with no_grad():
            out = loss_fn()
        val = out.item() if isinstance(out, Tensor) else float(out)
        if not math.isfinite(val):
            raise FloatingPointError(f"non-finite loss {val}")
        return val

    evaluate()
    result = {}
    for name in names if names is not None else params.keys():
        t = params[name]
        flat = t.data.reshape(-1)
        g = np.zeros(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = evaluate()
            flat[i] = orig - eps
            down = evaluate()
            flat[i] = orig
            g[i] = (up - down) / (2 * eps)
        result[name] = g.reshape(t.shape)
    return result
