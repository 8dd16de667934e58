"""Small define-by-run reverse-mode autodiff engine on top of numpy.

Every op executed while a :class:`Tape` is active (``with Tape():``) and
touching a tensor that requires grad appends one node to the tape.
``backward`` walks that tape in reverse. Outside a tape, ops are plain numpy
evaluations and nothing is recorded, which is what inference uses.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12

_state = threading.local()


class ShapeError(ValueError):
    """Raised when an op receives incompatible operand shapes."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "_node")
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def node_id(self) -> int | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


class Tape:
    """Ordered record of executed primitives; nodes are appended in execution order."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _tape_stack() -> list[Tape]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad and (t._node is None or t._tape is tape)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward result, recording a node when any parent is tracked.

    ``backward(g)`` receives the output gradient and returns one gradient
    (or None) per parent, in order.
    """
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._tape = None
    out._node = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(_tracked(p, tape) for p in parents):
        out.requires_grad = True
        out._tape = tape
        out._node = len(tape.nodes)
        tape.nodes.append((out, tuple(parents), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- primitives -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.data.ndim == 2 and a.data.ndim > 2:
        # Fold leading axes: one 2-D GEMM instead of a batched one.
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(*a.shape[:-1], n)

        def backward_folded(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _record(out, (a, b), backward_folded)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log guarded from below at ``LOG_FLOOR``; the clamped region has zero slope."""
    a = as_tensor(a)
    live = ~(a.data <= LOG_FLOOR)  # NaN stays live so it propagates instead of being clamped
    safe = np.where(live, a.data, LOG_FLOOR)
    return _record(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), backward)


def embed(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("embed", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embed: ids outside [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(table.data[ids], (table,), backward)


def concat_features(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError("concat_features", a.shape, b.shape)
    da = a.shape[-1]

    def backward(g):
        return g[..., :da], g[..., da:]

    return _record(np.concatenate([a.data, b.data], axis=-1), (a, b), backward)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _record(np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, g * 1.0),))


def sum_axis(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the elementwise affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        return gx, gg, gb

    return _record(out, (x, gamma, beta), backward)


# --- backward ---------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Calling twice without zeroing accumulates; callers zero grads first.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.data)
        return
    tape = loss._tape
    grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
    for idx in range(loss._node, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        _, parents, fn = tape.nodes[idx]
        for parent, pg in zip(parents, fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is not None and parent._tape is tape:
                prev = grads.get(parent._node)
                grads[parent._node] = pg if prev is None else prev + pg
            elif parent._node is None:
                pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg


# --- optimizer --------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a name -> Tensor parameter mapping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ValueError(f"adam_step: no gradient for parameter(s) {missing[:5]}")
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = np.array(arrays[f"adam.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"adam.v.{k}"], dtype=np.float64)
        self.t = t
