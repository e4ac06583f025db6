"""Dense tensors with a reverse-mode differentiation tape.

Every tensor produced by an op while any of its inputs requires a gradient
is attached to the tape: it remembers its parents and a closure mapping the
incoming gradient to one gradient per parent. Node ids come from a global
monotone counter, so a node's id is always larger than its parents' ids and
sorting reachable nodes by descending id is a valid reverse topological
replay of the tape.

Storage is numpy. Precision is chosen per run with :func:`precision`
(``"float64"`` for oracles and test suites, ``"float32"`` for training).
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01

_ids = itertools.count(1)
_local = threading.local()


class TensorError(ValueError):
    pass


class ShapeError(TensorError):
    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")
        self.op = op
        self.shapes = (tuple(a), tuple(b))


class DomainError(TensorError):
    pass


class ContractError(TensorError):
    pass


def _dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float64))


def _grad_enabled() -> bool:
    return getattr(_local, "grad", True)


def default_dtype() -> np.dtype:
    return _dtype()


def set_default_dtype(name: str | np.dtype) -> None:
    dt = np.dtype(name)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {name!r}; use float32 or float64")
    _local.dtype = dt


@contextlib.contextmanager
def precision(name: str | np.dtype):
    """Temporarily switch the default float precision for new tensors."""
    old = _dtype()
    set_default_dtype(name)
    try:
        yield
    finally:
        _local.dtype = old


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    old = _grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = old


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    return np.asarray(data, dtype=_dtype())


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis, keepdims)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def reshape(self, *shape) -> Tensor:
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(op: str, a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None
    return a, b


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _pair("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair("mul", a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a, b) -> Tensor:
    a, b = _pair("div", a, b)
    out = a.data / b.data
    return _node(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., n) and a 2-D ``b`` of shape (n, m)."""
    a, b = (as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b))
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def back(g):
        ga = g @ b.data.T
        if a.ndim == 1:
            gb = np.outer(a.data, g)
        else:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _node(a.data @ b.data, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias``."""
    return add(matmul(x, weight), bias)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError("concat", ts[0].shape, t.shape)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(np.concatenate([t.data for t in ts], axis=ax), ts, back, "concat")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _node(out, (a,), lambda g: (g.reshape(old),), "reshape")


# -- elementwise unary -----------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError(f"log: input must be strictly positive (min {a.data.min()!r})")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(a))`` without overflow."""
    return _node(np.logaddexp(0.0, a.data), (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def log_sigmoid(a: Tensor) -> Tensor:
    out = -np.logaddexp(0.0, -a.data)
    return _node(out, (a,), lambda g: (g * _sigmoid(-a.data),), "log_sigmoid")


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _node(out, (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


# -- reductions and normalisers ----------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def logsumexp(a: Tensor, axis=-1, keepdims: bool = False) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    lse = np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True)) + m

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(a.data - lse),)

    out = lse if keepdims else np.squeeze(lse, axis=axis)
    return _node(out, (a,), back, "logsumexp")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _node(out, (a,), back, "log_softmax")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    e = np.exp(a.data - np.max(a.data, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _node(out, (a,), back, "softmax")


# -- tape replay ---------------------------------------------------------------------

def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Replay the tape in reverse from a scalar ``loss``.

    Returns a map from node id to gradient for every tape node reachable
    from ``loss``; leaf tensors that require a gradient also get ``.grad``
    set (overwritten, not accumulated).
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not attached to a tape")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes:
            continue
        nodes[t.node_id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.get(nid)
        if g is None or t._backward is None:
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg, dtype=p.dtype), p.shape)
            prev = grads.get(p.node_id)
            grads[p.node_id] = pg if prev is None else prev + pg
    for nid, t in nodes.items():
        if t._backward is None:
            t.grad = grads.get(nid, np.zeros_like(t.data))
    return grads


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` for ``params``; unreachable parameters get zeros."""
    g = backward(loss)
    return [g.get(p.node_id, np.zeros_like(p.data)) for p in params]


def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    eps: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Largest relative disagreement between tape and central-difference gradients.

    The error per coordinate is ``|a - n| / max(1, |a| + |n|)``. Evaluation
    runs at float64 regardless of the ambient precision. ``coords`` limits
    the finite differences to a subset of flat indices.
    """
    with precision("float64"):
        x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
        t = Tensor(x0.copy(), requires_grad=True)
        backward(f(t))
        analytic = t.grad.reshape(-1)
        idx = range(x0.size) if coords is None else coords
        worst = 0.0
        flat = x0.reshape(-1)
        with no_grad():
            for i in idx:
                hi, lo = flat.copy(), flat.copy()
                hi[i] += eps
                lo[i] -= eps
                fp = f(Tensor(hi.reshape(x0.shape))).item()
                fm = f(Tensor(lo.reshape(x0.shape))).item()
                num = (fp - fm) / (2.0 * eps)
                a = analytic[i]
                worst = max(worst, abs(a - num) / max(1.0, abs(a) + abs(num)))
    return worst


def grad_check_params(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """:func:`grad_check` over parameter tensors that ``f`` closes over.

    Parameters are perturbed in place and restored. With ``max_coords`` a
    random subset of that many coordinates per parameter is checked.
    """
    for p in params:
        p.grad = None
    grads = grad(f(), params)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, grads):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
            ga = ga.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                worst = max(worst, abs(ga[i] - num) / max(1.0, abs(ga[i]) + abs(num)))
    return worst
