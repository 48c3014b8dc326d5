"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active, and whose inputs require
gradients, are recorded on that tape. Everything else is evaluated eagerly
and leaves no trace, which is how the teacher branch gets its stop-gradient.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(matmul(w, w))
    >>> tape.backward(loss)
    >>> w.grad
    array([[4., 4.],
           [4., 4.]])
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

LOG_EPS = 1e-12
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_active_tapes: list["Tape"] = []


class Tensor:
    """An immutable float64 array that may participate in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def isfinite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return scalar_multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations.

    Nodes are appended in execution order, so operands always precede the
    nodes that consume them and a reversed walk is a valid reverse
    topological sweep.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")
        if loss.is_leaf:
            loss.grad = _accumulate(loss.grad, np.ones_like(loss.data))
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad = _accumulate(inp.grad, gi)
                else:
                    key = id(inp)
                    grads[key] = _accumulate(grads.get(key), gi)


def backward(loss: Tensor) -> None:
    """Backpropagate through the innermost active tape."""
    if not _active_tapes:
        raise RuntimeError("backward() called with no active tape")
    _active_tapes[-1].backward(loss)


def _accumulate(current: np.ndarray | None, g: np.ndarray) -> np.ndarray:
    return g if current is None else current + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _active_tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(out, tuple(inputs), backward_fn)
        _active_tapes[-1].nodes.append(out._node)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape),
                              unbroadcast(g * a.data, b.shape)))


def scalar_multiply(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _record(a.data * s, (a,), lambda g: (g * s,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a, eps: float = LOG_EPS) -> Tensor:
    """Natural log with inputs clamped below at ``eps``."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, eps)
    live = a.data > eps
    return _record(np.log(clamped), (a,), lambda g: (np.where(live, g / clamped, 0.0),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_SQRT_2_OVER_PI * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(out, (a,), backward_fn)


# linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 2-D right operand is shared across every leading batch index of ``a``,
    which is how layer weights are applied to batched activations.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), backward_fn)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a, i: int = -1, j: int = -2) -> Tensor:
    a = as_tensor(a)
    return _record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _record(np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (unbroadcast(g, a.shape),))


def slice_(a, index) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), backward_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _record(out, tensors,
                   lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)))


# reductions ----------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scalar_multiply(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max_over_axis(a, axis: int = 0) -> Tensor:
    """Maximum along ``axis``; gradient goes to the first maximal index only."""
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ValueError("max over an empty axis")
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record(out, (a,), backward_fn)


# normalisation and probabilities ---------------------------------------------

def softmax(x, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of ``x / temperature`` along ``axis``."""
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    x = as_tensor(x)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot) / temperature,)

    return _record(out, (x,), backward_fn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply an elementwise affine map."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (gx, unbroadcast(g * xhat, gain.shape), unbroadcast(g, bias.shape))

    return _record(out, (x, gain, bias), backward_fn)


def cross_entropy(p, q, eps: float = LOG_EPS) -> Tensor:
    """``-sum(p * log(q))`` over the last axis, with ``q`` clamped at ``eps``.

    ``p`` is treated as a constant target; only ``q`` receives gradient.
    Leading axes of ``p`` and ``q`` broadcast, so passing ``p[:, None]`` and
    ``q[None, :]`` yields every pairwise cross entropy at once.
    """
    p_data = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    q = as_tensor(q)
    if p_data.shape[-1] != q.shape[-1]:
        raise ValueError(f"cross_entropy length mismatch: {p_data.shape[-1]} vs {q.shape[-1]}")
    clamped = np.maximum(q.data, eps)
    out = -(p_data * np.log(clamped)).sum(axis=-1)
    live = q.data > eps

    def backward_fn(g):
        gq = np.where(live, -np.expand_dims(g, -1) * p_data / clamped, 0.0)
        return (unbroadcast(gq, q.shape),)

    return _record(out, (q,), backward_fn)


# gradient checking -----------------------------------------------------------

def numerical_grad(f: Callable[[], float], x: np.ndarray, index, h: float = 1e-6) -> float:
    """Central difference of ``f`` w.r.t. ``x[index]`` (``x`` is perturbed in place)."""
    orig = x[index]
    x[index] = orig + h
    fp = f()
    x[index] = orig - h
    fm = f()
    x[index] = orig
    return (fp - fm) / (2 * h)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; zero when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-6,
                    max_entries: int | None = None, rng: np.random.Generator | None = None
                    ) -> list[float]:
    """Compare tape gradients of scalar ``fn(*tensors)`` with central differences.

    Returns one relative error per input array. With ``max_entries`` set, only a
    random subset of that many coordinates per array is probed.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
    tape.backward(out)

    def value() -> float:
        return float(fn(*[Tensor(a) for a in arrays]).data)

    errors = []
    rng = rng or np.random.default_rng(0)
    for a, t in zip(arrays, tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        flat = list(np.ndindex(a.shape))
        if max_entries is not None and len(flat) > max_entries:
            picks = rng.choice(len(flat), size=max_entries, replace=False)
            flat = [flat[i] for i in picks]
        numeric = np.array([numerical_grad(value, a, ix, h) for ix in flat])
        errors.append(relative_error(np.array([analytic[ix] for ix in flat]), numeric))
    return errors
