"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations record nodes on the active :class:`GradTape`. Outside a tape (or
inside :func:`no_grad`) they are plain numpy calls and allocate no records,
which is what the gradient-free inference path relies on.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    """A float64 array, optionally a leaf parameter that receives gradients."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar, used sparingly by the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _TapeState(threading.local):
    def __init__(self):
        self.stack: list[GradTape] = []
        self.disabled = 0


_state = _TapeState()

# Total nodes ever recorded in this process; inference must not move it.
record_counter = 0


@dataclass
class GradTape:
    """Ordered record of primitive operations for one forward pass.

    Usage::

        with GradTape() as tape:
            loss = f(params)
        tape.backward(loss)

    Gradients accumulate into ``param.grad`` for every leaf with
    ``requires_grad``; buffers are never zeroed implicitly.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _state.stack.pop()
        assert popped is self

    @property
    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        produced = {id(n.out) for n in self.nodes}
        for node in self.nodes:
            for p in node.parents:
                if p.requires_grad and id(p) not in produced:
                    seen.setdefault(id(p), p)
        return list(seen.values())

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue
            for parent, g in zip(node.parents, node.backward(g_out)):
                if g is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + g
                else:
                    grads[id(parent)] = g
        # whatever remains belongs to leaves (tensors not produced on this tape)
        produced = {id(n.out) for n in self.nodes}
        for node in self.nodes:
            for parent in node.parents:
                key = id(parent)
                if key in grads and key not in produced:
                    g = grads.pop(key)
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += g
        if id(loss) in grads and loss.requires_grad and id(loss) not in produced:
            g = grads.pop(id(loss))
            if loss.grad is None:
                loss.grad = np.zeros_like(loss.data)
            loss.grad += g


@contextmanager
def no_grad():
    _state.disabled += 1
    try:
        yield
    finally:
        _state.disabled -= 1


def _active_tape() -> GradTape | None:
    if _state.disabled or not _state.stack:
        return None
    return _state.stack[-1]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(out_data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out_data`` and register a node if any parent needs gradients.

    ``backward`` maps the output cotangent to one cotangent per parent (None
    for parents that need nothing). Custom primitives elsewhere in the
    package are built on this.
    """
    global record_counter
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, tuple(parents), backward))
        record_counter += 1
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul needs at least 1-d operands")
    k_a = a.shape[-1]
    k_b = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if k_a != k_b:
        raise ShapeError(f"matmul: inner dimensions {a.shape} @ {b.shape} disagree")
    A, B = a.data, b.data
    out = np.matmul(A, B)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if B.ndim == 1:
                ga = np.multiply.outer(g, B)
            else:
                ga = np.matmul(g if A.ndim > 1 else g[..., None, :], np.swapaxes(B, -1, -2))
                if A.ndim == 1:
                    ga = ga[..., 0, :]
            ga = _unbroadcast(ga, A.shape)
        if b.requires_grad:
            if A.ndim == 1:
                gb = np.multiply.outer(A, g) if B.ndim > 1 else A * g
            elif B.ndim == 1:
                gb = np.matmul(np.swapaxes(A, -1, -2), g[..., None])[..., 0]
            else:
                gb = np.matmul(np.swapaxes(A, -1, -2), g)
            gb = _unbroadcast(gb, B.shape)
        return ga, gb

    return record(out, (a, b), backward)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    src_shape = x.shape

    def backward(g):
        full = np.zeros(src_shape)
        np.add.at(full, idx, g)
        return (full,)

    return record(np.array(x.data[idx]), (x,), backward)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    A, B = a.data, b.data
    return record(
        A * B,
        (a, b),
        lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    A, B = a.data, b.data
    out = A / B
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / B, A.shape), _unbroadcast(-g * out / B, B.shape)),
    )


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return record(x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return record(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return record(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    X = x.data
    return record(np.log(X), (x,), lambda g: (g / X,))


def elementwise(f: str, x, y=None, c: float | None = None) -> Tensor:
    """Dispatch by name: ``relu``, ``tanh``, ``scale`` (needs ``c``) or ``add``."""
    if f == "relu":
        return relu(x)
    if f == "tanh":
        return tanh(x)
    if f == "scale":
        if c is None:
            raise ValueError("scale needs a constant c")
        return scale(x, c)
    if f == "add":
        if y is None:
            raise ValueError("add needs a second operand")
        a, b = as_tensor(x), as_tensor(y)
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return add(a, b)
    raise ValueError(f"unknown elementwise function {f!r}")


# --------------------------------------------------------------------------
# reductions and normalisers
# --------------------------------------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return record(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return record(p, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return record(np.asarray(loss), (logits,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then affine ``gamma * xhat + beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gamma.data
    out = xhat * G + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * G
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, G.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return record(out, (x, gamma, beta), backward)


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """AdamW moments and hyperparameters for a fixed list of parameters."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_params(cls, params: Iterable[Tensor], **hyper) -> "OptimizerState":
        params = list(params)
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    """In-place decoupled-weight-decay Adam update with bias correction."""
    if len(params) != len(state.first_moment) or len(grads) != len(params):
        raise ShapeError("params, grads and optimizer state have different lengths")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in adamw_step")
    state.step_count += 1
    t = state.step_count
    b1, b2, lr = state.beta1, state.beta2, state.learning_rate
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"parameter {p.shape} vs gradient {np.shape(g)} mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Normwise relative error ``|a - b| / max(|a|, |b|)``; 0 when both vanish."""
    a = np.ravel(a)
    b = np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numerical_gradient(fn: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``param.data``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def analytic_gradient(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    with GradTape() as tape:
        loss = fn()
    tape.backward(loss)
    return [p.grad.copy() for p in params]


def gradient_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences."""
    analytic = analytic_gradient(fn, params)

    def value() -> float:
        with no_grad():
            return float(fn().data)

    worst = 0.0
    for p, ga in zip(params, analytic):
        gn = numerical_gradient(value, p, h)
        worst = max(worst, relative_error(ga, gn))
    return worst
