"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Only the handful of ops needed by the encoders, the denoiser and the two
losses are provided. Gradients are recorded onto the active :class:`GradTape`;
operations performed outside a tape produce constants.

Forward reductions sum in sorted order and matmul contracts through
``np.einsum(optimize=False)`` so that results do not depend on the position of a
row inside a batch. The denoiser relies on this for bitwise permutation
equivariance over candidates.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_TAPES: list["GradTape"] = []


class GradTape:
    """Ordered record of differentiable ops, consumed by a single :func:`backward`."""

    def __init__(self) -> None:
        self.nodes: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_recorded", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._recorded = False
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._recorded

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: scale(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    # make numpy defer to the reflected operators above
    __array_ufunc__ = None

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)

    def __getitem__(self, key) -> "Tensor":
        return getitem(self, key)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite_or_raise(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    _finite_or_raise(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._recorded = False
    out.requires_grad = False
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._recorded = True
        _TAPES[-1].nodes.append((out, parents, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _sorted_sum(x: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    if axis is None:
        total = np.sort(x, axis=None).sum()
        return np.full((1,) * x.ndim, total) if keepdims else np.asarray(total)
    return np.sort(x, axis=axis).sum(axis=axis, keepdims=keepdims)


# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NumericError("division by zero")
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward, "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = np.einsum("...ij,...jk->...ik", a.data, b.data, optimize=False)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward, "matmul")


# elementwise unary ops


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp_min(x, lo: float) -> Tensor:
    """``max(x, lo)``; the gradient is zero wherever the floor is active."""
    x = as_tensor(x)
    keep = x.data >= lo
    return _make(np.where(keep, x.data, lo), (x,), lambda g: (g * keep,), "clamp_min")


def softmax(logits, axis: int = -1) -> Tensor:
    x = as_tensor(logits)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite logits")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / _sorted_sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


# reductions


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(_sorted_sum(x.data, axis, keepdims), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis, keepdims), 1.0 / count)


def l2norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt(_sorted_sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise NumericError("L2 norm of a zero vector")

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * x.data / norm,)

    out = norm if keepdims else np.squeeze(norm, axis=axis)
    return _make(out, (x,), backward, "l2norm")


# shape plumbing


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    old = x.shape

    def backward(g):
        out = np.zeros(old)
        np.add.at(out, key, g)
        return (out,)

    return _make(np.array(x.data[key]), (x,), backward, "getitem")


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, -1, -2).copy(), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def log_softmax(logits, axis: int = -1) -> Tensor:
    x = as_tensor(logits)
    # the max shift is a constant: log-sum-exp is invariant to it
    shifted = sub(x, x.data.max(axis=axis, keepdims=True))
    return sub(shifted, log(sum_(exp(shifted), axis=axis, keepdims=True)))


def broadcast_to(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


# differentiation


def backward(loss: Tensor, tape: GradTape) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss`` through ``tape``.

    Gradients accumulate into leaves (call ``zero_grad`` between steps). A tape
    can be consumed only once.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed; run the forward pass again")
    tape.consumed = True
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, fn in reversed(tape.nodes):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for parent, pg in zip(parents, fn(g)):
            if not parent.requires_grad:
                continue
            if parent._recorded:
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
            else:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with GradTape() as tape:
        loss = f(leaf)
    backward(loss, tape)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        bumped = x0.copy().reshape(-1)
        bumped[i] += eps
        up = f(Tensor(bumped.reshape(x0.shape))).item()
        bumped[i] -= 2 * eps
        down = f(Tensor(bumped.reshape(x0.shape))).item()
        flat[i] = (up - down) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad**2
            if self.lr:
                p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
