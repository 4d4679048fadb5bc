"""Minimal reverse-mode differentiation over numpy arrays.

Every differentiable operation produces a :class:`Tensor` that remembers its
operands and a closure computing the vector-Jacobian product.  Operations are
stamped with a monotonically increasing sequence number when executed, so the
set of ancestors of a loss sorted by that number *is* the computation tape in
execution (hence topological) order.  :meth:`Tensor.backward` walks it once in
reverse.

Broadcasting is deliberately narrow: the only shape mismatch accepted by the
binary ops is a right operand whose shape is a suffix of the left operand's
shape (bias-add over leading dimensions), plus Python scalars.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

_seq = itertools.count()
_state = threading.local()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TrainingError(RuntimeError):
    """Raised when an optimisation step meets non-finite values."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense array with optional gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_seq)
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.name = ""
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out.grad = None
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        out._seq = next(_seq)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- backward --------------------------------------------------------------

    def tape(self) -> list["Tensor"]:
        """Recorded operations reachable from this tensor, in execution order."""
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._backward is not None:
                nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._seq)
        return nodes

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        records = self.tape()
        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(records):
            if node.grad is not None:
                node._backward(node.grad)
        # ancestors no gradient reached still get a (zero) buffer
        for node in records:
            for parent in node._parents:
                if parent.requires_grad and parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("division is only defined by Python scalars")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.array(g, dtype=t.data.dtype)
        else:
            t.grad += g


def _suffix_reduce(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# -- elementwise arithmetic --------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)

        def backward(g):
            _accumulate(a, g)

        return Tensor._result(a.data + c, (a,), backward)
    _check_binary(a, b, "add")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, _suffix_reduce(g, b.shape))

    return Tensor._result(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return Tensor._result(-a.data, (a,), backward)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_binary(a, b, "sub")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -_suffix_reduce(g, b.shape))

    return Tensor._result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)

        def backward(g):
            _accumulate(a, g * c)

        return Tensor._result(a.data * c, (a,), backward)
    _check_binary(a, b, "mul")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, _suffix_reduce(g * a.data, b.shape))

    return Tensor._result(a.data * b.data, (a, b), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, 2.0 * a.data * g)

    return Tensor._result(a.data * a.data, (a,), backward)


def tabs(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.sign(a.data) * g)

    return Tensor._result(np.abs(a.data), (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _accumulate(a, out * g)

    return Tensor._result(out, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def backward(g):
        _accumulate(a, out * (1.0 - out) * g)

    return Tensor._result(out, (a,), backward)


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x), evaluated as max(x, 0) + ln(1 + e^-|x|)."""

    def backward(g):
        _accumulate(a, _sigmoid(a.data) * g)

    return Tensor._result(softplus_np(a.data), (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return Tensor._result(a.data * mask, (a,), backward)


def stop_gradient(a: Tensor) -> Tensor:
    """Identity in the forward pass; contributes no gradient."""
    return Tensor(a.data, dtype=a.dtype)


def straight_through(a: Tensor, value: np.ndarray) -> Tensor:
    """Return ``value`` exactly, routing its gradient to ``a`` unchanged."""
    value = np.asarray(value, dtype=a.dtype)
    if value.shape != a.shape:
        raise DimensionError(f"straight_through: shapes {a.shape} and {value.shape} differ")

    def backward(g):
        _accumulate(a, g)

    return Tensor._result(value.copy(), (a,), backward)


# -- reductions and shape ops -------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return Tensor._result(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return Tensor._result(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose needs >= 2 dims, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return Tensor._result(a.data.transpose(axes), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, part)

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take(a: Tensor, indices, axis: int = 0, unique: bool = False) -> Tensor:
    """Gather slices along ``axis`` (embedding lookup, row selection).

    ``unique=True`` promises no repeated indices, allowing a plain scatter in
    the backward pass.
    """
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        if unique:
            moved[idx] = gm
        else:
            flat_idx = idx.reshape(-1)
            cols = gm.reshape(flat_idx.size, -1)
            n = moved.shape[0]
            sel = sparse.csr_matrix((np.ones(flat_idx.size, dtype=cols.dtype),
                                     (flat_idx, np.arange(flat_idx.size))), shape=(n, flat_idx.size))
            moved += np.asarray(sel @ cols).reshape(moved.shape)
        _accumulate(a, full)

    return Tensor._result(np.take(a.data, idx, axis=axis), (a,), backward)


# -- linear algebra ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``a`` may carry leading batch dimensions when ``b`` is 2-D; otherwise both
    operands must share identical leading dimensions.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be >= 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions disagree for {a.shape} and {b.shape}")
    k = a.shape[-1]
    flat = b.ndim == 2
    # with a 2-D right operand one large GEMM beats a stack of small ones
    out = (a.data.reshape(-1, k) @ b.data).reshape(*a.shape[:-1], b.shape[-1]) if flat else a.data @ b.data

    def backward(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accumulate(a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _accumulate(b, a.data.reshape(-1, k).T @ g2)
            return
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return Tensor._result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x · Wᵀ + b with W stored as [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    y = matmul(x, transpose(weight))
    return add(y, bias) if bias is not None else y


# -- composite layers ------------------------------------------------------------------


def softmax_causal(scores: Tensor) -> Tensor:
    """Row-wise softmax over the last axis with future columns masked out.

    Works on ``[..., T, T]``; row ``t`` assigns zero weight to columns ``> t``.
    """
    T = scores.shape[-1]
    if scores.ndim < 2 or scores.shape[-2] != T:
        raise DimensionError(f"softmax_causal expects square trailing dims, got {scores.shape}")
    future = np.triu(np.ones((T, T), dtype=bool), k=1)
    s = np.where(future, -np.inf, scores.data)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        _accumulate(scores, p * (g - inner))

    return Tensor._result(p, (scores,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, dx)

    return Tensor._result(out, (x, gain, bias), backward)


def mse(pred: Tensor, target) -> Tensor:
    """Mean over rows of the squared L2 error summed over the last axis."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    diff = sub(pred, Tensor(target, dtype=pred.dtype))
    sq = tsum(square(diff), axis=-1)
    return mean(sq)


# -- optimisation -------------------------------------------------------------------


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict,
              lr: float, betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
              names: Sequence[str] | None = None) -> None:
    """One in-place Adam update with bias correction.

    ``state`` holds ``t`` and the first/second moment lists; it is created on
    the first call.  Non-finite gradients abort the whole step before any
    parameter is touched.
    """
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[i] if names is not None else f"#{i}"
            raise TrainingError(f"non-finite gradient in parameter {name}")
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    for p, m in zip(params, state["m"]):
        if p.shape != m.shape:
            raise DimensionError(f"adam state shape {m.shape} does not match parameter {p.shape}")
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    """Adam over a name → Tensor mapping, with linear learning-rate warmup.

    With ``decay_steps`` set, the rate follows a cosine from its peak down to
    ``min_lr_ratio`` × peak at step ``decay_steps`` and stays there.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
                 warmup_steps: int = 100, decay_steps: int | None = None, min_lr_ratio: float = 0.05):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.decay_steps = decay_steps
        self.min_lr_ratio = min_lr_ratio
        self.state: dict = {}
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def current_lr(self) -> float:
        if self.warmup_steps > 0 and self.steps < self.warmup_steps:
            return self.lr * (self.steps + 1) / self.warmup_steps
        if not self.decay_steps:
            return self.lr
        span = max(self.decay_steps - self.warmup_steps, 1)
        frac = min(1.0, (self.steps - max(self.warmup_steps, 0)) / span)
        cos = 0.5 * (1.0 + np.cos(np.pi * frac))
        return self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)

    def step(self) -> None:
        names = list(self.params)
        tensors = [self.params[n] for n in names]
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        adam_step([t.data for t in tensors], grads, self.state, self.current_lr(),
                  self.betas, self.eps, names=names)
        self.steps += 1


# -- verification -----------------------------------------------------------------------


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    out = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def gradcheck(fn: Callable[..., Tensor], inputs: Iterable[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` must return a scalar Tensor.  Relative error is measured as
    ``|a - n| / max(1, |a|, |n|)`` per element.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    loss = fn(*inputs)
    loss.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad.copy()

        def f():
            with no_grad():
                return float(fn(*inputs).data)

        numeric = numerical_grad(f, t.data, h)
        scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        if analytic.size:
            worst = max(worst, float(np.max(np.abs(analytic - numeric) / scale)))
    return worst
