"""Linear layers, the ∞-norm Lipschitz-normalised linear layer, and MLP stacks."""

from __future__ import annotations

import numpy as np

from .autodiff import (DimensionError, Tensor, _accumulate, _sigmoid, linear, mul, relu,
                       softplus, softplus_np)

# Rows whose absolute sum exceeds the bound by less than this relative margin are
# left alone; this makes normalisation exactly idempotent in floating point.
_RESCALE_SLACK = 1e-12


def inverse_softplus(y: float) -> float:
    """c such that softplus(c) == y, for y > 0."""
    if y <= 0:
        raise ValueError(f"inverse_softplus needs a positive value, got {y}")
    if y > 30:
        return float(y + np.log(-np.expm1(-y)))
    return float(np.log(np.expm1(y)))


def lipschitz_normalize(weight: Tensor, raw_bound: Tensor) -> Tensor:
    """Rescale rows of ``weight`` so each absolute row sum is at most softplus(c).

    Row i becomes ``W_i * min(1, softplus(c) / sum_j |W_ij|)``.  Rows already
    inside the bound, and all-zero rows, pass through bit-for-bit.  The result
    stays on the tape with gradients to both ``weight`` and ``raw_bound``.
    """
    if weight.ndim != 2:
        raise DimensionError(f"lipschitz_normalize expects a 2-D weight, got {weight.shape}")
    W = weight.data
    c = raw_bound.data
    bound = softplus_np(c)
    rowsum = np.abs(W).sum(axis=1)
    scaled = rowsum > bound * (1.0 + _RESCALE_SLACK)
    safe = np.where(scaled, rowsum, 1.0)
    factor = np.where(scaled, bound / safe, 1.0)
    out = np.where(scaled[:, None], W * factor[:, None], W)

    def backward(g):
        if not scaled.any():
            _accumulate(weight, g)
            return
        if weight.requires_grad:
            # d(W_ij * s / r_i)/dW_ik = s/r_i δ_jk - W_ij s sign(W_ik) / r_i²
            proj = (g * W).sum(axis=1)
            gw_scaled = (factor[:, None] * g
                         - (proj * bound / safe ** 2)[:, None] * np.sign(W))
            _accumulate(weight, np.where(scaled[:, None], gw_scaled, g))
        if raw_bound.requires_grad:
            dsum = ((g * W).sum(axis=1) / safe)[scaled].sum()
            _accumulate(raw_bound, np.asarray(dsum * _sigmoid(np.atleast_1d(c)).reshape(c.shape),
                                              dtype=weight.dtype))

    return Tensor._result(out, (weight, raw_bound), backward)


class Module:
    """Anything owning named parameters."""

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


class Linear(Module):
    """Affine layer with weight stored as [out, in]."""

    lipschitz = False

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        limit = np.sqrt(1.0 / n_in)
        self.weight = Tensor(rng.uniform(-limit, limit, size=(n_out, n_in)), requires_grad=True,
                             dtype=dtype)
        self.bias = Tensor(rng.uniform(-limit, limit, size=n_out), requires_grad=True, dtype=dtype)

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def effective_weight(self) -> Tensor:
        return self.weight

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"layer expects {self.n_in} input features, got shape {x.shape}")
        return linear(x, self.effective_weight(), self.bias)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class LipschitzLinear(Linear):
    """Linear layer whose rows are renormalised on every forward pass.

    The raw weight is never overwritten; ``raw_bound`` is initialised so that
    softplus(raw_bound) equals the largest absolute row sum at init, making
    the normalisation a no-op until training moves either quantity.
    """

    lipschitz = True

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__(n_in, n_out, rng, dtype=dtype)
        max_rowsum = float(np.abs(self.weight.data).sum(axis=1).max())
        self.raw_bound = Tensor(inverse_softplus(max_rowsum), requires_grad=True, dtype=dtype)

    def bound(self) -> float:
        return float(softplus_np(self.raw_bound.data))

    def effective_weight(self) -> Tensor:
        return lipschitz_normalize(self.weight, self.raw_bound)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias, "raw_bound": self.raw_bound}


class MLPStack(Module):
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, sizes, rng: np.random.Generator, lipschitz_constrained: bool = False,
                 dtype=np.float64):
        sizes = list(sizes)
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        cls = LipschitzLinear if lipschitz_constrained else Linear
        self.layers = [cls(a, b, rng, dtype=dtype) for a, b in zip(sizes[:-1], sizes[1:])]
        self.lipschitz_constrained = lipschitz_constrained

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].n_in] + [l.n_out for l in self.layers]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters().items():
                params[f"{i}.{name}"] = p
        return params


def _require_constrained(stack: MLPStack) -> None:
    if not stack.lipschitz_constrained:
        raise ValueError("Lipschitz bound requested for an unconstrained MLP stack")


def network_lipschitz_bound(stack: MLPStack) -> float:
    """Product of per-layer softplus bounds (valid because ReLU is 1-Lipschitz)."""
    _require_constrained(stack)
    return float(np.prod([layer.bound() for layer in stack.layers]))


def lipschitz_loss(stack: MLPStack) -> Tensor:
    """Differentiable product of softplus(c_l) over the stack's layers."""
    _require_constrained(stack)
    out = softplus(stack.layers[0].raw_bound)
    for layer in stack.layers[1:]:
        out = mul(out, softplus(layer.raw_bound))
    return out
