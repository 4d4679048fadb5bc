"""Small pre-norm causal transformer built on the autodiff engine."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, layernorm, matmul, mul, relu, reshape, softmax_causal, transpose
from .layers import Linear, Module


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64):
        self.gain = Tensor(np.ones(dim), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(dim), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias)

    def parameters(self):
        return {"gain": self.gain, "bias": self.bias}


class CausalSelfAttention(Module):
    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, dtype=np.float64):
        if dim % n_heads:
            raise ValueError(f"model dim {dim} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.query = Linear(dim, dim, rng, dtype=dtype)
        self.key = Linear(dim, dim, rng, dtype=dtype)
        self.value = Linear(dim, dim, rng, dtype=dtype)
        self.out = Linear(dim, dim, rng, dtype=dtype)

    def _heads(self, t: Tensor, B: int, T: int) -> Tensor:
        h = self.n_heads
        dh = t.shape[-1] // h
        return reshape(transpose(reshape(t, (B, T, h, dh)), (0, 2, 1, 3)), (B * h, T, dh))

    def __call__(self, x: Tensor) -> Tensor:
        B, T, d = x.shape
        h = self.n_heads
        dh = d // h
        q = self._heads(self.query(x), B, T)
        k = self._heads(self.key(x), B, T)
        v = self._heads(self.value(x), B, T)
        scores = mul(matmul(q, transpose(k)), 1.0 / np.sqrt(dh))
        y = matmul(softmax_causal(scores), v)  # [B*h, T, dh]
        y = transpose(reshape(y, (B, h, T, dh)), (0, 2, 1, 3))
        return self.out(reshape(y, (B, T, d)))

    def parameters(self):
        params = {}
        for name in ("query", "key", "value", "out"):
            params.update({f"{name}.{k}": v for k, v in getattr(self, name).parameters().items()})
        return params


class Block(Module):
    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, mlp_ratio: int = 4,
                 dtype=np.float64):
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = CausalSelfAttention(dim, n_heads, rng, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng, dtype=dtype)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = add(x, self.attn(self.ln1(x)))
        return add(x, self.fc2(relu(self.fc1(self.ln2(x)))))

    def parameters(self):
        params = {}
        for name in ("ln1", "attn", "ln2", "fc1", "fc2"):
            for k, v in getattr(self, name).parameters().items():
                params[f"{name}.{k}"] = v
        return params


class CausalTransformer(Module):
    def __init__(self, dim: int = 64, n_layers: int = 2, n_heads: int = 4,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng()
        self.blocks = [Block(dim, n_heads, rng, dtype=dtype) for _ in range(n_layers)]
        self.ln_f = LayerNorm(dim, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def parameters(self):
        params = {}
        for i, block in enumerate(self.blocks):
            params.update({f"block{i}.{k}": v for k, v in block.parameters().items()})
        params.update({f"ln_f.{k}": v for k, v in self.ln_f.parameters().items()})
        return params
