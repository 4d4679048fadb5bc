"""Discrete bottlenecks: codebook lookup, lookup-free sign quantisation, binning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DimensionError, Tensor, mean, square, stop_gradient, straight_through, sub, take, tsum

MAX_LFQ_DIM = 30


@dataclass
class QuantizationResult:
    quantized: Tensor
    indices: np.ndarray
    codebook_loss: Tensor
    commitment_loss: Tensor


class Codebook:
    """K × D table of trainable embedding vectors plus usage counters."""

    def __init__(self, size: int, dim: int, rng: np.random.Generator | None = None,
                 entries: np.ndarray | None = None, dtype=np.float64):
        if size < 2 or dim < 1:
            raise ValueError(f"codebook needs K >= 2 and D >= 1, got K={size}, D={dim}")
        if entries is None:
            rng = rng if rng is not None else np.random.default_rng()
            entries = rng.uniform(-1.0 / size, 1.0 / size, size=(size, dim))
        entries = np.asarray(entries, dtype=dtype)
        if entries.shape != (size, dim):
            raise DimensionError(f"codebook entries have shape {entries.shape}, expected {(size, dim)}")
        if not np.all(np.isfinite(entries)):
            raise ValueError("codebook entries must be finite")
        self.entries = Tensor(entries, requires_grad=True, dtype=dtype)
        self.usage_counts = np.zeros(size, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"entries": self.entries}


def nearest_indices(latents: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """argmin_j ||x - e_j||² per row; ties go to the lowest index.

    Candidates are screened with the expanded form ||e||² - 2 x·e in float64;
    every entry within rounding distance of the screened minimum is then
    rescored with the exact difference form, so ties resolve identically to a
    brute-force scan.
    """
    x = np.asarray(latents, dtype=np.float64)
    e = np.asarray(entries, dtype=np.float64)
    e_sq = (e * e).sum(axis=1)
    approx = e_sq[None, :] - 2.0 * (x @ e.T)
    best = approx.min(axis=1, keepdims=True)
    x_sq = (x * x).sum(axis=1, keepdims=True)
    tol = 1e-9 * (x_sq + e_sq.max()) + 1e-300
    near = approx <= best + tol
    out = approx.argmin(axis=1)
    ambiguous = np.flatnonzero(near.sum(axis=1) > 1)
    for r in ambiguous:
        cand = np.flatnonzero(near[r])
        d = ((x[r] - e[cand]) ** 2).sum(axis=1)
        out[r] = cand[np.argmin(d)]
    return out.astype(np.int64)


def _sq_dist(a: Tensor, b: Tensor) -> Tensor:
    return mean(tsum(square(sub(a, b)), axis=-1))


def vq_lookup(codebook: Codebook, latents: Tensor, update_usage: bool = True) -> QuantizationResult:
    """Snap each latent row to its nearest codebook entry.

    The quantised output equals the selected entries exactly; its gradient is
    copied straight through to ``latents``.  The codebook loss moves entries
    toward (stopped) encoder outputs, the commitment loss moves encoder outputs
    toward (stopped) entries.  Both are per-row squared distances averaged
    over the batch.
    """
    if latents.ndim != 2 or latents.shape[1] != codebook.dim:
        raise DimensionError(f"latents {latents.shape} do not match codebook dim {codebook.dim}")
    n = latents.shape[0]
    if n == 0:
        zero = Tensor(0.0, dtype=latents.dtype)
        return QuantizationResult(Tensor(np.zeros((0, codebook.dim)), dtype=latents.dtype),
                                  np.zeros(0, dtype=np.int64), zero, zero)
    idx = nearest_indices(latents.data, codebook.entries.data)
    selected = take(codebook.entries, idx, axis=0)
    quantized = straight_through(latents, selected.data)
    codebook_loss = _sq_dist(stop_gradient(latents), selected)
    commitment_loss = _sq_dist(latents, stop_gradient(selected))
    if update_usage:
        np.add.at(codebook.usage_counts, idx, 1)
    return QuantizationResult(quantized, idx, codebook_loss, commitment_loss)


def lfq_quantize(latents: Tensor) -> QuantizationResult:
    """Per-dimension sign quantisation onto {-1, +1}^D (sign(0) = +1).

    The index is the sign pattern read as a binary number, first dimension
    most significant, with +1 as bit 1.
    """
    if latents.ndim != 2:
        raise DimensionError(f"lfq_quantize expects [batch, D], got {latents.shape}")
    D = latents.shape[1]
    if D > MAX_LFQ_DIM:
        raise OverflowError(f"implicit LFQ code space 2^{D} exceeds the 2^{MAX_LFQ_DIM} index limit")
    bits = latents.data >= 0
    z = np.where(bits, 1.0, -1.0).astype(latents.dtype)
    weights = 1 << np.arange(D - 1, -1, -1, dtype=np.int64)
    idx = (bits.astype(np.int64) * weights).sum(axis=1)
    quantized = straight_through(latents, z)
    commitment = _sq_dist(latents, Tensor(z, dtype=latents.dtype))
    zero = Tensor(0.0, dtype=latents.dtype)
    return QuantizationResult(quantized, idx, zero, commitment)


@dataclass
class BinSpec:
    bins_per_dim: int = 256
    low: np.ndarray | float = -1.0
    high: np.ndarray | float = 1.0

    def __post_init__(self):
        if self.bins_per_dim < 2:
            raise ValueError(f"bins_per_dim must be >= 2, got {self.bins_per_dim}")
        if np.any(np.asarray(self.low) >= np.asarray(self.high)):
            raise ValueError("every bin range needs low < high")

    @property
    def width(self) -> np.ndarray:
        return (np.asarray(self.high, dtype=np.float64) - np.asarray(self.low, dtype=np.float64)) / self.bins_per_dim


def bin_encode(actions, spec: BinSpec) -> np.ndarray:
    """Uniform per-dimension bin index; out-of-range values clamp to edge bins."""
    x = np.asarray(actions, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("bin_encode needs finite actions")
    low = np.asarray(spec.low, dtype=np.float64)
    idx = np.floor((x - low) / spec.width).astype(np.int64)
    return np.clip(idx, 0, spec.bins_per_dim - 1)


def bin_decode(indices, spec: BinSpec) -> np.ndarray:
    """Bin centres for the given indices."""
    idx = np.asarray(indices)
    low = np.asarray(spec.low, dtype=np.float64)
    return low + (idx + 0.5) * spec.width


def codebook_perplexity(codebook: Codebook | np.ndarray) -> float:
    """exp(entropy) of the empirical usage distribution, in [1, K]."""
    counts = codebook.usage_counts if isinstance(codebook, Codebook) else np.asarray(codebook)
    total = counts.sum()
    if total <= 0:
        raise ValueError("codebook has no recorded usage")
    p = counts[counts > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))
