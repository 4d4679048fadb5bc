"""Action tokenizers behind a scikit-learn style estimator interface.

``ActionTokenizer(kind=...)`` covers the five supported tokenizers:

``mlp``
    continuous latent from an MLP encoder, paired decoder.
``bin``
    per-dimension uniform bins; the token is a sum of learned per-dimension
    bin embeddings and the reconstruction is the bin centre.
``vqvae``
    MLP encoder, nearest-codebook quantisation, MLP decoder.
``lfqvae``
    MLP encoder, sign quantisation onto {-1, +1}^D, MLP decoder.
``lipvqvae``
    ``vqvae`` whose encoder layers are Lipschitz-normalised.

``fit`` normalises actions to [-1, 1] per dimension and trains the autoencoder
on the weighted reconstruction / codebook / commitment / Lipschitz objective.
``transform`` returns the latent token embedding fed to a sequence model.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .autodiff import Adam, Tensor, add, mse, mul, no_grad, take
from .layers import MLPStack, lipschitz_loss, network_lipschitz_bound
from .quantizers import BinSpec, Codebook, bin_decode, bin_encode, codebook_perplexity, lfq_quantize, vq_lookup

logger = logging.getLogger(__name__)

KINDS = ("mlp", "bin", "vqvae", "lfqvae", "lipvqvae")
QUANTIZED_KINDS = ("vqvae", "lipvqvae")


@dataclass(frozen=True)
class TokenizerConfig:
    """Resolved hyperparameters; the serialisable identity of a tokenizer."""

    kind: str = "lipvqvae"
    latent_dim: int = 8
    codebook_size: int = 1024
    encoder_hidden: tuple[int, ...] = (256, 256)
    alpha: float = 1.0
    beta: float = 0.25
    gamma: float = 1e-6
    lipschitz: bool = True
    bins_per_dim: int = 256

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown tokenizer kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "lipvqvae" and not self.lipschitz:
            raise ValueError("kind='lipvqvae' requires lipschitz=True")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.kind in QUANTIZED_KINDS and self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        return d


@dataclass
class TokenizerOutput:
    """Token embedding, reconstruction and the four objective terms.

    Absent terms (e.g. codebook loss for ``mlp``) are ``None``.
    """

    embedding: Tensor
    reconstruction: Tensor
    indices: np.ndarray | None = None
    reconstruction_loss: Tensor | None = None
    codebook_loss: Tensor | None = None
    commitment_loss: Tensor | None = None
    lipschitz_loss: Tensor | None = None

    def components(self) -> dict[str, float]:
        names = ("reconstruction_loss", "codebook_loss", "commitment_loss", "lipschitz_loss")
        return {n: float(getattr(self, n).data) if getattr(self, n) is not None else 0.0 for n in names}


def total_loss(out: TokenizerOutput, cfg: TokenizerConfig) -> Tensor:
    """reconstruction + α·codebook + β·commitment + γ·Lipschitz."""
    terms = [(out.reconstruction_loss, 1.0), (out.codebook_loss, cfg.alpha),
             (out.commitment_loss, cfg.beta), (out.lipschitz_loss, cfg.gamma)]
    total = None
    for term, weight in terms:
        if term is None:
            continue
        scaled = term if weight == 1.0 else mul(term, weight)
        total = scaled if total is None else add(total, scaled)
    if total is None:
        return Tensor(0.0)
    return total


def _validate_actions(X, n_features: int | None = None) -> np.ndarray:
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} action dimensions, got {X.shape[1]}")
    return X


class ActionTokenizer(TransformerMixin, BaseEstimator):
    """Encode continuous action vectors into latent tokens and back.

    Parameters
    ----------
    kind : {'mlp', 'bin', 'vqvae', 'lfqvae', 'lipvqvae'}
    latent_dim : int
        Token dimension D.
    codebook_size : int
        Number of codebook entries K for the VQ kinds.
    encoder_hidden : tuple of int
        Hidden widths shared by encoder and (mirrored) decoder.
    alpha, beta, gamma : float
        Weights of the codebook, commitment and Lipschitz terms.
    lipschitz : bool or None
        Constrain the encoder; ``None`` means "only for lipvqvae".
    bins_per_dim : int
        Bin count for the ``bin`` kind.
    n_steps, batch_size, learning_rate, warmup_steps
        Standalone training budget for :meth:`fit`. ``n_steps=0`` only
        initialises.
    lr_schedule : {'cosine', 'constant'}
        Cosine decay to 5% of the peak rate at ``n_steps``, or constant.
    dtype : {'float64', 'float32'}
    random_state : int or None
    """

    def __init__(self, kind="lipvqvae", latent_dim=8, codebook_size=1024, encoder_hidden=(256, 256),
                 alpha=1.0, beta=0.25, gamma=1e-6, lipschitz=None, bins_per_dim=256,
                 n_steps=2000, batch_size=256, learning_rate=1e-3, warmup_steps=100, lr_schedule="cosine",
                 dtype="float64", random_state=None):
        self.kind = kind
        self.latent_dim = latent_dim
        self.codebook_size = codebook_size
        self.encoder_hidden = encoder_hidden
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.lipschitz = lipschitz
        self.bins_per_dim = bins_per_dim
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.lr_schedule = lr_schedule
        self.dtype = dtype
        self.random_state = random_state

    # -- configuration -------------------------------------------------------------

    def resolved_config(self) -> TokenizerConfig:
        lip = self.lipschitz if self.lipschitz is not None else self.kind == "lipvqvae"
        return TokenizerConfig(kind=self.kind, latent_dim=int(self.latent_dim),
                               codebook_size=int(self.codebook_size),
                               encoder_hidden=tuple(int(h) for h in self.encoder_hidden),
                               alpha=float(self.alpha), beta=float(self.beta), gamma=float(self.gamma),
                               lipschitz=bool(lip), bins_per_dim=int(self.bins_per_dim))

    @property
    def _np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    # -- construction ----------------------------------------------------------------

    def initialize(self, n_features: int, offset=None, scale=None, rng=None) -> "ActionTokenizer":
        """Create untrained modules for ``n_features``-dimensional actions."""
        cfg = self.resolved_config()
        self.config_ = cfg
        self.n_features_in_ = int(n_features)
        rng = rng if rng is not None else np.random.default_rng(self.random_state)
        dt = self._np_dtype
        self.offset_ = np.zeros(n_features) if offset is None else np.asarray(offset, dtype=np.float64)
        self.scale_ = np.ones(n_features) if scale is None else np.asarray(scale, dtype=np.float64)
        self.encoder_ = self.decoder_ = self.codebook_ = self.bin_embedding_ = None
        hidden = list(cfg.encoder_hidden)
        if cfg.kind == "bin":
            self.bin_spec_ = BinSpec(cfg.bins_per_dim, -1.0, 1.0)
            emb = rng.normal(0.0, 1.0 / np.sqrt(n_features), size=(n_features, cfg.bins_per_dim, cfg.latent_dim))
            self.bin_embedding_ = Tensor(emb, requires_grad=True, dtype=dt)
        else:
            self.encoder_ = MLPStack([n_features] + hidden + [cfg.latent_dim], rng,
                                     lipschitz_constrained=cfg.lipschitz, dtype=dt)
            self.decoder_ = MLPStack([cfg.latent_dim] + hidden[::-1] + [n_features], rng, dtype=dt)
            if cfg.kind in QUANTIZED_KINDS:
                self.codebook_ = Codebook(cfg.codebook_size, cfg.latent_dim, rng, dtype=dt)
        self.loss_curve_ = []
        self.n_steps_trained_ = 0
        return self

    def parameters(self) -> dict[str, Tensor]:
        check_is_fitted(self, "config_")
        params = {}
        if self.encoder_ is not None:
            params.update({f"encoder.{k}": v for k, v in self.encoder_.parameters().items()})
            params.update({f"decoder.{k}": v for k, v in self.decoder_.parameters().items()})
        if self.codebook_ is not None:
            params["codebook.entries"] = self.codebook_.entries
        if self.bin_embedding_ is not None:
            params["bin.embedding"] = self.bin_embedding_
        return params

    # -- normalisation ---------------------------------------------------------------

    @staticmethod
    def percentile_normalization(X: np.ndarray, lo: float = 1.0, hi: float = 99.0):
        """Affine map (offset, scale) sending the lo/hi percentiles to -1/+1."""
        p_lo = np.percentile(X, lo, axis=0)
        p_hi = np.percentile(X, hi, axis=0)
        offset = 0.5 * (p_lo + p_hi)
        half = 0.5 * (p_hi - p_lo)
        scale = np.where(half > 1e-12, half, 1.0)
        return offset, scale

    def normalize(self, X) -> np.ndarray:
        check_is_fitted(self, "config_")
        return (np.asarray(X, dtype=np.float64) - self.offset_) / self.scale_

    def denormalize(self, Xn) -> np.ndarray:
        check_is_fitted(self, "config_")
        return np.asarray(Xn, dtype=np.float64) * self.scale_ + self.offset_

    # -- forward -----------------------------------------------------------------------

    def tokenize(self, x: Tensor, update_usage: bool = True) -> TokenizerOutput:
        """Differentiable forward pass on a batch of *normalised* actions."""
        check_is_fitted(self, "config_")
        if x.ndim != 2 or x.shape[1] != self.n_features_in_:
            raise ValueError(f"expected normalised actions of shape [batch, {self.n_features_in_}], got {x.shape}")
        if not np.all(np.isfinite(x.data)):
            raise ValueError("actions contain NaN or Inf")
        cfg = self.config_
        kind = cfg.kind
        if kind == "bin":
            idx = bin_encode(x.data, self.bin_spec_)
            emb = None
            for d in range(self.n_features_in_):
                table = take(self.bin_embedding_, [d], axis=0).reshape(cfg.bins_per_dim, cfg.latent_dim)
                part = take(table, idx[:, d], axis=0)
                emb = part if emb is None else add(emb, part)
            recon = Tensor(bin_decode(idx, self.bin_spec_), dtype=x.dtype)
            return TokenizerOutput(emb, recon, indices=idx, reconstruction_loss=mse(recon, x))

        latent = self.encoder_(x)
        indices = None
        codebook_loss = commitment_loss = None
        if kind in QUANTIZED_KINDS:
            q = vq_lookup(self.codebook_, latent, update_usage=update_usage)
            token, indices = q.quantized, q.indices
            codebook_loss, commitment_loss = q.codebook_loss, q.commitment_loss
        elif kind == "lfqvae":
            q = lfq_quantize(latent)
            token, indices = q.quantized, q.indices
            commitment_loss = q.commitment_loss
        else:
            token = latent
        recon = self.decoder_(token)
        lip = lipschitz_loss(self.encoder_) if cfg.lipschitz else None
        return TokenizerOutput(token, recon, indices=indices, reconstruction_loss=mse(recon, x),
                               codebook_loss=codebook_loss, commitment_loss=commitment_loss,
                               lipschitz_loss=lip)

    def decode(self, tokens: Tensor) -> Tensor:
        """Decoder applied to token embeddings (normalised action space)."""
        check_is_fitted(self, "config_")
        if self.decoder_ is None:
            raise ValueError("the bin tokenizer has no learned decoder")
        return self.decoder_(tokens)

    # -- estimator API -------------------------------------------------------------------

    def fit(self, X, y=None):
        """Fit normalisation from ``X`` and train for ``n_steps`` minibatch steps."""
        X = _validate_actions(X)
        rng = np.random.default_rng(self.random_state)
        offset, scale = self.percentile_normalization(X)
        self.initialize(X.shape[1], offset, scale, rng=rng)
        self.train_steps(self.normalize(X), self.n_steps, rng)
        return self

    def train_steps(self, Xn: np.ndarray, n_steps: int, rng: np.random.Generator,
                    callback=None) -> list[float]:
        """Run ``n_steps`` standalone optimisation steps on normalised data."""
        params = self.parameters()
        if not hasattr(self, "optimizer_"):
            if self.lr_schedule not in ("cosine", "constant"):
                raise ValueError(f"lr_schedule must be 'cosine' or 'constant', got {self.lr_schedule!r}")
            decay = self.n_steps if self.lr_schedule == "cosine" and self.n_steps else None
            self.optimizer_ = Adam(params, lr=self.learning_rate, warmup_steps=self.warmup_steps,
                                   decay_steps=decay)
        trainable = self.config_.kind != "bin"
        Xn = np.asarray(Xn, dtype=self._np_dtype)
        for step in range(n_steps):
            batch = Xn[rng.integers(0, len(Xn), size=min(self.batch_size, len(Xn)))]
            out = self.tokenize(Tensor(batch, dtype=self._np_dtype))
            loss = total_loss(out, self.config_)
            if trainable:
                self.optimizer_.zero_grad()
                loss.backward()
                self.optimizer_.step()
            self.loss_curve_.append(float(loss.data))
            self.n_steps_trained_ += 1
            if callback is not None:
                callback(self, step)
        return self.loss_curve_

    def transform(self, X) -> np.ndarray:
        """Latent token embeddings h^a, shape [n, latent_dim]."""
        check_is_fitted(self, "config_")
        X = _validate_actions(X, self.n_features_in_)
        with no_grad():
            out = self.tokenize(Tensor(self.normalize(X), dtype=self._np_dtype), update_usage=False)
        return np.asarray(out.embedding.data, dtype=np.float64)

    def encode(self, X) -> np.ndarray:
        """Discrete token indices (per row; per dimension for ``bin``)."""
        check_is_fitted(self, "config_")
        if self.config_.kind == "mlp":
            raise ValueError("the mlp tokenizer has a continuous latent and no indices")
        X = _validate_actions(X, self.n_features_in_)
        with no_grad():
            out = self.tokenize(Tensor(self.normalize(X), dtype=self._np_dtype), update_usage=False)
        return out.indices

    def reconstruct(self, X) -> np.ndarray:
        """Round trip through the tokenizer, in original action units."""
        check_is_fitted(self, "config_")
        X = _validate_actions(X, self.n_features_in_)
        with no_grad():
            out = self.tokenize(Tensor(self.normalize(X), dtype=self._np_dtype), update_usage=False)
        return self.denormalize(out.reconstruction.data)

    def inverse_transform(self, H) -> np.ndarray:
        """Decode latent token embeddings back to actions in original units."""
        H = check_array(H, dtype=np.float64)
        with no_grad():
            xn = self.decode(Tensor(H, dtype=self._np_dtype))
        return self.denormalize(xn.data)

    def score(self, X, y=None) -> float:
        return -reconstruction_error(self, X)

    # -- diagnostics -----------------------------------------------------------------------

    @property
    def lipschitz_bound_(self) -> float | None:
        check_is_fitted(self, "config_")
        if self.encoder_ is None or not self.encoder_.lipschitz_constrained:
            return None
        return network_lipschitz_bound(self.encoder_)

    def perplexity(self) -> float | None:
        check_is_fitted(self, "config_")
        if self.codebook_ is None or self.codebook_.usage_counts.sum() == 0:
            return None
        return codebook_perplexity(self.codebook_)

    def encoder_function(self):
        """Numpy callable mapping normalised actions to pre-quantisation latents."""
        check_is_fitted(self, "config_")
        if self.encoder_ is None:
            raise ValueError("the bin tokenizer has no encoder network")

        def f(Xn):
            with no_grad():
                return np.asarray(self.encoder_(Tensor(np.atleast_2d(Xn), dtype=self._np_dtype)).data,
                                  dtype=np.float64)

        return f


def reconstruction_error(tokenizer: ActionTokenizer, X) -> float:
    """Mean squared reconstruction error per action dimension, original units."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("reconstruction_error needs a non-empty [n, A] dataset")
    return float(np.mean((tokenizer.reconstruct(X) - X) ** 2))
