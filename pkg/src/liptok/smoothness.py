"""Latent-trajectory smoothness: least-energy score, Lipschitz ratios, 2-D projection."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

PROJECTION_STEPS = 10


@dataclass
class LatentTrajectory:
    points: np.ndarray
    tokenizer: str = ""
    episode: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        if not np.all(np.isfinite(self.points)):
            raise ValueError("latent trajectory contains non-finite values")


@dataclass
class SmoothnessReport:
    tokenizer: str
    score: float
    per_trajectory: list[float]
    metadata: dict = field(default_factory=dict)

    @property
    def n_trajectories(self) -> int:
        return len(self.per_trajectory)


def least_energy_score(traj) -> float:
    """Discrete bending energy of a point sequence, normalised to be scale free.

    E = sum_t ||z[t+1] - 2 z[t] + z[t-1]||² / s̄², with s̄ the mean distance
    between consecutive points.  Zero for straight equally spaced sequences and
    for sequences that never move.
    """
    z = traj.points if isinstance(traj, LatentTrajectory) else np.asarray(traj, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if len(z) < 3:
        raise ValueError(f"least_energy_score needs at least 3 points, got {len(z)}")
    chord = np.linalg.norm(np.diff(z, axis=0), axis=1).mean()
    if chord == 0.0:
        return 0.0
    second = z[2:] - 2.0 * z[1:-1] + z[:-2]
    return float((second * second).sum() / chord ** 2)


def empirical_lipschitz_ratio(encoder, X, n_pairs: int, rng: np.random.Generator | None = None) -> float:
    """Largest ∞-norm ratio ||f(a) - f(b)|| / ||a - b|| over random input pairs.

    ``encoder`` maps an [n, d] array to [n, k].  Coincident pairs are skipped.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    i = rng.integers(0, len(X), size=n_pairs)
    j = rng.integers(0, len(X), size=n_pairs)
    a, b = X[i], X[j]
    din = np.abs(a - b).max(axis=1)
    keep = din > 0
    if not keep.any():
        return 0.0
    fa, fb = np.asarray(encoder(a[keep])), np.asarray(encoder(b[keep]))
    dout = np.abs(fa - fb).reshape(keep.sum(), -1).max(axis=1)
    return float((dout / din[keep]).max())


def latent_trajectories(tokenizer, episodes, name: str = "") -> list[LatentTrajectory]:
    return [LatentTrajectory(tokenizer.transform(ep), name, k) for k, ep in enumerate(episodes)]


def compare_tokenizers(tokenizers: dict, episodes, n_trajectories: int = 500) -> list[SmoothnessReport]:
    """Score every tokenizer on the same episodes, preserving input order."""
    episodes = list(episodes)
    if len(episodes) < n_trajectories:
        raise ValueError(f"need {n_trajectories} episodes, dataset has {len(episodes)}")
    episodes = episodes[:n_trajectories]
    reports = []
    for name, tok in tokenizers.items():
        meta = {"aggregate": "mean over trajectories", "normalization": "mean chord length squared"}
        if getattr(tok, "n_steps_trained_", 0) == 0 and getattr(tok, "kind", None) != "bin":
            meta["warning"] = "tokenizer has not been trained"
        scores = [least_energy_score(t) for t in latent_trajectories(tok, episodes, name)]
        reports.append(SmoothnessReport(name, float(np.mean(scores)), scores, meta))
    return reports


@dataclass
class Projection:
    polylines: list[np.ndarray]
    ids: list[tuple[str, int]]
    explained_variance_ratio: float
    method: str = "pca"


def project_2d(trajectories: list[LatentTrajectory]) -> Projection:
    """Project pooled latent points onto their top-2 principal components.

    Sign of each component is fixed so its largest-magnitude loading is
    positive, making the output deterministic.
    """
    if not trajectories:
        raise ValueError("project_2d needs at least one trajectory")
    pooled = np.concatenate([t.points for t in trajectories])
    mu = pooled.mean(axis=0)
    centered = pooled - mu
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for k in range(len(comps)):
        if comps[k][np.argmax(np.abs(comps[k]))] < 0:
            comps[k] = -comps[k]
    var = s ** 2
    ratio = float(var[:2].sum() / var.sum()) if var.sum() > 0 else 1.0
    lines = []
    for t in trajectories:
        p = (t.points - mu) @ comps.T
        if p.shape[1] < 2:
            p = np.hstack([p, np.zeros((len(p), 2 - p.shape[1]))])
        lines.append(p)
    return Projection(lines, [(t.tokenizer, t.episode) for t in trajectories], ratio)


def latents_csv(trajectories: list[LatentTrajectory]) -> str:
    """CSV text with header ``tokenizer,episode,t,dim0..dimN``."""
    buf = io.StringIO()
    dim = max(t.points.shape[1] for t in trajectories) if trajectories else 0
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["tokenizer", "episode", "t"] + [f"dim{k}" for k in range(dim)])
    for tr in trajectories:
        for t, row in enumerate(tr.points):
            writer.writerow([tr.tokenizer, tr.episode, t] + [repr(float(v)) for v in row])
    return buf.getvalue()
