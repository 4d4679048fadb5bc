"""Synthetic minimum-jerk action trajectories for standalone tokenizer training."""

from __future__ import annotations

import numpy as np


def minimum_jerk(start, goal, n_steps: int) -> np.ndarray:
    """Positions of the minimum-jerk path from ``start`` to ``goal``.

    Returns an array of shape (n_steps, n_dims) sampled uniformly in time,
    including both endpoints.
    """
    x0 = np.asarray(start, dtype=np.float64)
    g = np.asarray(goal, dtype=np.float64)
    if x0.shape != g.shape:
        raise ValueError(f"start {x0.shape} and goal {g.shape} must have the same shape")
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    tau = np.linspace(0.0, 1.0, n_steps)[:, None]
    s = 10 * tau ** 3 - 15 * tau ** 4 + 6 * tau ** 5
    return x0 + (g - x0) * s


def minimum_jerk_episode(rng: np.random.Generator, n_steps: int = 50, dim: int = 7,
                         n_segments: int = 1) -> np.ndarray:
    """Action sequence chaining minimum-jerk segments between random waypoints in [-1, 1]^dim.

    Consecutive segments share their endpoint, so the sequence is continuous
    with zero velocity at every waypoint.
    """
    if n_steps < n_segments + 1:
        raise ValueError("need at least one step per segment")
    bounds = np.linspace(0, n_steps - 1, n_segments + 1).round().astype(int)
    waypoints = rng.uniform(-1.0, 1.0, size=(n_segments + 1, dim))
    parts = [waypoints[:1]]
    for k in range(n_segments):
        seg = minimum_jerk(waypoints[k], waypoints[k + 1], bounds[k + 1] - bounds[k] + 1)
        parts.append(seg[1:])
    return np.concatenate(parts)


def minimum_jerk_dataset(n_episodes: int, rng: np.random.Generator, n_steps: int = 50,
                         dim: int = 7, n_segments: int = 3) -> list[np.ndarray]:
    return [minimum_jerk_episode(rng, n_steps, dim, n_segments) for _ in range(n_episodes)]
