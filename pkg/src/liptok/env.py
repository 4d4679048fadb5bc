"""Desk-scale 2-D manipulation environment with scripted experts.

Three task families share one set of physics:

* ``reach``: bring the agent to the goal without disturbing the object.
* ``pick-place``: grasp the object, carry it to the goal, release it.
* ``push``: move the object to the goal by contact, gripper open.

Actions are ``(dx, dy, grip)``.  The translation is clipped to norm 0.1 per
step; ``grip > 0`` closes the gripper, anything else opens it.  Closing within
0.05 of the object grasps it.  An open gripper in contact with the object
(within 0.05 before the move) pushes it by the agent's displacement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TASKS = ("reach", "pick-place", "push")
OBS_DIM = 9
ACT_DIM = 3
HORIZON = 50
MAX_STEP = 0.1
THRESHOLD = 0.05
WORKSPACE = 1.0


@dataclass
class ToyEnvState:
    agent: np.ndarray
    obj: np.ndarray
    goal: np.ndarray
    task: str
    closed: bool = False
    holding: bool = False
    step_count: int = 0
    obj_start: np.ndarray | None = None
    horizon: int = HORIZON

    def __post_init__(self):
        self.agent = np.asarray(self.agent, dtype=np.float64).copy()
        self.obj = np.asarray(self.obj, dtype=np.float64).copy()
        self.goal = np.asarray(self.goal, dtype=np.float64).copy()
        if self.obj_start is None:
            self.obj_start = self.obj.copy()
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        for name in ("agent", "obj", "goal"):
            if np.any(np.abs(getattr(self, name)) > WORKSPACE):
                raise ValueError(f"{name} position outside the workspace square")

    def observation(self) -> np.ndarray:
        return np.array([*self.agent, *self.obj, *self.goal, 1.0 if self.closed else -1.0,
                         1.0 if self.holding else 0.0, self.step_count / self.horizon])

    def copy(self) -> "ToyEnvState":
        return ToyEnvState(self.agent, self.obj, self.goal, self.task, self.closed, self.holding,
                           self.step_count, self.obj_start.copy(), self.horizon)


def _clip_norm(v: np.ndarray, limit: float = MAX_STEP) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v * (limit / n) if n > limit else v


def is_success(state: ToyEnvState) -> bool:
    if state.task == "reach":
        return (np.linalg.norm(state.agent - state.goal) <= THRESHOLD
                and np.linalg.norm(state.obj - state.obj_start) < 1e-9)
    placed = np.linalg.norm(state.obj - state.goal) <= THRESHOLD
    if state.task == "push":
        return bool(placed)
    return bool(placed and not state.holding and not state.closed)


def step(state: ToyEnvState, action) -> ToyEnvState:
    """Advance one step; returns a new state."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (ACT_DIM,) or not np.all(np.isfinite(a)):
        raise ValueError(f"invalid action {action!r}")
    s = state.copy()
    contact = np.linalg.norm(s.agent - s.obj) <= THRESHOLD
    close = a[2] > 0
    if close and not s.closed and contact:
        s.holding = True
    if not close:
        s.holding = False
    s.closed = bool(close)
    new_agent = np.clip(s.agent + _clip_norm(a[:2]), -WORKSPACE, WORKSPACE)
    moved = new_agent - s.agent
    if s.holding or (contact and not s.closed):
        s.obj = np.clip(s.obj + moved, -WORKSPACE, WORKSPACE)
    s.agent = new_agent
    s.step_count += 1
    return s


def scripted_expert(state: ToyEnvState) -> np.ndarray:
    """Proportional controller toward the current subgoal.

    Translation is the clipped offset to the subgoal (so the final step lands
    on it exactly); the gripper command is the desired level, +1 closed and
    -1 open.
    """
    to_obj = state.obj - state.agent
    if state.task == "reach":
        return np.array([*_clip_norm(state.goal - state.agent), -1.0])
    if state.task == "push":
        if np.linalg.norm(to_obj) > THRESHOLD:
            return np.array([*_clip_norm(to_obj), -1.0])
        target = state.goal - to_obj
        return np.array([*_clip_norm(target - state.agent), -1.0])
    # pick-place
    if not state.holding:
        if np.linalg.norm(state.obj - state.goal) <= THRESHOLD and not state.closed:
            return np.array([0.0, 0.0, -1.0])
        if np.linalg.norm(to_obj) > THRESHOLD:
            return np.array([*_clip_norm(to_obj), -1.0])
        return np.array([0.0, 0.0, 1.0])
    if np.linalg.norm(state.obj - state.goal) > THRESHOLD:
        target = state.goal - to_obj
        return np.array([*_clip_norm(target - state.agent), 1.0])
    return np.array([0.0, 0.0, -1.0])


def _segment_distance(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * ab)))


def sample_state(task: str, rng: np.random.Generator, horizon: int = HORIZON) -> ToyEnvState:
    """Random initial state for which the scripted expert finishes within the horizon."""
    while True:
        agent, obj, goal = rng.uniform(-0.8, 0.8, size=(3, 2))
        if np.linalg.norm(agent - goal) < 0.2 or np.linalg.norm(obj - goal) < 0.2:
            continue
        if np.linalg.norm(agent - obj) < 0.2:
            continue
        if task == "reach" and _segment_distance(obj, agent, goal) < 0.15:
            continue
        if task == "reach":
            need = np.ceil(np.linalg.norm(goal - agent) / MAX_STEP)
        else:
            need = (np.ceil(np.linalg.norm(obj - agent) / MAX_STEP)
                    + np.ceil(np.linalg.norm(goal - obj) / MAX_STEP) + 2)
        if need <= horizon - 2:
            return ToyEnvState(agent, obj, goal, task, horizon=horizon)


@dataclass
class Episode:
    observations: np.ndarray
    actions: np.ndarray
    success: bool
    task: str
    goal: np.ndarray | None = None

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=np.float64)
        if obs.ndim != 2:  # flat rows; action-only trajectories carry [T, 0] observations
            obs = obs.reshape(-1, OBS_DIM) if obs.size else np.zeros((0, OBS_DIM))
        self.observations = obs
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.actions.ndim == 1:
            self.actions = self.actions.reshape(len(self.observations), -1)
        if len(self.observations) != len(self.actions):
            raise ValueError("observations and actions must have equal length")

    def __len__(self) -> int:
        return len(self.actions)


def run_episode(state: ToyEnvState, policy, horizon: int | None = None) -> Episode:
    """Roll ``policy(state) -> action`` until success or the horizon."""
    horizon = horizon or state.horizon
    obs, acts = [], []
    success = False
    start_goal = state.goal.copy()
    for _ in range(horizon):
        a = np.asarray(policy(state), dtype=np.float64)
        obs.append(state.observation())
        acts.append(a)
        state = step(state, a)
        if is_success(state):
            success = True
            break
    return Episode(np.array(obs), np.array(acts), success, state.task, start_goal)


def expert_episode(task: str, rng: np.random.Generator, horizon: int = HORIZON) -> Episode:
    return run_episode(sample_state(task, rng, horizon), scripted_expert, horizon)


def synth_dataset(n_per_task: int, rng: np.random.Generator, tasks=TASKS,
                  horizon: int = HORIZON) -> list[Episode]:
    """Expert episodes, ``n_per_task`` for each task family, tasks interleaved."""
    return [expert_episode(task, rng, horizon) for _ in range(n_per_task) for task in tasks]


# -- line-delimited dataset format -------------------------------------------------


def episode_to_record(ep: Episode) -> dict:
    return {"task_id": ep.task, "obs": ep.observations.tolist(), "act": ep.actions.tolist(),
            "success": bool(ep.success)}


def write_dataset(episodes, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_to_record(ep), separators=(",", ":")) + "\n")


def read_dataset(path) -> list[Episode]:
    """Parse one JSON episode record per line; ``obs``/``act`` may be nested or flat."""
    episodes = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            obs = np.asarray(rec["obs"], dtype=np.float64)
            act = np.asarray(rec["act"], dtype=np.float64)
            if obs.ndim == 1 and len(obs) % OBS_DIM == 0:
                obs = obs.reshape(-1, OBS_DIM)
            if act.ndim == 1 and len(obs) and len(act) % len(obs) == 0:
                act = act.reshape(len(obs), -1)
            episodes.append(Episode(obs, act, bool(rec["success"]), str(rec["task_id"])))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed episode record ({exc})") from exc
    return episodes
