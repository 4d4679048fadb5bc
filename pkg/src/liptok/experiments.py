"""Multi-run experiments: the tokenizer suite and ablation sweeps.

Every run is a pure function of its arguments (data, kind, seed, budget), so
runs can be farmed out to worker processes without changing any result.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .autodiff import TrainingError
from .env import TASKS, Episode, episode_to_record, sample_state
from .policy import CausalPolicy, success_rate
from .smoothness import compare_tokenizers
from .tokenizers import ActionTokenizer, reconstruction_error

logger = logging.getLogger(__name__)


def dataset_hash(episodes) -> str:
    """SHA-256 over the canonical line-delimited encoding of the episodes."""
    h = hashlib.sha256()
    for ep in episodes:
        if isinstance(ep, Episode):
            h.update(json.dumps(episode_to_record(ep), separators=(",", ":")).encode())
        else:
            h.update(np.ascontiguousarray(ep, dtype="<f8").tobytes())
        h.update(b"\n")
    return h.hexdigest()


def split_seed(root: int, *path: int | str) -> np.random.SeedSequence:
    """Deterministic child seed for a named component of a run."""
    words = [int(root)] + [int(p) if isinstance(p, (int, np.integer)) else
                           int.from_bytes(hashlib.sha256(p.encode()).digest()[:4], "little") for p in path]
    return np.random.SeedSequence(words)


@dataclass
class RunResult:
    kind: str
    seed: int
    success: dict[str, float] = field(default_factory=dict)
    smoothness: float = math.nan
    final_bc_loss: float = math.nan
    lipschitz_bound: float | None = None
    diverged: bool = False
    error: str = ""

    @property
    def mean_success(self) -> float:
        return float(np.mean(list(self.success.values()))) if self.success else math.nan


@dataclass
class PolicyBudget:
    """Training and evaluation settings shared by every run of a comparison."""

    steps: int = 12000
    batch_size: int = 16
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    lr_schedule: str = "cosine"
    eval_episodes: int = 100
    decode_via: str = "head"
    train_tokenizer: bool = True
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    smoothness_trajectories: int = 500
    tokenizer_params: dict = field(default_factory=dict)


def _smoothness_episodes(episodes, n: int) -> list[np.ndarray]:
    acts = [ep.actions for ep in episodes if len(ep) >= 3]
    return acts[:n]


def train_and_evaluate(kind: str, seed: int, episodes, budget: PolicyBudget, eval_root: int = 0,
                       tasks=None) -> tuple[RunResult, CausalPolicy | None]:
    """Train one policy with tokenizer ``kind`` and measure success per task.

    Evaluation states are drawn from a stream keyed by ``(eval_root, seed)``
    only, so every kind sees the same start states for a given seed.  Prompts
    are successful training episodes of the evaluated task.
    """
    episodes = list(episodes)
    tasks = tasks or sorted({ep.task for ep in episodes}, key=lambda t: TASKS.index(t) if t in TASKS else 99)
    result = RunResult(kind, seed)
    policy = CausalPolicy(tokenizer_kind=kind, tokenizer_params=dict(budget.tokenizer_params) or None,
                          dim=budget.dim, n_layers=budget.n_layers, n_heads=budget.n_heads,
                          n_steps=budget.steps, batch_size=budget.batch_size,
                          learning_rate=budget.learning_rate, warmup_steps=budget.warmup_steps,
                          lr_schedule=budget.lr_schedule, train_tokenizer=budget.train_tokenizer, decode_via=budget.decode_via,
                          random_state=seed)
    try:
        policy.fit(episodes)
    except TrainingError as exc:
        result.diverged = True
        result.error = str(exc)
        logger.warning("run kind=%s seed=%d diverged: %s", kind, seed, exc)
        return result, None
    result.final_bc_loss = float(np.mean(policy.bc_curve_[-100:])) if policy.bc_curve_ else math.nan
    result.lipschitz_bound = policy.tokenizer_.lipschitz_bound_
    eval_rng = np.random.default_rng(split_seed(eval_root, seed, "eval"))
    for task in tasks:
        pool = [ep for ep in episodes if ep.task == task and ep.success]
        states = [sample_state(task, eval_rng) for _ in range(budget.eval_episodes)]
        prompts = [pool[i] for i in eval_rng.integers(len(pool), size=budget.eval_episodes)]
        result.success[task] = success_rate(policy, states, prompts)
    traj = _smoothness_episodes(episodes, budget.smoothness_trajectories)
    report = compare_tokenizers({kind: policy.tokenizer_}, traj, n_trajectories=len(traj))[0]
    result.smoothness = report.score
    logger.info("run kind=%s seed=%d success=%s smoothness=%.4g", kind, seed, result.success, result.smoothness)
    return result, policy


def _run_cell(args):
    kind, seed, episodes, budget, eval_root, tasks = args
    return train_and_evaluate(kind, seed, episodes, budget, eval_root, tasks)[0]


@dataclass
class SuiteReport:
    kinds: list[str]
    tasks: list[str]
    seeds: list[int]
    runs: list[RunResult]
    dataset_hash: str = ""

    def _runs(self, kind: str) -> list[RunResult]:
        return [r for r in self.runs if r.kind == kind]

    def n_diverged(self, kind: str) -> int:
        return sum(r.diverged for r in self._runs(kind))

    def table(self) -> list[dict]:
        """One row per (kind, task): mean over non-diverged seeds plus per-seed values."""
        rows = []
        for kind in self.kinds:
            runs = self._runs(kind)
            for task in self.tasks:
                per_seed = {r.seed: (math.nan if r.diverged else r.success.get(task, math.nan)) for r in runs}
                ok = [v for v in per_seed.values() if not math.isnan(v)]
                rows.append({"kind": kind, "task": task, "mean": float(np.mean(ok)) if ok else math.nan,
                             "per_seed": per_seed, "diverged": self.n_diverged(kind)})
        return rows

    def mean_success(self, kind: str, task: str | None = None) -> float:
        vals = [r.success[task] if task else r.mean_success for r in self._runs(kind) if not r.diverged]
        return float(np.mean(vals)) if vals else math.nan

    def mean_smoothness(self, kind: str) -> float:
        vals = [r.smoothness for r in self._runs(kind) if not r.diverged]
        return float(np.mean(vals)) if vals else math.nan

    def spearman(self) -> float:
        """Rank correlation of per-kind mean smoothness score against mean success."""
        pairs = [(self.mean_smoothness(k), self.mean_success(k)) for k in self.kinds]
        pairs = [p for p in pairs if not any(math.isnan(v) for v in p)]
        if len(pairs) < 2:
            return math.nan
        x, y = zip(*pairs)
        if len(set(x)) < 2 or len(set(y)) < 2:
            return math.nan
        return float(spearmanr(x, y).statistic)

    def success_csv(self) -> str:
        header = ["kind", "task", "mean_success"] + [f"seed{s}" for s in self.seeds] + ["diverged"]
        lines = [",".join(header)]
        for row in self.table():
            vals = [row["kind"], row["task"], _num(row["mean"])]
            vals += [_num(row["per_seed"].get(s, math.nan)) for s in self.seeds]
            vals.append(str(row["diverged"]))
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def smoothness_csv(self) -> str:
        lines = ["kind,mean_smoothness,mean_success," + ",".join(f"smoothness_seed{s}" for s in self.seeds)]
        for kind in self.kinds:
            by_seed = {r.seed: r.smoothness for r in self._runs(kind) if not r.diverged}
            lines.append(",".join([kind, _num(self.mean_smoothness(kind)), _num(self.mean_success(kind))]
                                  + [_num(by_seed.get(s, math.nan)) for s in self.seeds]))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"kinds": self.kinds, "tasks": self.tasks, "seeds": self.seeds, "dataset_hash": self.dataset_hash,
                "runs": [asdict(r) for r in self.runs], "spearman": self.spearman()}


def _num(v: float) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def evaluate_tokenizer_suite(kinds, episodes, seeds, budget: PolicyBudget | None = None,
                             eval_root: int = 0, workers: int = 1, tasks=None) -> SuiteReport:
    """Train and evaluate one policy per (kind, seed) under an identical budget."""
    kinds, seeds = list(kinds), list(seeds)
    if len(seeds) < 1 or not kinds:
        raise ValueError("need at least one kind and one seed")
    budget = budget or PolicyBudget()
    episodes = list(episodes)
    tasks = tasks or [t for t in TASKS if any(ep.task == t for ep in episodes)]
    jobs = [(k, s, episodes, budget, eval_root, tasks) for k in kinds for s in seeds]
    runs = _map(_run_cell, jobs, workers)
    return SuiteReport(kinds, list(tasks), seeds, runs, dataset_hash(episodes))


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# -- sweeps ------------------------------------------------------------------------------------


@dataclass
class SweepCell:
    codebook_size: int
    lipschitz: bool
    seed: int
    dataset_hash: str
    status: str = "ok"
    error: str = ""
    metrics: dict = field(default_factory=dict)
    checkpoint: bytes | None = field(default=None, repr=False)

    @property
    def label(self) -> str:
        return f"K{self.codebook_size}_lip{'on' if self.lipschitz else 'off'}_seed{self.seed}"


@dataclass
class SweepReport:
    kind: str
    mode: str
    codebook_sizes: list[int]
    lipschitz: list[bool]
    seeds: list[int]
    cells: list[SweepCell]

    @property
    def complete(self) -> bool:
        want = {(k, l, s) for k in self.codebook_sizes for l in self.lipschitz for s in self.seeds}
        have = {(c.codebook_size, c.lipschitz, c.seed) for c in self.cells if c.status == "ok"}
        return want == have

    def metric_names(self) -> list[str]:
        names = []
        for c in self.cells:
            for k in c.metrics:
                if k not in names:
                    names.append(k)
        return names

    def table_csv(self) -> str:
        names = self.metric_names()
        lines = [",".join(["codebook_size", "lipschitz", "seed", "status", "dataset_hash"] + names)]
        for c in self.cells:
            vals = [str(c.codebook_size), "on" if c.lipschitz else "off", str(c.seed), c.status, c.dataset_hash]
            vals += [_num(c.metrics.get(n, math.nan)) for n in names]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def summary(self, metric: str) -> dict[tuple[int, bool], float]:
        """Mean of ``metric`` per (codebook_size, lipschitz) over successful seeds."""
        out = {}
        for k in self.codebook_sizes:
            for l in self.lipschitz:
                vals = [c.metrics[metric] for c in self.cells
                        if c.codebook_size == k and c.lipschitz == l and c.status == "ok" and metric in c.metrics]
                out[(k, l)] = float(np.mean(vals)) if vals else math.nan
        return out


def _sweep_cell(args) -> SweepCell:
    kind, mode, K, lip, seed, data, data_hash, budget, train_params = args
    cell = SweepCell(K, lip, seed, data_hash)
    from .checkpoint import dumps  # local import keeps worker start-up light

    try:
        if mode == "icil":
            tok_params = dict(budget.tokenizer_params, codebook_size=K, lipschitz=lip)
            b = PolicyBudget(**{**asdict(budget), "tokenizer_params": tok_params})
            result, policy = train_and_evaluate(kind, seed, data, b, eval_root=seed)
            if result.diverged:
                cell.status, cell.error = "diverged", result.error
                return cell
            cell.metrics = {"mean_success": result.mean_success, "smoothness": result.smoothness,
                            **{f"success_{t}": v for t, v in result.success.items()},
                            "final_bc_loss": result.final_bc_loss}
            if result.lipschitz_bound is not None:
                cell.metrics["lipschitz_bound"] = result.lipschitz_bound
            cell.checkpoint = dumps(policy.tokenizer_)
        else:
            X = np.concatenate(data)
            params = dict(train_params, kind=kind, codebook_size=K, lipschitz=lip, random_state=seed)
            tok = ActionTokenizer(**params)
            tok.fit(X)
            report = compare_tokenizers({kind: tok}, data, n_trajectories=min(len(data), 500))[0]
            cell.metrics = {"reconstruction_mse": reconstruction_error(tok, X), "smoothness": report.score,
                            "final_loss": float(np.mean(tok.loss_curve_[-100:])) if tok.loss_curve_ else math.nan}
            if tok.perplexity() is not None:
                cell.metrics["perplexity"] = tok.perplexity()
            if tok.lipschitz_bound_ is not None:
                cell.metrics["lipschitz_bound"] = tok.lipschitz_bound_
            cell.checkpoint = dumps(tok)
    except (TrainingError, ValueError, FloatingPointError) as exc:
        cell.status, cell.error = "failed", f"{type(exc).__name__}: {exc}"
        logger.warning("sweep cell %s failed: %s", cell.label, cell.error)
    return cell


def run_sweep(data, kind: str = "vqvae", mode: str = "icil", codebook_sizes=(256, 512, 1024, 2048),
              lipschitz=(False, True), seeds=(0, 1, 2), budget: PolicyBudget | None = None,
              train_params: dict | None = None, workers: int = 1) -> SweepReport:
    """Cross product of codebook sizes × Lipschitz flags × seeds on one dataset.

    ``mode='icil'`` trains in-context policies on expert episodes under
    ``budget``; ``'tokenizer'`` trains standalone tokenizers on action
    trajectories, ``train_params`` being extra ActionTokenizer arguments.  A failing cell is recorded and the sweep goes on.
    """
    if not codebook_sizes or not lipschitz or not seeds:
        raise ValueError("every sweep axis needs at least one value")
    if mode not in ("icil", "tokenizer"):
        raise ValueError(f"sweep mode must be 'icil' or 'tokenizer', got {mode!r}")
    data = list(data)
    h = dataset_hash(data)
    budget = budget or PolicyBudget()
    jobs = [(kind, mode, int(K), bool(l), int(s), data, h, budget, dict(train_params or {}))
            for K in codebook_sizes for l in lipschitz for s in seeds]
    cells = _map(_sweep_cell, jobs, workers)
    return SweepReport(kind, mode, [int(k) for k in codebook_sizes], [bool(l) for l in lipschitz],
                       [int(s) for s in seeds], cells)
