"""Command line entry point: ``liptok <command> [--config FILE] [--seed N] [--out DIR] ...``.

Commands
--------
synth            expert episodes (or minimum-jerk action trajectories) as JSONL
train-tokenizer  standalone tokenizer training; checkpoint, loss curve, metrics
smoothness       least-energy report, latent CSV and projection SVG for checkpoints
icil             tokenizer suite: success table, smoothness, correlation scatter
sweep            codebook-size × Lipschitz ablation

Every command writes ``config.resolved`` into the output directory before any
work starts.  Exit status is 0 only when all requested work finished without
divergence.  ``LIPTOK_LOG`` selects the log level (error, info, debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import plots
from .autodiff import TrainingError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, tokenizer_params, write_atomic
from .env import Episode, read_dataset, synth_dataset, write_dataset
from .experiments import (PolicyBudget, dataset_hash, evaluate_tokenizer_suite, run_sweep,
                          split_seed)
from .smoothness import PROJECTION_STEPS, compare_tokenizers, latent_trajectories, latents_csv, project_2d
from .tokenizers import ActionTokenizer, reconstruction_error
from .trajectories import minimum_jerk_dataset

logger = logging.getLogger("liptok")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class CommandError(RuntimeError):
    """Bad input detected while running a command (reported, exit 2)."""


def _setup_logging(out: Path) -> None:
    name = os.environ.get("LIPTOK_LOG", "info").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"LIPTOK_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    root = logging.getLogger("liptok")
    root.setLevel(LOG_LEVELS[name])
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(console)
    # timestamps go to the log file only, keeping every other artifact reproducible
    fh = logging.FileHandler(out / "run.log", encoding="utf-8")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(fh)
    root.propagate = False


def _rng(cfg: RunConfig, component: str) -> np.random.Generator:
    return np.random.default_rng(split_seed(cfg["seed"], component))


def _int_seed(cfg: RunConfig, component: str) -> int:
    return int(split_seed(cfg["seed"], component).generate_state(1)[0])


def _write_text(path: Path, text: str) -> None:
    write_atomic(path, text.encode("utf-8"))


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _finite_or_none(v):
    return None if v is None or (isinstance(v, float) and not math.isfinite(v)) else v


def _load_episodes(cfg: RunConfig) -> list[Episode]:
    path = cfg["data.path"]
    if not path:
        raise CommandError("data.path is required for this command")
    if not Path(path).exists():
        raise CommandError(f"dataset not found: {path}")
    episodes = read_dataset(path)
    if not episodes:
        raise CommandError(f"dataset {path} is empty")
    return episodes


def _action_trajectories(episodes, min_len: int = 3) -> list[np.ndarray]:
    return [ep.actions for ep in episodes if len(ep) >= min_len]


# -- commands ---------------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    rng = _rng(cfg, "data")
    target = Path(cfg["data.path"]) if cfg["data.path"] else out / "dataset.jsonl"
    mode = cfg["data.mode"]
    if mode == "expert":
        episodes = synth_dataset(cfg["data.episodes_per_task"], rng, tasks=tuple(cfg["data.tasks"]),
                                 horizon=cfg["data.horizon"])
    elif mode == "minjerk":
        trajs = minimum_jerk_dataset(cfg["data.trajectories"], rng, n_steps=cfg["data.trajectory_length"],
                                     dim=cfg["data.action_dim"], n_segments=cfg["data.segments"])
        episodes = [Episode(np.zeros((len(a), 0)), a, True, "minjerk") for a in trajs]
    else:
        raise ConfigError(f"data.mode must be 'expert' or 'minjerk', got {mode!r}")
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    write_dataset(episodes, tmp)
    os.replace(tmp, target)
    logger.info("wrote %d episodes to %s (sha256 %s)", len(episodes), target, dataset_hash(episodes)[:12])
    return EXIT_OK


def cmd_train_tokenizer(cfg: RunConfig, out: Path) -> int:
    episodes = _load_episodes(cfg)
    X = np.concatenate([ep.actions for ep in episodes])
    tok = ActionTokenizer(random_state=_int_seed(cfg, "tokenizer"), **tokenizer_params(cfg))
    status = "ok"
    try:
        tok.fit(X)
    except TrainingError as exc:
        status = f"diverged: {exc}"
        logger.error("tokenizer training diverged: %s", exc)
    suffix = "" if status == "ok" else ".partial"
    curve = "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(tok.loss_curve_))
    _write_text(out / f"loss_curve{suffix}.csv", curve)
    metrics = {"kind": tok.config_.kind, "status": status, "steps": tok.n_steps_trained_,
               "dataset_sha256": dataset_hash(episodes)}
    if status == "ok":
        metrics["reconstruction_mse"] = reconstruction_error(tok, X)
        metrics["final_loss"] = float(np.mean(tok.loss_curve_[-100:])) if tok.loss_curve_ else None
        ppl = tok.perplexity()
        if ppl is not None:
            metrics["perplexity"] = ppl
        if tok.lipschitz_bound_ is not None:
            metrics["lipschitz_bound"] = tok.lipschitz_bound_
        save_checkpoint(tok, out / "tokenizer.ltok")
    _write_json(out / f"metrics{suffix}.json", metrics)
    return EXIT_OK if status == "ok" else EXIT_FAILED


def cmd_smoothness(cfg: RunConfig, out: Path) -> int:
    paths = cfg["smoothness.checkpoints"]
    if not paths:
        raise CommandError("smoothness.checkpoints lists no checkpoint files")
    stems = [Path(p).stem for p in paths]
    tokenizers = {}
    for p, stem in zip(paths, stems):
        # runs/*/tokenizer.ltok all share a stem; qualify every clashing name by its directory
        name = f"{Path(p).parent.name}/{stem}" if stems.count(stem) > 1 else stem
        if name in tokenizers:
            name = f"{name}#{len(tokenizers)}"
        try:
            tokenizers[name] = load_checkpoint(p)
        except (OSError, CheckpointError) as exc:
            raise CommandError(f"cannot load checkpoint {p}: {exc}") from exc
    episodes = _load_episodes(cfg)
    trajs = _action_trajectories(episodes)
    for name, tok in tokenizers.items():
        if trajs and tok.n_features_in_ != trajs[0].shape[1]:
            raise CommandError(f"checkpoint {name} expects {tok.n_features_in_}-dim actions, "
                               f"dataset has {trajs[0].shape[1]}")
    n = min(cfg["smoothness.trajectories"], len(trajs))
    reports = compare_tokenizers(tokenizers, trajs, n_trajectories=n)
    lines = ["tokenizer,score,n_trajectories"] + [f"{r.tokenizer},{r.score!r},{r.n_trajectories}" for r in reports]
    _write_text(out / "smoothness.csv", "\n".join(lines) + "\n")
    _write_json(out / "smoothness.json", [{"tokenizer": r.tokenizer, "score": r.score,
                                           "n_trajectories": r.n_trajectories, "metadata": r.metadata}
                                          for r in reports])
    panels, all_latents = [], []
    m = min(cfg["smoothness.svg_trajectories"], n)
    for name, tok in tokenizers.items():
        lat = latent_trajectories(tok, trajs[:n], name)
        all_latents.extend(lat)
        head = [type(t)(t.points[:PROJECTION_STEPS], t.tokenizer, t.episode) for t in lat[:m]]
        proj = project_2d(head)
        panels.append((f"{name} (PCA {proj.explained_variance_ratio:.2f})", proj.polylines))
    _write_text(out / "latents.csv", latents_csv(all_latents))
    _write_text(out / "projection.svg", plots.polyline_panels(panels, "latent trajectories, first 10 steps"))
    for r in reports:
        logger.info("smoothness %s: %.6g over %d trajectories", r.tokenizer, r.score, r.n_trajectories)
    return EXIT_OK


def _budget(cfg: RunConfig) -> PolicyBudget:
    t = tokenizer_params(cfg)
    tok = {k: t[k] for k in ("latent_dim", "codebook_size", "encoder_hidden", "alpha", "beta", "gamma",
                             "bins_per_dim", "dtype")}
    return PolicyBudget(steps=cfg["icil.steps"], batch_size=cfg["icil.batch_size"],
                        learning_rate=cfg["icil.learning_rate"], warmup_steps=cfg["icil.warmup_steps"],
                        lr_schedule=cfg["icil.lr_schedule"],
                        eval_episodes=cfg["icil.eval_episodes"], decode_via=cfg["icil.decode_via"],
                        train_tokenizer=cfg["icil.train_tokenizer"], dim=cfg["icil.dim"],
                        n_layers=cfg["icil.layers"], n_heads=cfg["icil.heads"],
                        smoothness_trajectories=cfg["smoothness.trajectories"], tokenizer_params=tok)


def cmd_icil(cfg: RunConfig, out: Path) -> int:
    episodes = _load_episodes(cfg)
    report = evaluate_tokenizer_suite(cfg["icil.kinds"], episodes, cfg["icil.seeds"], _budget(cfg),
                                      eval_root=cfg["seed"], workers=cfg["workers"])
    _write_text(out / "success.csv", report.success_csv())
    _write_text(out / "smoothness.csv", report.smoothness_csv())
    data = report.to_dict()
    data["spearman"] = _finite_or_none(data["spearman"])
    _write_json(out / "report.json", data)
    points = [(k, report.mean_smoothness(k), report.mean_success(k)) for k in report.kinds]
    _write_text(out / "correlation.svg", plots.scatter(points, "smoothness vs success",
                                                         "least-energy score (lower is smoother)",
                                                         "mean success rate"))
    n_div = sum(r.diverged for r in report.runs)
    logger.info("spearman(score, success) = %s; diverged runs: %d", report.spearman(), n_div)
    return EXIT_OK if n_div == 0 else EXIT_FAILED


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    mode = cfg["sweep.mode"]
    episodes = _load_episodes(cfg)
    if mode == "icil":
        data, train_params = episodes, None
    else:
        data = _action_trajectories(episodes)
        train_params = {k: v for k, v in tokenizer_params(cfg).items()
                        if k not in ("kind", "codebook_size", "lipschitz")}
    report = run_sweep(data, kind=cfg["sweep.kind"], mode=mode, codebook_sizes=cfg["sweep.codebook_sizes"],
                       lipschitz=cfg["sweep.lipschitz"], seeds=cfg["sweep.seeds"], budget=_budget(cfg),
                       train_params=train_params, workers=cfg["workers"])
    cells_dir = out / "cells"
    cells_dir.mkdir(exist_ok=True)
    for cell in report.cells:
        if cell.checkpoint is not None:
            write_atomic(cells_dir / f"{cell.label}.ltok", cell.checkpoint)
    _write_text(out / "sweep.csv", report.table_csv())
    metric = "mean_success" if mode == "icil" else "reconstruction_mse"
    summary = report.summary(metric)
    series = {("lipschitz on" if l else "lipschitz off"): [summary[(k, l)] for k in report.codebook_sizes]
              for l in report.lipschitz}
    _write_text(out / "sweep.svg", plots.bar_chart([str(k) for k in report.codebook_sizes], series,
                                                   f"{report.kind}: {metric} by codebook size", metric))
    _write_json(out / "sweep.json", {
        "kind": report.kind, "mode": mode, "complete": report.complete,
        "cells": [{"codebook_size": c.codebook_size, "lipschitz": c.lipschitz, "seed": c.seed,
                   "status": c.status, "error": c.error, "dataset_hash": c.dataset_hash,
                   "metrics": {k: _finite_or_none(v) for k, v in c.metrics.items()}} for c in report.cells]})
    failed = [c.label for c in report.cells if c.status != "ok"]
    if failed:
        logger.error("sweep cells failed: %s", ", ".join(failed))
    return EXIT_OK if not failed else EXIT_FAILED


COMMANDS = {"synth": cmd_synth, "train-tokenizer": cmd_train_tokenizer, "smoothness": cmd_smoothness,
            "icil": cmd_icil, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="liptok", description="Action tokenizer experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--out", type=Path, help="output directory (overrides config)")
        p.add_argument("--workers", type=int, help="parallel worker processes (overrides config)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key; repeatable")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.set("seed", args.seed)
    if args.out is not None:
        cfg.set("out", str(args.out))
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg.set("workers", args.workers)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        cfg.write(out / "config.resolved")
        _setup_logging(out)
        return COMMANDS[args.command](cfg, out)
    except (CommandError, ValueError) as exc:  # ConfigError and CheckpointError included
        print(f"liptok {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
