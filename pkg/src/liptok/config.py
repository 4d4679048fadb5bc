"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment.  Keys are namespaced by the
part of the system they steer (``data.``, ``tokenizer.``, ``train.``,
``smoothness.``, ``icil.``, ``sweep.``); the three top-level keys are
``seed``, ``out`` and ``workers``.  Lists are comma separated.  Every key must
be in :data:`SCHEMA`; a typo is an error, never a silently ignored setting.

The resolved form (every key, sorted, canonical value text) is what runs write
next to their outputs; parsing it back gives the same config.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    """Unknown key, malformed line or unparsable value."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt_bool(v: bool) -> str:
    return "true" if v else "false"


def _list_of(parse: Callable[[str], Any]) -> Callable[[str], list]:
    def inner(text: str) -> list:
        return [parse(p.strip()) for p in text.split(",") if p.strip()]
    return inner


def _fmt_float(v: float) -> str:
    return repr(float(v))


@dataclass(frozen=True)
class Key:
    default: Any
    parse: Callable[[str], Any]
    fmt: Callable[[Any], str]
    doc: str = ""


def _int(default, doc=""):
    return Key(default, int, str, doc)


def _float(default, doc=""):
    return Key(default, float, _fmt_float, doc)


def _str(default, doc=""):
    return Key(default, str, str, doc)


def _bool(default, doc=""):
    return Key(default, _parse_bool, _fmt_bool, doc)


def _ints(default, doc=""):
    return Key(list(default), _list_of(int), lambda v: ",".join(map(str, v)), doc)


def _strs(default, doc=""):
    return Key(list(default), _list_of(str), lambda v: ",".join(v), doc)


def _bools(default, doc=""):
    return Key(list(default), _list_of(_parse_bool), lambda v: ",".join(map(_fmt_bool, v)), doc)


SCHEMA: dict[str, Key] = {
    "seed": _int(0, "root seed; every random stream is derived from it"),
    "out": _str("runs", "output directory"),
    "workers": _int(1, "parallel worker processes"),
    # datasets
    "data.path": _str("", "dataset file (JSONL episodes)"),
    "data.mode": _str("expert", "synth mode: expert episodes or minjerk action trajectories"),
    "data.episodes_per_task": _int(1000, "expert episodes per task family"),
    "data.tasks": _strs(["reach", "pick-place", "push"]),
    "data.horizon": _int(50),
    "data.trajectories": _int(500, "minjerk mode: number of trajectories"),
    "data.trajectory_length": _int(50),
    "data.action_dim": _int(7),
    "data.segments": _int(3, "minjerk mode: waypoint segments per trajectory"),
    # tokenizer
    "tokenizer.kind": _str("lipvqvae"),
    "tokenizer.latent_dim": _int(8),
    "tokenizer.codebook_size": _int(1024),
    "tokenizer.encoder_hidden": _ints([256, 256]),
    "tokenizer.alpha": _float(1.0),
    "tokenizer.beta": _float(0.25),
    "tokenizer.gamma": _float(1e-6),
    "tokenizer.lipschitz": _str("auto", "auto, on or off"),
    "tokenizer.bins_per_dim": _int(256),
    "tokenizer.dtype": _str("float32"),
    # standalone tokenizer training
    "train.steps": _int(2000),
    "train.batch_size": _int(256),
    "train.learning_rate": _float(1e-3),
    "train.warmup_steps": _int(100),
    "train.lr_schedule": _str("cosine", "cosine or constant"),
    # smoothness benchmark
    "smoothness.checkpoints": _strs([], "checkpoint files, report rows follow this order"),
    "smoothness.trajectories": _int(500),
    "smoothness.svg_trajectories": _int(20, "trajectories drawn per SVG panel"),
    # in-context imitation
    "icil.kinds": _strs(["mlp", "bin", "vqvae", "lfqvae", "lipvqvae"]),
    "icil.seeds": _ints([0, 1, 2]),
    "icil.steps": _int(12000),
    "icil.batch_size": _int(16),
    "icil.learning_rate": _float(1e-3),
    "icil.warmup_steps": _int(100),
    "icil.lr_schedule": _str("cosine", "cosine or constant"),
    "icil.eval_episodes": _int(100, "closed-loop rollouts per task and seed"),
    "icil.decode_via": _str("head"),
    "icil.train_tokenizer": _bool(True),
    "icil.dim": _int(64),
    "icil.layers": _int(2),
    "icil.heads": _int(4),
    # ablation sweeps
    "sweep.mode": _str("icil", "icil (success + smoothness) or tokenizer (standalone)"),
    "sweep.kind": _str("vqvae", "base tokenizer kind of every cell"),
    "sweep.codebook_sizes": _ints([256, 512, 1024, 2048]),
    "sweep.lipschitz": _bools([False, True]),
    "sweep.seeds": _ints([0, 1, 2]),
}


class RunConfig:
    """Validated mapping from schema keys to typed values."""

    def __init__(self, values: dict[str, Any] | None = None):
        self._values = {k: (list(spec.default) if isinstance(spec.default, list) else spec.default)
                        for k, spec in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    # -- access ------------------------------------------------------------------

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise KeyError(key)
        return self._values[key]

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        spec = SCHEMA[key]
        if isinstance(value, str):
            try:
                value = spec.parse(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        self._values[key] = value

    def section(self, prefix: str) -> dict[str, Any]:
        """Values under ``prefix.``, keyed by the remainder."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self._values.items() if k.startswith(p)}

    def copy(self, **overrides) -> "RunConfig":
        out = RunConfig(dict(self._values))
        for k, v in overrides.items():
            out.set(k.replace("__", "."), v)
        return out

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values

    # -- text form -----------------------------------------------------------------

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        seen = set()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in seen:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            seen.add(key)
            try:
                cfg.set(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"), str(path))

    def dumps(self) -> str:
        return "".join(f"{k} = {SCHEMA[k].fmt(self._values[k])}\n" for k in sorted(SCHEMA))

    def write(self, path) -> None:
        """Atomic write of the resolved config."""
        write_atomic(path, self.dumps().encode("utf-8"))


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def tokenizer_params(cfg: RunConfig, **overrides) -> dict[str, Any]:
    """ActionTokenizer keyword arguments from the ``tokenizer.`` and ``train.`` sections."""
    t = cfg.section("tokenizer")
    lip = {"auto": None, "on": True, "off": False}.get(t["lipschitz"])
    if lip is None and t["lipschitz"] != "auto":
        raise ConfigError(f"tokenizer.lipschitz must be auto, on or off, got {t['lipschitz']!r}")
    params = dict(kind=t["kind"], latent_dim=t["latent_dim"], codebook_size=t["codebook_size"],
                  encoder_hidden=tuple(t["encoder_hidden"]), alpha=t["alpha"], beta=t["beta"],
                  gamma=t["gamma"], lipschitz=lip, bins_per_dim=t["bins_per_dim"], dtype=t["dtype"],
                  n_steps=cfg["train.steps"], batch_size=cfg["train.batch_size"],
                  learning_rate=cfg["train.learning_rate"], warmup_steps=cfg["train.warmup_steps"],
                  lr_schedule=cfg["train.lr_schedule"])
    params.update(overrides)
    return params
