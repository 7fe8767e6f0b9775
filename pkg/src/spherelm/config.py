"""Flat ``key = value`` run configuration with typed parsing.

Keys are dotted (``model.dim``). Values take the type of the default: ints,
floats, booleans (true/false/yes/no/1/0) or strings. Later sources win:
defaults, then the config file, then environment variables, then command
line overrides.
"""

from __future__ import annotations

import os
from pathlib import Path

from .exceptions import ConfigError

ENV_SEED = "SPHERELM_SEED"
ENV_OUTPUT_DIR = "SPHERELM_OUTPUT_DIR"

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs",
    "task.name": "sudoku",
    "task.box": 2,
    "task.difficulty": "easy",
    "task.eval_difficulty": "",
    "task.n_train": 20000,
    "task.n_eval": 200,
    "task.copy_length": 16,
    "task.copy_vocab": 8,
    "task.data": "",
    "model.arch": "standard",
    "model.dim": 64,
    "model.n_layers": 4,
    "model.n_heads": 4,
    "model.cond_dim": 64,
    "model.dropout": 0.0,
    "schedule.kind": "linear",
    "schedule.truncation": "auto",
    "schedule.delta": 0.1,
    "schedule.adaptive": False,
    "schedule.refit_interval": 50,
    "schedule.warmup": 1000,
    "train.steps": 1000,
    "train.batch_size": 32,
    "train.lr": 3e-4,
    "train.ema_rate": 0.999,
    "train.reproject": False,
    "train.loss_on_clean": False,
    "train.checkpoint_every": 0,
    "sample.steps": 64,
    "sample.velocity": "exact",
    "sample.topk": 1,
    "sample.temperature": 1.0,
    "sample.n": 8,
    "eval.nfe": "64",
    "eval.velocity": "exact",
    "eval.temperature": "1.0",
    "eval.bootstrap": 1000,
    "eval.limit": 0,
    "analyze.trials": 2000,
    "analyze.tail_trials": 100000,
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def coerce(key, raw):
    """Parse ``raw`` into the type of ``DEFAULTS[key]``."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    text = str(raw).strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    return text


def parse_text(text, source="<config>"):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            out[key] = coerce(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def parse_overrides(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = coerce(key.strip(), value)
    return out


def load_config(path=None, overrides=None, env=None):
    """Resolve the run configuration; returns a plain dict over every key."""
    cfg = dict(DEFAULTS)
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        cfg.update(parse_text(p.read_text(), str(p)))
    env = os.environ if env is None else env
    if env.get(ENV_SEED):
        cfg["seed"] = coerce("seed", env[ENV_SEED])
    if env.get(ENV_OUTPUT_DIR):
        cfg["output_dir"] = env[ENV_OUTPUT_DIR]
    cfg.update(overrides or {})
    validate(cfg)
    return cfg


def validate(cfg):
    checks = [
        (cfg["task.name"] in ("sudoku", "copy", "file"), "task.name must be sudoku, copy or file"),
        (cfg["task.box"] in (2, 3), "task.box must be 2 or 3"),
        (cfg["task.name"] != "file" or bool(cfg["task.data"]), "task.data is required when task.name = file"),
        (cfg["model.arch"] in ("standard", "s_arch"), "model.arch must be standard or s_arch"),
        (cfg["model.dim"] > 0 and cfg["model.n_layers"] > 0 and cfg["model.n_heads"] > 0, "model sizes must be positive"),
        (cfg["model.dim"] % max(cfg["model.n_heads"], 1) == 0, "model.dim must be divisible by model.n_heads"),
        (cfg["schedule.kind"] in ("linear", "cosine2"), "schedule.kind must be linear or cosine2"),
        (cfg["train.steps"] >= 0, "train.steps must be >= 0"),
        (cfg["train.batch_size"] >= 1, "train.batch_size must be >= 1"),
        (cfg["train.lr"] >= 0, "train.lr must be >= 0"),
        (0 <= cfg["train.ema_rate"] < 1, "train.ema_rate must lie in [0, 1)"),
        (cfg["sample.steps"] >= 1, "sample.steps must be >= 1"),
        (cfg["sample.velocity"] in ("exact", "stochastic", "topk"), "sample.velocity must be exact, stochastic or topk"),
        (cfg["sample.topk"] >= 1, "sample.topk must be >= 1"),
        (cfg["sample.temperature"] > 0, "sample.temperature must be > 0"),
        (cfg["eval.bootstrap"] >= 1, "eval.bootstrap must be >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    trunc = cfg["schedule.truncation"].lower()
    if trunc not in ("auto", "none"):
        try:
            a = float(trunc)
        except ValueError:
            raise ConfigError("schedule.truncation must be auto, none or a number in (0, 1]") from None
        if not 0 < a <= 1:
            raise ConfigError("schedule.truncation must lie in (0, 1]")
    return cfg


def dump(cfg):
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in sorted(cfg.items()))


def parse_list(text, kind=str):
    items = [s.strip() for s in str(text).split(",") if s.strip()]
    try:
        return [kind(s) for s in items]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None
