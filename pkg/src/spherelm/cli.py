"""Command line: ``spherelm {train,sample,eval,analyze}``.

Exit codes: 0 on success, 2 for configuration or input errors, 3 when a
numeric failure (non-finite loss, logits or activations) stops the run.

Environment: SPHERELM_SEED and SPHERELM_OUTPUT_DIR override the seed and the
output directory of the config file; explicit command line values win.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as C
from .analysis import alpha_star_table, mc_lockin, tail_bound_check
from .denoiser import DenoiserConfig
from .evaluation import evaluate
from .exceptions import ConfigError, NonFiniteActivation, NonFiniteLogits, NonFiniteLoss, SphereLMError
from .plotting import line_chart
from .sampler import SamplerConfig, model_logits_fn, sample
from .schedule import RefitParams, Schedule, alpha_star, truncation_bound
from .tasks import PRESETS, SudokuFormat, copy_task, make_splits, make_sudoku_dataset, puzzle_keys, read_dataset, solution_accuracy, write_dataset
from .trainer import TrainConfig, Trainer, load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (NonFiniteLoss, NonFiniteActivation, NonFiniteLogits, FloatingPointError)


# ------------------------------------------------------------------ helpers
def _write_csv(path, rows, fields=None):
    fields = fields or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def build_data(cfg):
    """Training and evaluation sequences for the configured task."""
    rng = np.random.default_rng([cfg["seed"], 1])
    name = cfg["task.name"]
    if name == "sudoku":
        box = cfg["task.box"]
        presets = PRESETS[box]
        if cfg["task.difficulty"] not in presets:
            raise ConfigError(f"task.difficulty must be one of {sorted(presets)}")
        (xtr, mtr), (xev, mev) = make_splits(cfg["task.n_train"], cfg["task.n_eval"], presets[cfg["task.difficulty"]], rng, box)
        if cfg["task.eval_difficulty"]:
            if cfg["task.eval_difficulty"] not in presets:
                raise ConfigError(f"task.eval_difficulty must be one of {sorted(presets)}")
            xev, mev = make_sudoku_dataset(cfg["task.n_eval"], presets[cfg["task.eval_difficulty"]], rng, box, exclude=puzzle_keys(xtr, box))
        meta = SudokuFormat(box).meta()
    elif name == "copy":
        length, vocab = cfg["task.copy_length"], cfg["task.copy_vocab"]
        xtr, mtr = copy_task(length, vocab, rng, n=cfg["task.n_train"])
        xev, mev = copy_task(length, vocab, rng, n=cfg["task.n_eval"])
        meta = {"task": "copy", "vocab_size": vocab, "length": length}
    else:
        xtr, mtr, meta = read_dataset(cfg["task.data"])
        xev, mev = xtr[: cfg["task.n_eval"]], mtr[: cfg["task.n_eval"]]
        meta.setdefault("vocab_size", int(xtr.max()) + 1)
    return (xtr, mtr), (xev, mev), meta


def make_schedule(cfg, vocab, dim):
    trunc = cfg["schedule.truncation"].lower()
    if trunc == "auto":
        a = truncation_bound(cfg["schedule.delta"], vocab, dim)
    elif trunc == "none":
        a = 1.0
    else:
        a = float(trunc)
    return Schedule(cfg["schedule.kind"], a)


def make_trainer(cfg, vocab):
    model_cfg = DenoiserConfig(
        arch=cfg["model.arch"],
        dim=cfg["model.dim"],
        n_layers=cfg["model.n_layers"],
        n_heads=cfg["model.n_heads"],
        cond_dim=cfg["model.cond_dim"],
        vocab_size=vocab,
        dropout=cfg["model.dropout"],
    )
    refit = None
    if cfg["schedule.adaptive"]:
        refit = RefitParams(refit_interval=cfg["schedule.refit_interval"], warmup=cfg["schedule.warmup"])
    train_cfg = TrainConfig(
        batch_size=cfg["train.batch_size"],
        steps=cfg["train.steps"],
        lr=cfg["train.lr"],
        ema_rate=cfg["train.ema_rate"],
        schedule=make_schedule(cfg, vocab, cfg["model.dim"]),
        refit=refit,
        reproject_after_step=cfg["train.reproject"],
        loss_on_clean=cfg["train.loss_on_clean"],
    )
    return Trainer.create(model_cfg, train_cfg, seed=cfg["seed"])


def _ema_logits(trainer):
    params, codebook = trainer.ema_params()
    return model_logits_fn(trainer.model, params), codebook


# ----------------------------------------------------------------- commands
def cmd_train(cfg, resume=None):
    (xtr, mtr), (xev, mev), meta = build_data(cfg)
    trainer = load_checkpoint(resume) if resume else make_trainer(cfg, meta["vocab_size"])
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(C.dump(cfg))
    write_dataset(out / "train.txt", xtr, mtr, meta)
    write_dataset(out / "eval.txt", xev, mev, meta)

    every = cfg["train.checkpoint_every"]
    metrics_path = out / "metrics.csv"
    append = bool(resume) and metrics_path.exists() and metrics_path.stat().st_size > 0
    metrics = open(metrics_path, "a" if append else "w", newline="")
    writer = csv.writer(metrics, lineterminator="\n")
    if not append:
        writer.writerow(["step", "t_mean", "loss", "wallclock"])

    def on_step(tr, loss):
        writer.writerow(tr.state.history[-1])
        if every and tr.state.step % every == 0:
            tr.save(out / f"checkpoint_{tr.state.step:07d}.zip")

    remaining = max(cfg["train.steps"] - trainer.state.step, 0)
    with metrics:
        trainer.fit(xtr, mtr, steps=remaining, callback=on_step)
    trainer.save(out / "final.zip")
    (out / "schedule.json").write_text(trainer.state.schedule.to_json())
    hist = np.array(trainer.state.history, dtype=float)
    if len(hist):
        line_chart(out / "loss.svg", {"loss": (hist[:, 0], hist[:, 2])}, "training loss", "step", "cross-entropy")
    return {"steps": trainer.state.step, "checkpoint": str(out / "final.zip")}


def cmd_sample(cfg, checkpoint, output=None, dataset=None):
    trainer = load_checkpoint(checkpoint)
    fn, codebook = _ema_logits(trainer)
    scfg = SamplerConfig(
        steps=cfg["sample.steps"],
        velocity=cfg["sample.velocity"],
        k=cfg["sample.topk"] if cfg["sample.velocity"] == "topk" else None,
        temperature=cfg["sample.temperature"],
        schedule=trainer.state.schedule,
        seed=cfg["seed"],
    )
    meta = {}
    if dataset:
        x, m, meta = read_dataset(dataset)
        x, m = x[: cfg["sample.n"]], m[: cfg["sample.n"]]
        tokens, report, _ = sample(fn, codebook, scfg, tokens=x, clean_mask=m)
    else:
        length = trainer.state.seq_length
        if length is None:
            raise ConfigError("checkpoint records no sequence length; pass --dataset to condition")
        tokens, report, _ = sample(fn, codebook, scfg, n_samples=cfg["sample.n"], length=length)
    if meta.get("task") == "sudoku":
        fmt = SudokuFormat(meta["box"])
        report["grids"] = tokens[:, fmt.cell_positions("solution")].reshape(len(tokens), fmt.side, fmt.side).tolist()
        report["solved"] = solution_accuracy(tokens, x, fmt.box).tolist()
    out = Path(output) if output else Path(cfg["output_dir"]) / "samples.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1, sort_keys=True))
    return {"samples": str(out), "nfe": report["nfe"]}


def cmd_eval(cfg, checkpoint, dataset):
    trainer = load_checkpoint(checkpoint)
    x, m, meta = read_dataset(dataset)
    if "clean_mask" not in meta or not np.any(~m):
        raise ConfigError("dataset has no ground-truth targets (need a sidecar clean mask with free positions)")
    if cfg["eval.limit"]:
        x, m = x[: cfg["eval.limit"]], m[: cfg["eval.limit"]]
    fn, codebook = _ema_logits(trainer)
    correct = None
    if meta.get("task") == "sudoku":
        correct = lambda pred: solution_accuracy(pred, x, meta["box"])  # noqa: E731
    rows = evaluate(
        fn,
        codebook,
        trainer.state.schedule,
        x,
        m,
        C.parse_list(cfg["eval.nfe"], int),
        C.parse_list(cfg["eval.velocity"]),
        C.parse_list(cfg["eval.temperature"], float),
        cfg["eval.bootstrap"],
        cfg["seed"],
        correct,
    )
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "results.csv", rows)
    series = {}
    for r in rows:
        series.setdefault(f'{r["velocity"]} T={r["temperature"]}', []).append((r["nfe"], r["accuracy"]))
    if len({r["nfe"] for r in rows}) > 1:
        line_chart(
            out / "accuracy_vs_nfe.svg",
            {k: tuple(zip(*sorted(v))) for k, v in series.items()},
            "exact match vs NFE",
            "NFE",
            "accuracy",
        )
    return {"results": str(out / "results.csv"), "cells": len(rows)}


LOCKIN_CASES = ((12, 256), (12, 512), (64, 128))


def cmd_analyze(cfg):
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    table = [
        {"vocab": v, "d": d, "delta": delta, "alpha_star": round(c, 6), "reference": r, "abs_err": round(abs(c - r), 6)}
        for v, d, delta, c, r in alpha_star_table()
    ]
    _write_csv(out / "alpha_star_table.csv", table)

    grid = np.round(np.linspace(0.0, 0.4, 21), 6)
    lock_rows, curves = [], {}
    for (v, d), child in zip(LOCKIN_CASES, rng.spawn(len(LOCKIN_CASES))):
        est = mc_lockin(v, d, grid, cfg["analyze.trials"], child)
        smooth = est.smoothed()
        a_star = alpha_star(0.1, v, d)
        for a, s, sm in zip(grid, est.success_rate, smooth):
            lock_rows.append({"vocab": v, "d": d, "alpha": a, "success": s, "smoothed": round(float(sm), 12), "alpha_star_0.1": round(a_star, 6)})
        curves[f"|V|={v}, d={d}"] = (grid, est.success_rate)
    _write_csv(out / "lockin.csv", lock_rows)
    line_chart(out / "lockin.svg", curves, "nearest-neighbour lock-in", "alpha", "success rate")

    tail_rows, tails = [], {}
    eps = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3]
    for d, child in zip((64, 256), rng.spawn(2)):
        rows = tail_bound_check(d, eps, cfg["analyze.tail_trials"], child)
        tail_rows.extend(rows)
        tails[f"empirical d={d}"] = (eps, [r["rate"] for r in rows])
        tails[f"bound d={d}"] = (eps, [r["bound"] for r in rows])
    _write_csv(out / "tail_bound.csv", tail_rows)
    line_chart(out / "tail_bound.svg", tails, "inner-product tail", "epsilon", "probability", logy=True)
    return {"alpha_star_rows": len(table), "lockin_rows": len(lock_rows), "tail_rows": len(tail_rows)}


# --------------------------------------------------------------------- main
def build_parser():
    p = argparse.ArgumentParser(
        prog="spherelm",
        description=__doc__.split("\n\n", 1)[0],
        epilog="Environment: SPHERELM_SEED (seed), SPHERELM_OUTPUT_DIR (output directory). "
        "Precedence: defaults < config file < environment < command line.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--single-thread", action="store_true", help="limit BLAS to one thread (bit-reproducible runs)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir")
        sp.add_argument("overrides", nargs="*", metavar="key=value", help="dotted config overrides")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--resume", help="checkpoint to continue from")

    sp = sub.add_parser("sample", help="sample from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--velocity", choices=("exact", "stochastic", "topk"))
    sp.add_argument("--topk", type=int)
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--n", type=int)
    sp.add_argument("--dataset", help="condition on the clean positions of these sequences")
    sp.add_argument("--output", help="samples JSON path")

    sp = sub.add_parser("eval", help="accuracy sweep on a dataset with targets")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--nfe", help="comma-separated NFE budgets")
    sp.add_argument("--velocity", help="comma-separated: exact, stochastic, topk:K")
    sp.add_argument("--temperature", help="comma-separated temperatures")
    sp.add_argument("--bootstrap", type=int)

    sp = sub.add_parser("analyze", help="random-codebook Monte Carlo and bound tables")
    common(sp)
    sp.add_argument("--trials", type=int)
    return p


_FLAG_KEYS = {
    "seed": "seed",
    "output_dir": "output_dir",
    "steps": "sample.steps",
    "velocity": "sample.velocity",
    "topk": "sample.topk",
    "temperature": "sample.temperature",
    "n": "sample.n",
    "nfe": "eval.nfe",
    "bootstrap": "eval.bootstrap",
    "trials": "analyze.trials",
}


def resolve_config(args):
    overrides = C.parse_overrides(args.overrides)
    for attr, key in _FLAG_KEYS.items():
        val = getattr(args, attr, None)
        if val is None:
            continue
        if args.command == "eval" and attr in ("velocity", "temperature"):
            key = f"eval.{attr}"
        overrides[key] = C.coerce(key, val)
    return C.load_config(args.config, overrides)


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    limits = threadpool_limits(1) if args.single_thread else contextlib.nullcontext()
    try:
        with limits, np.errstate(over="ignore", under="ignore"):
            cfg = resolve_config(args)
            if args.command == "train":
                result = cmd_train(cfg, args.resume)
            elif args.command == "sample":
                result = cmd_sample(cfg, args.checkpoint, args.output, args.dataset)
            elif args.command == "eval":
                result = cmd_eval(cfg, args.checkpoint, args.dataset)
            else:
                result = cmd_analyze(cfg)
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SphereLMError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def main():
    sys.exit(run())
