"""Accuracy sweeps over sampler settings with bootstrap intervals."""

from __future__ import annotations

import numpy as np

from .analysis import bootstrap_ci, mean_unigram_entropy
from .exceptions import ConfigError
from .sampler import SamplerConfig, sample


def parse_velocity(spec):
    """``"exact"``, ``"stochastic"`` or ``"topk:K"`` -> ``(name, k)``."""
    spec = spec.strip().lower()
    if spec in ("exact", "stochastic"):
        return spec, None
    if spec.startswith("topk:"):
        try:
            k = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad top-k spec {spec!r}") from None
        if k < 1:
            raise ConfigError("top-k needs k >= 1")
        return "topk", k
    raise ConfigError(f"unknown velocity {spec!r}; use exact, stochastic or topk:K")


def sequence_correct(pred, target, clean):
    """Exact match over the positions that were generated."""
    return np.all((pred == target) | clean, axis=1)


def evaluate(logits_fn, codebook, schedule, tokens, clean, nfe_list, velocities, temperatures, n_boot=1000, seed=0, correct_fn=None):
    """One result row per ``(nfe, velocity, temperature)`` cell.

    NFE counts every forward pass, so a budget of ``n`` uses ``n - 1``
    integration steps plus the final decode.
    """
    correct_fn = correct_fn or (lambda pred: sequence_correct(pred, tokens, clean))
    rows = []
    for nfe in nfe_list:
        if nfe < 2:
            raise ConfigError("NFE must be >= 2 (one step plus the decode pass)")
        for vel in velocities:
            name, k = parse_velocity(vel)
            for temp in temperatures:
                cfg = SamplerConfig(steps=nfe - 1, velocity=name, k=k, temperature=temp, schedule=schedule, seed=seed)
                pred, report, _ = sample(logits_fn, codebook, cfg, tokens=tokens, clean_mask=clean)
                ok = correct_fn(pred).astype(float)
                point, lo, hi = bootstrap_ci(ok, n_boot, rng=np.random.default_rng(seed))
                generated = [p[~c] for p, c in zip(pred, clean)]
                rows.append(
                    {
                        "nfe": nfe,
                        "velocity": vel,
                        "temperature": temp,
                        "accuracy": float(ok.mean()),
                        "boot_mean": point,
                        "ci_lo": lo,
                        "ci_hi": hi,
                        "entropy": mean_unigram_entropy(generated) if all(len(g) for g in generated) else 0.0,
                        "n": len(ok),
                        "antipodal_dropped": report["antipodal_dropped"],
                    }
                )
    return rows
