"""Geodesic Euler integration of the learned marginal velocity."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import softmax

from .codebook import decode_argmax
from .exceptions import AntipodalPoints, NonFiniteLogits, ParameterOutOfRange, StepBudgetZero
from .geometry import EPS_ANTIPODAL, EPS_TAYLOR, exp_map, sample_uniform
from .schedule import Schedule, euler_step_sizes

VELOCITIES = ("exact", "stochastic", "topk")
EPS_PROB = 1e-12


@dataclass
class SamplerConfig:
    steps: int = 64
    velocity: str = "exact"
    k: int | None = None
    temperature: float = 1.0
    schedule: Schedule = field(default_factory=Schedule)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise StepBudgetZero("sampling needs at least one step")
        if self.velocity not in VELOCITIES:
            raise ParameterOutOfRange(f"velocity must be one of {VELOCITIES}")
        if not self.temperature > 0:
            raise ParameterOutOfRange("temperature must be > 0")
        if self.velocity == "topk" and (self.k is None or self.k < 1):
            raise ParameterOutOfRange("top-k velocity needs k >= 1")

    @property
    def nfe(self):
        return self.steps + 1

    def to_dict(self):
        out = {k: v for k, v in asdict(self).items() if k != "schedule"}
        out["schedule"] = self.schedule.to_dict()
        return out


def apply_temperature(logits, temperature=1.0):
    """``softmax(logits / T)`` along the last axis."""
    if not temperature > 0:
        raise ParameterOutOfRange("temperature must be > 0")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteLogits("logits contain NaN or inf")
    return softmax(logits / temperature, axis=-1)


def _log_map_coeffs(z, emb):
    """Inner products ``c`` and factors ``f = omega / sin(omega)`` for every token."""
    c = np.clip(z @ emb.T, -1.0, 1.0)
    s = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    omega = np.arctan2(s, c)
    f = np.where(omega < EPS_TAYLOR, 1.0, omega / np.where(s > 0, s, 1.0))
    return c, omega, f


def marginal_velocity(z, probs, emb, guard=False):
    """``sum_v probs[v] * log_z(emb[v])`` for every position in ``z``.

    With ``guard`` set, tokens nearly antipodal to ``z`` are dropped and the
    remaining probabilities renormalised; returns ``(velocity, n_dropped)``.
    Without it, such a token raises :class:`AntipodalPoints`.
    """
    z = np.asarray(z, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    c, omega, f = _log_map_coeffs(z, emb)
    bad = (omega >= np.pi - EPS_ANTIPODAL) & (probs > EPS_PROB)
    dropped = int(bad.sum())
    if dropped:
        if not guard:
            raise AntipodalPoints("a token with positive probability is antipodal to the latent")
        probs = np.where(bad, 0.0, probs)
        total = probs.sum(axis=-1, keepdims=True)
        probs = probs / np.where(total > 0, total, 1.0)
    w = probs * f
    v = w @ emb - np.sum(w * c, axis=-1, keepdims=True) * z
    return v, dropped


def exact_velocity(z, probs, emb):
    return marginal_velocity(z, probs, emb)[0]


def sample_tokens(probs, rng):
    """One categorical draw per row by inverting the cumulative distribution."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,)) * cdf[..., -1:]
    return np.minimum(np.sum(cdf <= u, axis=-1), probs.shape[-1] - 1)


def stochastic_velocity(z, probs, emb, rng, guard=False):
    """Log map toward one token drawn from ``probs`` at each position."""
    idx = sample_tokens(np.asarray(probs, dtype=np.float64), rng)
    onehot = np.zeros(np.shape(probs))
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    return marginal_velocity(z, onehot, emb, guard)


def topk_probs(logits, k, temperature=1.0):
    """Softmax over the ``k`` largest logits; ties keep the lower index."""
    logits = np.asarray(logits, dtype=np.float64)
    vocab = logits.shape[-1]
    if not 1 <= k <= vocab:
        raise ParameterOutOfRange(f"k must lie in [1, {vocab}]")
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    kept = np.full(logits.shape, -np.inf)
    np.put_along_axis(kept, order, np.take_along_axis(logits, order, axis=-1), axis=-1)
    return apply_temperature_masked(kept, temperature)


def apply_temperature_masked(logits, temperature):
    if not np.all(np.isfinite(logits) | np.isneginf(logits)):
        raise NonFiniteLogits("logits contain NaN or +inf")
    return softmax(logits / temperature, axis=-1)


def topk_velocity(z, logits, k, emb, temperature=1.0):
    return exact_velocity(z, topk_probs(logits, k, temperature), emb)


def posterior_entropy(probs):
    p = np.asarray(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def sample(logits_fn, codebook, config, n_samples=1, length=None, tokens=None, clean_mask=None):
    """Integrate from uniform noise to tokens.

    ``logits_fn(z, t)`` maps latents ``(B, L, d)`` and a time to ``(B, L, |V|)``
    logits. Conditioning tokens are pinned at positions where ``clean_mask``
    is true. Returns ``(tokens, report, final_latent)``.
    """
    emb = codebook.normalized
    if tokens is not None:
        tokens = np.atleast_2d(np.asarray(tokens))
        clean = np.zeros(tokens.shape, dtype=bool) if clean_mask is None else np.asarray(clean_mask, dtype=bool)
        clean = np.broadcast_to(clean, tokens.shape)
        n_samples, length = tokens.shape
    else:
        if length is None:
            raise ParameterOutOfRange("length is required without conditioning tokens")
        clean = np.zeros((n_samples, length), dtype=bool)
        tokens = np.zeros((n_samples, length), dtype=np.int64)

    rng = np.random.default_rng(config.seed)
    z = sample_uniform(codebook.dim, rng, (n_samples, length))
    pinned = codebook.embed(tokens)
    z = np.where(clean[..., None], pinned, z)
    steps = euler_step_sizes(config.schedule, config.steps)
    free = ~clean
    entropies = []
    dropped = 0
    for n in range(config.steps):
        t = n / config.steps
        logits = np.asarray(logits_fn(z, t), dtype=np.float64)
        if config.velocity == "topk":
            probs = topk_probs(logits, config.k, config.temperature)
        else:
            probs = apply_temperature(logits, config.temperature)
        if config.velocity == "stochastic":
            v, dr = stochastic_velocity(z, probs, emb, rng, guard=True)
        else:
            v, dr = marginal_velocity(z, probs, emb, guard=True)
        dropped += dr
        ent = posterior_entropy(probs)
        entropies.append(float(ent[free].mean()) if free.any() else 0.0)
        v = np.where(free[..., None], v, 0.0)
        z = exp_map(z, steps[n] * v)
        z = np.where(clean[..., None], pinned, z)
    final_logits = logits_fn(z, 1.0)
    out = decode_argmax(final_logits)
    out = np.where(clean, tokens, out)
    report = {
        "tokens": out.tolist(),
        "entropy_per_step": entropies,
        "nfe": config.nfe,
        "seed": config.seed,
        "antipodal_dropped": dropped,
        "config": config.to_dict(),
    }
    return out, report, z


def model_logits_fn(model, params):
    """Adapter turning a denoiser and its parameters into ``fn(z, t)``."""

    def fn(z, t):
        return model(params, z, np.full(z.shape[0], t))

    return fn
