"""Monte-Carlo checks for random codebooks and evaluation statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.isotonic import IsotonicRegression

from .exceptions import EmptyInput, EmptySequence, ParameterOutOfRange
from .geometry import sample_uniform, slerp
from .schedule import alpha_star

# published lock-in levels, keyed by (|V|, d, delta)
REFERENCE_ALPHA_STAR = {
    (12, 256, 0.1): 0.132, (12, 256, 0.01): 0.158,
    (12, 512, 0.1): 0.093, (12, 512, 0.01): 0.111,
    (12, 768, 0.1): 0.076, (12, 768, 0.01): 0.090,
    (12, 1024, 0.1): 0.065, (12, 1024, 0.01): 0.078,
    (12, 4096, 0.1): 0.033, (12, 4096, 0.01): 0.039,
    (50000, 256, 0.1): 0.213, (50000, 256, 0.01): 0.231,
    (50000, 512, 0.1): 0.149, (50000, 512, 0.01): 0.161,
    (50000, 768, 0.1): 0.121, (50000, 768, 0.01): 0.131,
    (50000, 1024, 0.1): 0.105, (50000, 1024, 0.01): 0.114,
    (50000, 4096, 0.1): 0.052, (50000, 4096, 0.01): 0.057,
    (100000, 256, 0.1): 0.219, (100000, 256, 0.01): 0.236,
    (100000, 512, 0.1): 0.153, (100000, 512, 0.01): 0.165,
    (100000, 768, 0.1): 0.125, (100000, 768, 0.01): 0.134,
    (100000, 1024, 0.1): 0.108, (100000, 1024, 0.01): 0.116,
    (100000, 4096, 0.1): 0.054, (100000, 4096, 0.01): 0.058,
}


def alpha_star_table():
    """Rows ``(vocab, d, delta, computed, reference)`` for every reference entry."""
    return [(v, d, delta, alpha_star(delta, v, d), ref) for (v, d, delta), ref in sorted(REFERENCE_ALPHA_STAR.items())]


@dataclass
class LockinEstimate:
    alpha_grid: np.ndarray
    success_rate: np.ndarray
    trials: int

    def smoothed(self):
        """Isotonic (nondecreasing) fit of the success rates."""
        iso = IsotonicRegression(y_min=0.0, y_max=1.0, increasing=True)
        return iso.fit_transform(self.alpha_grid, self.success_rate)

    def isotonic_residual(self):
        return float(np.max(np.abs(self.smoothed() - self.success_rate)))


def mc_lockin(vocab_size, d, alpha_grid, trials, rng, chunk=500):
    """Fraction of trials where the target is the nearest codeword at each level.

    Each trial draws a fresh codebook, a noise point and a target token. Chunks
    use independent child generators so results do not depend on ``chunk``
    boundaries being processed in any particular order.
    """
    if trials < 100:
        raise ParameterOutOfRange("need at least 100 trials")
    alpha_grid = np.atleast_1d(np.asarray(alpha_grid, dtype=np.float64))
    hits = np.zeros(len(alpha_grid), dtype=np.int64)
    n_chunks = -(-trials // chunk)
    for i, child in enumerate(rng.spawn(n_chunks)):
        n = min(chunk, trials - i * chunk)
        emb = sample_uniform(d, child, (n, vocab_size))
        z0 = sample_uniform(d, child, n)
        k = child.integers(0, vocab_size, size=n)
        target = emb[np.arange(n), k]
        for j, a in enumerate(alpha_grid):
            z = slerp(z0, target, np.full(n, a))
            sims = np.einsum("nvd,nd->nv", emb, z)
            hits[j] += int(np.sum(np.argmax(sims, axis=1) == k))
    return LockinEstimate(alpha_grid, hits / trials, trials)


def tail_bound(d, epsilon):
    return 2.0 * np.exp(-d * np.asarray(epsilon, dtype=np.float64) ** 2 / 2.0)


def tail_bound_check(d, epsilon_grid, trials, rng, chunk=10000):
    """Empirical ``P(<X, Y> > eps)`` for independent uniform ``X, Y`` vs. the bound.

    Returns one dict per epsilon with the rate, the bound, a three-sigma
    Monte-Carlo margin and whether ``rate <= bound + margin``.
    """
    if trials < 10_000:
        raise ParameterOutOfRange("need at least 1e4 trials")
    eps = np.atleast_1d(np.asarray(epsilon_grid, dtype=np.float64))
    counts = np.zeros(len(eps), dtype=np.int64)
    n_chunks = -(-trials // chunk)
    for i, child in enumerate(rng.spawn(n_chunks)):
        n = min(chunk, trials - i * chunk)
        x = sample_uniform(d, child, n)
        y = sample_uniform(d, child, n)
        dots = np.sum(x * y, axis=1)
        counts += np.sum(dots[:, None] > eps[None, :], axis=0)
    rows = []
    for e, c in zip(eps, counts):
        rate = c / trials
        bound = float(tail_bound(d, e))
        # bound-side binomial standard error, so the margin is never zero
        p = min(bound, 1.0)
        margin = 3.0 * np.sqrt(p * (1.0 - p) / trials)
        rows.append({"d": d, "epsilon": float(e), "rate": float(rate), "bound": bound, "margin": float(margin), "ok": bool(rate <= bound + margin)})
    return rows


def unigram_entropy(sequence, vocab=None):
    """Entropy in nats of the token frequencies in ``sequence``."""
    seq = np.asarray(sequence).reshape(-1)
    if seq.size == 0:
        raise EmptySequence("entropy of an empty sequence is undefined")
    _, counts = np.unique(seq, return_counts=True)
    p = counts / seq.size
    return float(-np.sum(p * np.log(p)))


def mean_unigram_entropy(sequences):
    return float(np.mean([unigram_entropy(s) for s in sequences]))


def bootstrap_ci(outcomes, n_boot=1000, level=0.95, rng=None):
    """Percentile bootstrap for the mean of 0/1 outcomes: ``(point, lo, hi)``."""
    x = np.asarray(outcomes, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise EmptyInput("bootstrap needs at least one outcome")
    if n_boot < 1:
        raise ParameterOutOfRange("n_boot must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    idx = rng.integers(0, x.size, size=(n_boot, x.size))
    acc = x[idx].mean(axis=1)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(acc, [tail, 100.0 - tail])
    return float(acc.mean()), float(lo), float(hi)
