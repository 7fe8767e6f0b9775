"""Learnable token embedding table with a unit-norm view."""

from __future__ import annotations

import struct

import numpy as np

from .exceptions import IndexOutOfRange, NonFiniteLogits, ShapeMismatch, ZeroVector
from .geometry import EPS_ZERO


class Codebook:
    """``|V| x d`` raw embedding table; rows are normalized on lookup.

    The raw rows are unconstrained parameters. :attr:`normalized` gives the
    points on the sphere that the flow actually uses.
    """

    def __init__(self, table, reproject_after_step=False):
        table = np.array(table, dtype=np.float64)
        if table.ndim != 2 or table.shape[1] < 2:
            raise ShapeMismatch("codebook table must be 2-D with d >= 2")
        if np.any(np.linalg.norm(table, axis=1) <= EPS_ZERO):
            raise ZeroVector("codebook rows must have nonzero norm")
        self.table = table
        self.reproject_after_step = bool(reproject_after_step)

    @classmethod
    def random(cls, vocab_size, dim, rng, reproject_after_step=False):
        """Gaussian rows, normalized (uniform on the sphere)."""
        raw = rng.standard_normal((vocab_size, dim))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        return cls(raw, reproject_after_step)

    @property
    def vocab_size(self):
        return self.table.shape[0]

    @property
    def dim(self):
        return self.table.shape[1]

    @property
    def norms(self):
        return np.linalg.norm(self.table, axis=1)

    @property
    def normalized(self):
        return self.table / self.norms[:, None]

    def embed(self, tokens):
        """Unit-norm embeddings for a token index or an integer array."""
        tokens = np.asarray(tokens)
        if not np.issubdtype(tokens.dtype, np.integer):
            raise IndexOutOfRange("token indices must be integers")
        if np.any((tokens < 0) | (tokens >= self.vocab_size)):
            raise IndexOutOfRange(f"token index outside [0, {self.vocab_size})")
        rows = self.table[tokens]
        return rows / np.linalg.norm(rows, axis=-1, keepdims=True)

    def reproject(self):
        """Return a copy with every raw row rescaled to unit norm."""
        return Codebook(reproject_rows(self.table), self.reproject_after_step)

    def copy(self):
        return Codebook(self.table.copy(), self.reproject_after_step)

    def normalize_grad(self, grad_normalized):
        """Chain rule through ``e -> e / |e|`` for every row."""
        e_hat = self.normalized
        radial = np.sum(e_hat * grad_normalized, axis=1, keepdims=True)
        return (grad_normalized - radial * e_hat) / self.norms[:, None]

    def to_bytes(self):
        """``|V|`` and ``d`` as little-endian int64, then the float64 rows."""
        v, d = self.table.shape
        head = struct.pack("<qq", v, d)
        return head + np.ascontiguousarray(self.table, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob, reproject_after_step=False):
        if len(blob) < 16:
            raise ShapeMismatch("codebook blob too short")
        v, d = struct.unpack("<qq", blob[:16])
        if len(blob) != 16 + 8 * v * d:
            raise ShapeMismatch("codebook blob length does not match header")
        table = np.frombuffer(blob, dtype="<f8", offset=16).reshape(v, d)
        return cls(table.astype(np.float64), reproject_after_step)


def reproject_rows(table):
    norms = np.linalg.norm(table, axis=1, keepdims=True)
    if np.any(norms <= EPS_ZERO):
        raise ZeroVector("cannot reproject a zero row")
    return table / norms


def reproject(codebook):
    return codebook.reproject()


def embed(codebook, token):
    return codebook.embed(token)


def decode_argmax(logits):
    """Per-position argmax over the last axis; ties go to the lowest index."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteLogits("logits contain NaN or inf")
    return np.argmax(logits, axis=-1)
