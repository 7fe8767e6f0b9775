"""Differentiable building blocks with hand-written reverse passes.

Each ``op`` returns ``(out, cache)`` and ``op_back(grad_out, cache)`` returns
the input gradients. Arrays carry batch axes in front; features are last.
Weights follow the ``(out_features, in_features)`` convention, ``y = x @ W.T``.
"""

import numpy as np
from scipy.special import expit, ndtr

NORM_EPS = 1e-6
LN_EPS = 1e-6
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def linear(x, w):
    return x @ w.T


def linear_back(g, x, w):
    dw = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    return g @ w, dw


def unit_norm(u, eps=NORM_EPS):
    """``u / max(|u|, eps)`` along the last axis."""
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    den = np.maximum(n, eps)
    y = u / den
    return y, (y, n, den, eps)


def unit_norm_back(g, cache):
    y, n, den, eps = cache
    radial = np.sum(y * g, axis=-1, keepdims=True)
    return np.where(n > eps, (g - y * radial) / den, g / den)


def layer_norm(x, eps=LN_EPS):
    """Affine-free layer normalization over the last axis."""
    xc = x - x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * inv
    return xh, (xh, inv)


def layer_norm_back(g, cache):
    xh, inv = cache
    return inv * (g - g.mean(axis=-1, keepdims=True) - xh * (g * xh).mean(axis=-1, keepdims=True))


def gelu(x):
    cdf = ndtr(x)
    return x * cdf, (x, cdf)


def gelu_back(g, cache):
    x, cdf = cache
    return g * (cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI)


def silu(x):
    s = expit(x)
    return x * s, (x, s)


def silu_back(g, cache):
    x, s = cache
    return g * s * (1.0 + x * (1.0 - s))


def split_heads(x, n_heads):
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    b, h, l, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dk)


def rope_tables(length, head_dim, base=10000.0):
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half) / half)
    ang = np.arange(length)[:, None] * inv_freq[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang), np.sin(ang)


def _rotate_half(x):
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def _rotate_half_t(x):
    half = x.shape[-1] // 2
    return np.concatenate([x[..., half:], -x[..., :half]], axis=-1)


def rope(x, cos, sin):
    """Rotary position encoding on ``(B, H, L, dk)`` with rotate-half pairing."""
    return x * cos + _rotate_half(x) * sin


def rope_back(g, cos, sin):
    return g * cos + _rotate_half_t(g * sin)


def attention(q, k, v, scale, drop_mask=None):
    """Bidirectional softmax attention on ``(B, H, L, dk)`` tensors."""
    s = scale * (q @ k.swapaxes(-1, -2))
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    pd = p if drop_mask is None else p * drop_mask
    return pd @ v, (q, k, v, p, pd, drop_mask, scale)


def attention_back(go, cache):
    q, k, v, p, pd, drop_mask, scale = cache
    dv = pd.swapaxes(-1, -2) @ go
    dp = go @ v.swapaxes(-1, -2)
    if drop_mask is not None:
        dp = dp * drop_mask
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
    dq = scale * (ds @ k)
    dk = scale * (ds.swapaxes(-1, -2) @ q)
    return dq, dk, dv


def dropout_mask(rng, shape, rate):
    if rng is None or rate <= 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def timestep_features(t, dim, max_period=10000.0, time_scale=1000.0):
    """Sinusoidal features ``[cos(w t), sin(w t)]`` for each time in ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = time_scale * t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)
