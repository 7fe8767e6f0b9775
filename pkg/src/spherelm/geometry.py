"""Exact primitives on the unit hypersphere S^{d-1}.

All functions broadcast over leading axes: a "point" is the last axis of an
array, so ``p`` of shape ``(B, L, d)`` holds ``B * L`` sphere points. Points
are plain ``float64`` arrays; tangent vectors are arrays of the same shape
whose base point is implied by the call.
"""

from __future__ import annotations

import numpy as np

from .exceptions import (
    AlphaAtOne,
    AntipodalPoints,
    DimensionMismatch,
    NotTangent,
    ParameterOutOfRange,
    ZeroVector,
)

EPS_ZERO = 1e-12
EPS_TAYLOR = 1e-8
EPS_ANTIPODAL = 1e-6
TANGENT_TOL = 1e-6


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def _check_same_dim(p, q):
    if p.shape[-1] != q.shape[-1]:
        raise DimensionMismatch(f"dimension {p.shape[-1]} != {q.shape[-1]}")


def normalize(v):
    """Project ``v`` radially onto the sphere; raises ZeroVector at the origin."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n <= EPS_ZERO):
        raise ZeroVector("cannot normalize a vector of norm <= 1e-12")
    return v / n


def geodesic_distance(p, q):
    """Arc length ``arccos(<p, q>)`` with the inner product clamped to [-1, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_same_dim(p, q)
    return np.arccos(np.clip(_dot(p, q), -1.0, 1.0))


def _angle_and_residual(p, q):
    # omega from atan2 stays accurate near 0 and pi where arccos loses digits
    c = _dot(p, q)
    u = q - c[..., None] * p
    s = np.linalg.norm(u, axis=-1)
    return np.arctan2(s, c), c, u, s


def exp_map(p, v):
    """Move ``p`` along the geodesic with initial velocity ``v``."""
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_same_dim(p, v)
    if np.any(np.abs(_dot(p, v)) > TANGENT_TOL):
        raise NotTangent("velocity is not orthogonal to the base point")
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    small = n < EPS_TAYLOR
    safe_n = np.where(small, 1.0, n)
    out = np.cos(n) * p + np.sin(n) * (v / safe_n)
    if np.any(small):
        w = p + v
        out = np.where(small, w / np.linalg.norm(w, axis=-1, keepdims=True), out)
    return out


def log_map(p, q):
    """Tangent vector at ``p`` pointing to ``q`` with norm ``d(p, q)``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_same_dim(p, q)
    omega, _, u, s = _angle_and_residual(p, q)
    if np.any(omega >= np.pi - EPS_ANTIPODAL):
        raise AntipodalPoints("log map is undefined for antipodal points")
    small = omega < EPS_TAYLOR
    scale = np.where(small, 1.0, omega / np.where(small, 1.0, s))
    return scale[..., None] * u


def slerp(p, q, t):
    """Constant-speed geodesic interpolation from ``p`` (t=0) to ``q`` (t=1).

    ``t`` may be a scalar or broadcast against ``p.shape[:-1]``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_same_dim(p, q)
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0.0) | (t > 1.0)):
        raise ParameterOutOfRange("slerp parameter must lie in [0, 1]")
    omega, _, _, _ = _angle_and_residual(p, q)
    if np.any(omega >= np.pi - EPS_ANTIPODAL):
        raise AntipodalPoints("slerp endpoints are antipodal")
    small = omega < EPS_TAYLOR
    om = np.where(small, 1.0, omega)
    sin_om = np.sin(om)
    a = np.sin((1.0 - t) * om) / sin_om
    b = np.sin(t * om) / sin_om
    out = a[..., None] * p + b[..., None] * q
    if np.any(small):
        w = (1.0 - t)[..., None] * p + t[..., None] * q
        out = np.where(small[..., None], w / np.linalg.norm(w, axis=-1, keepdims=True), out)
    return out


def slerp_vjp(p, q, t, grad):
    """Vector-Jacobian products of :func:`slerp` for both endpoints.

    Derivatives are those of the closed form with ``omega = arccos(<p, q>)``,
    which agree with the implemented map along directions tangent to the
    sphere. Returns ``(grad_p, grad_q)``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), p.shape[:-1])
    omega, c, _, _ = _angle_and_residual(p, q)
    small = omega < EPS_TAYLOR
    om = np.where(small, 1.0, omega)
    so, co = np.sin(om), np.cos(om)
    s1, c1 = np.sin((1.0 - t) * om), np.cos((1.0 - t) * om)
    s2, c2 = np.sin(t * om), np.cos(t * om)
    a, b = s1 / so, s2 / so
    da = ((1.0 - t) * c1 * so - s1 * co) / so**2
    db = (t * c2 * so - s2 * co) / so**2
    k = -(da * _dot(g, p) + db * _dot(g, q)) / so
    gp = a[..., None] * g + k[..., None] * q
    gq = b[..., None] * g + k[..., None] * p
    if np.any(small):
        w = (1.0 - t)[..., None] * p + t[..., None] * q
        wn = np.linalg.norm(w, axis=-1, keepdims=True)
        z = w / wn
        gw = (g - z * _dot(z, g)[..., None]) / wn
        gp = np.where(small[..., None], (1.0 - t)[..., None] * gw, gp)
        gq = np.where(small[..., None], t[..., None] * gw, gq)
    return gp, gq


def sample_uniform(d, rng, size=()):
    """Uniform draw(s) on S^{d-1}: a standard Gaussian, normalized."""
    if d < 2:
        raise ParameterOutOfRange("sphere dimension must be >= 2")
    size = (size,) if np.isscalar(size) else tuple(size)
    eps = rng.standard_normal(size + (d,))
    return eps / np.linalg.norm(eps, axis=-1, keepdims=True)


def conditional_velocity(z_t, z_1, alpha, alpha_dot):
    """Velocity of the SLERP path toward ``z_1`` seen from ``z_t``.

    Equals ``alpha_dot / (1 - alpha) * log_{z_t}(z_1)``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha >= 1.0):
        raise AlphaAtOne("conditional velocity is singular at alpha >= 1")
    if np.any(alpha < 0.0):
        raise ParameterOutOfRange("alpha must be >= 0")
    coef = np.asarray(alpha_dot, dtype=np.float64) / (1.0 - alpha)
    return coef[..., None] * log_map(z_t, z_1)


def project_tangent(p, v):
    """Remove the component of ``v`` along ``p``."""
    return v - _dot(p, v)[..., None] * p
