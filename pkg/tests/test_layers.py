"""Finite-difference checks for each hand-written reverse pass."""

import numpy as np
import pytest

from spherelm import _layers as F


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def check(op, back, x, rng, **kw):
    w = rng.standard_normal(op(x)[0].shape)
    _, cache = op(x)
    analytic = back(w, cache)
    numeric = fd_grad(lambda a: np.sum(w * op(a)[0]), x)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8, **kw)


@pytest.mark.parametrize(
    "op,back",
    [
        (F.unit_norm, F.unit_norm_back),
        (F.layer_norm, F.layer_norm_back),
        (F.gelu, F.gelu_back),
        (F.silu, F.silu_back),
    ],
    ids=["unit_norm", "layer_norm", "gelu", "silu"],
)
def test_elementwise_ops(op, back, rng):
    check(op, back, rng.standard_normal((2, 3, 5)), rng)


def test_unit_norm_floor():
    y, cache = F.unit_norm(np.array([1e-8, 0.0]))
    np.testing.assert_allclose(y, [1e-2, 0.0])
    # below the floor the map is linear
    np.testing.assert_allclose(F.unit_norm_back(np.array([1.0, 2.0]), cache), [1e6, 2e6])


def test_linear(rng):
    x, w = rng.standard_normal((2, 3, 4)), rng.standard_normal((5, 4))
    g = rng.standard_normal((2, 3, 5))
    dx, dw = F.linear_back(g, x, w)
    np.testing.assert_allclose(dx, fd_grad(lambda a: np.sum(g * F.linear(a, w)), x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dw, fd_grad(lambda a: np.sum(g * F.linear(x, a)), w), rtol=1e-6, atol=1e-8)


def test_rope_is_rotation_and_back_is_transpose(rng):
    cos, sin = F.rope_tables(5, 6)
    x = rng.standard_normal((1, 2, 5, 6))
    y = F.rope(x, cos, sin)
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-12)
    g = rng.standard_normal(y.shape)
    np.testing.assert_allclose(np.sum(g * y), np.sum(F.rope_back(g, cos, sin) * x), rtol=1e-12)


def test_rope_relative_positions(rng):
    # the score between rotated q and k depends only on the offset
    cos, sin = F.rope_tables(8, 4)
    q, k = rng.standard_normal(4), rng.standard_normal(4)
    qs = F.rope(np.broadcast_to(q, (8, 4)), cos, sin)
    ks = F.rope(np.broadcast_to(k, (8, 4)), cos, sin)
    assert qs[2] @ ks[5] == pytest.approx(qs[4] @ ks[7], rel=1e-12)


@pytest.mark.parametrize("with_drop", [False, True])
def test_attention(with_drop, rng):
    shape = (1, 2, 4, 3)
    q, k, v = (rng.standard_normal(shape) for _ in range(3))
    mask = F.dropout_mask(rng, (1, 2, 4, 4), 0.3) if with_drop else None
    g = rng.standard_normal(shape)

    def f(qq, kk, vv):
        return np.sum(g * F.attention(qq, kk, vv, 0.7, mask)[0])

    _, cache = F.attention(q, k, v, 0.7, mask)
    dq, dk, dv = F.attention_back(g, cache)
    np.testing.assert_allclose(dq, fd_grad(lambda a: f(a, k, v), q), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dk, fd_grad(lambda a: f(q, a, v), k), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(dv, fd_grad(lambda a: f(q, k, a), v), rtol=1e-6, atol=1e-8)


def test_dropout_mask_disabled():
    assert F.dropout_mask(None, (3,), 0.5) is None
    assert F.dropout_mask(np.random.default_rng(0), (3,), 0.0) is None


def test_dropout_mask_scaling(rng):
    m = F.dropout_mask(rng, (200_000,), 0.25)
    assert set(np.unique(m)) <= {0.0, 1.0 / 0.75}
    assert m.mean() == pytest.approx(1.0, abs=0.01)


def test_log_softmax_stable():
    out = F.log_softmax(np.array([1000.0, 0.0]))
    np.testing.assert_allclose(out, [0.0, -1000.0])


def test_timestep_features_distinct():
    f = F.timestep_features([0.0, 0.5], 16)
    assert f.shape == (2, 16)
    np.testing.assert_array_equal(f[0, :8], 1.0)
    assert f[1, 0] != f[0, 0]
