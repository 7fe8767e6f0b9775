"""Transformer denoiser mapping noisy sphere latents and a time to token logits.

Two backbones share one interface:

``standard``
    Pre-norm blocks with bidirectional rotary attention, a GELU MLP, additive
    residuals and adaptive layer-norm time conditioning (shift, scale, gate).
``s_arch``
    Normalized blocks: hidden states stay on the unit sphere, Q/K are
    normalized and rescaled, and each residual is a gated, renormalized
    interpolation whose per-dimension gate depends on the time.

Gradients are computed by an explicit reverse pass over a forward cache; no
autodiff framework is involved.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import _layers as F
from .exceptions import MissingForwardCache, NonFiniteActivation, ParameterOutOfRange, ShapeMismatch

ARCHS = ("standard", "s_arch")


@dataclass
class DenoiserConfig:
    arch: str = "standard"
    dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    cond_dim: int = 64
    vocab_size: int = 8
    mlp_ratio: int = 4
    freq_dim: int = 64
    dropout: float = 0.0
    gamma_init: float = 0.05
    s_qk_init: float = 1.0
    s_z_init: float = 1.0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ParameterOutOfRange(f"arch must be one of {ARCHS}")
        if self.dim % self.n_heads:
            raise ParameterOutOfRange("dim must be divisible by n_heads")
        if (self.dim // self.n_heads) % 2:
            raise ParameterOutOfRange("head dim must be even for rotary encoding")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterOutOfRange("dropout must lie in [0, 1)")

    @property
    def head_dim(self):
        return self.dim // self.n_heads

    @property
    def hidden_dim(self):
        return self.mlp_ratio * self.dim

    @property
    def base_scale(self):
        return 1.0 / np.sqrt(self.dim)

    def to_dict(self):
        return asdict(self)


class Denoiser:
    """Posterior network ``p(x | z_t, t)`` returning ``(B, L, |V|)`` logits."""

    def __init__(self, config):
        self.config = config

    # ------------------------------------------------------------------ init
    def init_params(self, rng):
        c = self.config
        d, dff, dc, fd, v = c.dim, c.hidden_dim, c.cond_dim, c.freq_dim, c.vocab_size
        p = {
            "t_w1": 0.02 * rng.standard_normal((dc, fd)),
            "t_b1": np.zeros(dc),
            "t_w2": 0.02 * rng.standard_normal((dc, dc)),
            "t_b2": np.zeros(dc),
        }
        for i in range(c.n_layers):
            pre = f"blocks.{i}."
            if c.arch == "standard":
                p[pre + "wq"] = rng.standard_normal((d, d)) / np.sqrt(d)
                p[pre + "wk"] = rng.standard_normal((d, d)) / np.sqrt(d)
                p[pre + "wv"] = rng.standard_normal((d, d)) / np.sqrt(d)
                p[pre + "wo"] = rng.standard_normal((d, d)) / np.sqrt(d)
                p[pre + "w_fc"] = rng.standard_normal((dff, d)) / np.sqrt(d)
                p[pre + "w_out"] = rng.standard_normal((d, dff)) / np.sqrt(dff)
                # adaLN-zero: every block starts as the identity
                p[pre + "mod_w"] = np.zeros((6 * d, dc))
                p[pre + "mod_b"] = np.zeros(6 * d)
            else:
                b = c.base_scale
                p[pre + "wq"] = _unit_rows(rng.standard_normal((d, d)))
                p[pre + "wk"] = _unit_rows(rng.standard_normal((d, d)))
                p[pre + "wv"] = _unit_rows(rng.standard_normal((d, d)))
                p[pre + "wo"] = _unit_rows(rng.standard_normal((d, d)).T).T
                p[pre + "w_fc"] = _unit_rows(rng.standard_normal((dff, d)))
                p[pre + "w_out"] = _unit_rows(rng.standard_normal((d, dff)).T).T
                p[pre + "s_qk"] = np.full(d, b)
                p[pre + "s_fc"] = np.ones(dff)
                p[pre + "gamma_a"] = np.full(d, b)
                p[pre + "gamma_m"] = np.full(d, b)
                p[pre + "w_delta"] = np.zeros((2 * d, dc))
        if c.arch == "standard":
            p["final_mod_w"] = np.zeros((2 * d, dc))
            p["final_mod_b"] = np.zeros(2 * d)
            p["lm_head"] = rng.standard_normal((v, d)) / np.sqrt(d)
        else:
            p["lm_head"] = _unit_rows(rng.standard_normal((v, d)))
            p["s_z"] = np.full(v, c.base_scale)
        return p

    # --------------------------------------------------------------- forward
    def __call__(self, params, z, t):
        return self.forward(params, z, t)[0]

    def forward(self, params, z, t, rng=None):
        """Return ``(logits, cache)``.

        ``z`` has shape ``(B, L, d)`` with unit-norm rows; ``t`` is a scalar or
        shape ``(B,)``. Dropout is active only when ``rng`` is given.
        """
        c = self.config
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 2:
            z = z[None]
        if z.ndim != 3 or z.shape[-1] != c.dim:
            raise ShapeMismatch(f"latents must have shape (B, L, {c.dim}), got {z.shape}")
        bsz, length, _ = z.shape
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (bsz,)).copy()
        if np.any((t < 0) | (t > 1)):
            raise ParameterOutOfRange("t must lie in [0, 1]")
        drop = c.dropout if rng is not None else 0.0

        cache = {"shape": z.shape, "drop": drop}
        tau = self._time_forward(params, t, cache)
        cos, sin = F.rope_tables(length, c.head_dim)
        cache["rope"] = (cos, sin)

        h = z
        blocks = []
        for i in range(c.n_layers):
            if c.arch == "standard":
                h, bc = self._std_block(params, f"blocks.{i}.", h, tau, cos, sin, rng, drop)
            else:
                h, bc = self._s_block(params, f"blocks.{i}.", h, tau, cos, sin, rng, drop)
            blocks.append(bc)
        cache["blocks"] = blocks

        if c.arch == "standard":
            fm = tau @ params["final_mod_w"].T + params["final_mod_b"]
            shift, scale = fm[:, : c.dim], fm[:, c.dim :]
            xh, ln = F.layer_norm(h)
            xf = xh * (1.0 + scale[:, None]) + shift[:, None]
            logits = F.linear(xf, params["lm_head"])
            cache["head"] = (xh, ln, xf, scale)
        else:
            sz = params["s_z"] * (c.s_z_init / c.base_scale)
            raw = F.linear(h, params["lm_head"])
            logits = sz * raw
            cache["head"] = (h, raw, sz)
        if not np.all(np.isfinite(logits)):
            raise NonFiniteActivation("non-finite logits in denoiser forward")
        return logits, cache

    def _time_forward(self, params, t, cache):
        feats = F.timestep_features(t, self.config.freq_dim)
        u1 = feats @ params["t_w1"].T + params["t_b1"]
        a1, s1 = F.silu(u1)
        u2 = a1 @ params["t_w2"].T + params["t_b2"]
        tau, s2 = F.silu(u2)
        cache["time"] = (feats, a1, s1, s2)
        return tau

    def _attention_inputs(self, params, pre, x, cos, sin):
        c = self.config
        q = F.split_heads(F.linear(x, params[pre + "wq"]), c.n_heads)
        k = F.split_heads(F.linear(x, params[pre + "wk"]), c.n_heads)
        v = F.split_heads(F.linear(x, params[pre + "wv"]), c.n_heads)
        return F.rope(q, cos, sin), F.rope(k, cos, sin), v

    def _std_block(self, params, pre, h, tau, cos, sin, rng, drop):
        c = self.config
        d = c.dim
        mod = tau @ params[pre + "mod_w"].T + params[pre + "mod_b"]
        sa, ca, ga, sm, cm, gm = (mod[:, j * d : (j + 1) * d] for j in range(6))

        xh1, ln1 = F.layer_norm(h)
        x1 = xh1 * (1.0 + ca[:, None]) + sa[:, None]
        q, k, v = self._attention_inputs(params, pre, x1, cos, sin)
        mask = F.dropout_mask(rng, q.shape[:-1] + (q.shape[-2],), drop)
        o, att = F.attention(q, k, v, 1.0 / np.sqrt(c.head_dim), mask)
        om = F.merge_heads(o)
        h_a = F.linear(om, params[pre + "wo"])
        h1 = h + ga[:, None] * h_a

        xh2, ln2 = F.layer_norm(h1)
        x2 = xh2 * (1.0 + cm[:, None]) + sm[:, None]
        u = F.linear(x2, params[pre + "w_fc"])
        act, gc = F.gelu(u)
        mmask = F.dropout_mask(rng, act.shape, drop)
        act_d = act if mmask is None else act * mmask
        h_m = F.linear(act_d, params[pre + "w_out"])
        h2 = h1 + gm[:, None] * h_m
        bc = dict(xh1=xh1, ln1=ln1, x1=x1, ca=ca, ga=ga, att=att, om=om, h_a=h_a,
                  xh2=xh2, ln2=ln2, x2=x2, cm=cm, gm=gm, gc=gc, mmask=mmask,
                  act_d=act_d, h_m=h_m)
        return h2, bc

    def _residual(self, h, h_layer, gate):
        hn, c_h = F.unit_norm(h)
        ln, c_l = F.unit_norm(h_layer)
        pre = hn + gate[:, None] * (ln - hn)
        out, c_o = F.unit_norm(pre)
        return out, (hn, ln, gate, c_h, c_l, c_o)

    def _residual_back(self, g, rc):
        hn, ln, gate, c_h, c_l, c_o = rc
        dpre = F.unit_norm_back(g, c_o)
        dgate = np.sum(dpre * (ln - hn), axis=1)
        dh = F.unit_norm_back(dpre * (1.0 - gate[:, None]), c_h)
        dl = F.unit_norm_back(dpre * gate[:, None], c_l)
        return dh, dl, dgate

    def _s_block(self, params, pre, h, tau, cos, sin, rng, drop):
        c = self.config
        d, b = c.dim, c.base_scale
        delta = tau @ params[pre + "w_delta"].T
        gscale = c.gamma_init / b
        r_a = params[pre + "gamma_a"] * gscale + delta[:, :d]
        r_m = params[pre + "gamma_m"] * gscale + delta[:, d:]
        g_a, g_m = np.abs(r_a), np.abs(r_m)

        q, k, v = self._attention_inputs(params, pre, h, cos, sin)
        qn, cq = F.unit_norm(q)
        kn, ck = F.unit_norm(k)
        sqk = (params[pre + "s_qk"] * (c.s_qk_init / b)).reshape(c.n_heads, 1, c.head_dim)
        mask = F.dropout_mask(rng, q.shape[:-1] + (q.shape[-2],), drop)
        o, att = F.attention(sqk * qn, sqk * kn, v, np.sqrt(c.head_dim), mask)
        om = F.merge_heads(o)
        h_a = F.linear(om, params[pre + "wo"])
        h1, rc_a = self._residual(h, h_a, g_a)

        u = F.linear(h1, params[pre + "w_fc"])
        a_in = np.sqrt(d) * params[pre + "s_fc"] * u
        act, gc = F.gelu(a_in)
        mmask = F.dropout_mask(rng, act.shape, drop)
        act_d = act if mmask is None else act * mmask
        h_m = F.linear(act_d, params[pre + "w_out"])
        h2, rc_m = self._residual(h1, h_m, g_m)
        bc = dict(x_in=h, r_a=r_a, r_m=r_m, qn=qn, kn=kn, cq=cq, ck=ck, sqk=sqk, att=att,
                  om=om, h1=h1, rc_a=rc_a, u=u, gc=gc, mmask=mmask, act_d=act_d, rc_m=rc_m)
        return h2, bc

    # -------------------------------------------------------------- backward
    def backward(self, params, cache, dlogits):
        """Reverse pass. Returns ``(grads, dz)`` with ``grads`` keyed like ``params``."""
        if not cache or "blocks" not in cache:
            raise MissingForwardCache("backward needs the cache returned by forward")
        c = self.config
        dlogits = np.asarray(dlogits, dtype=np.float64)
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        bsz = cache["shape"][0]
        dtau = np.zeros((bsz, c.cond_dim))

        if c.arch == "standard":
            xh, ln, xf, scale = cache["head"]
            dxf, grads["lm_head"] = F.linear_back(dlogits, xf, params["lm_head"])
            dshift = dxf.sum(axis=1)
            dscale = np.sum(dxf * xh, axis=1)
            dh = F.layer_norm_back(dxf * (1.0 + scale[:, None]), ln)
            dfm = np.concatenate([dshift, dscale], axis=1)
            grads["final_mod_w"] = dfm.T @ self._tau(cache)
            grads["final_mod_b"] = dfm.sum(axis=0)
            dtau += dfm @ params["final_mod_w"]
        else:
            h, raw, sz = cache["head"]
            grads["s_z"] = np.sum(dlogits * raw, axis=(0, 1)) * (c.s_z_init / c.base_scale)
            dh, grads["lm_head"] = F.linear_back(dlogits * sz, h, params["lm_head"])

        cos, sin = cache["rope"]
        for i in reversed(range(c.n_layers)):
            pre = f"blocks.{i}."
            bc = cache["blocks"][i]
            if c.arch == "standard":
                dh = self._std_block_back(params, pre, bc, dh, dtau, grads, cache, cos, sin)
            else:
                dh = self._s_block_back(params, pre, bc, dh, dtau, grads, cache, cos, sin)

        self._time_backward(params, cache, dtau, grads)
        return grads, dh

    def _tau(self, cache):
        _, _, _, s2 = cache["time"]
        return s2[0] * s2[1]

    def _time_backward(self, params, cache, dtau, grads):
        feats, a1, s1, s2 = cache["time"]
        du2 = F.silu_back(dtau, s2)
        da1, grads["t_w2"] = F.linear_back(du2, a1, params["t_w2"])
        grads["t_b2"] = du2.sum(axis=0)
        du1 = F.silu_back(da1, s1)
        _, grads["t_w1"] = F.linear_back(du1, feats, params["t_w1"])
        grads["t_b1"] = du1.sum(axis=0)

    def _attention_inputs_back(self, params, pre, x, dq, dk, dv, cos, sin, grads):
        dq = F.merge_heads(F.rope_back(dq, cos, sin))
        dk = F.merge_heads(F.rope_back(dk, cos, sin))
        dv = F.merge_heads(dv)
        dx_q, grads[pre + "wq"] = F.linear_back(dq, x, params[pre + "wq"])
        dx_k, grads[pre + "wk"] = F.linear_back(dk, x, params[pre + "wk"])
        dx_v, grads[pre + "wv"] = F.linear_back(dv, x, params[pre + "wv"])
        return dx_q + dx_k + dx_v

    def _std_block_back(self, params, pre, bc, dh2, dtau, grads, cache, cos, sin):
        c = self.config
        # MLP branch
        dgm = np.sum(dh2 * bc["h_m"], axis=1)
        dh_m = dh2 * bc["gm"][:, None]
        dact_d, grads[pre + "w_out"] = F.linear_back(dh_m, bc["act_d"], params[pre + "w_out"])
        dact = dact_d if bc["mmask"] is None else dact_d * bc["mmask"]
        du = F.gelu_back(dact, bc["gc"])
        dx2, grads[pre + "w_fc"] = F.linear_back(du, bc["x2"], params[pre + "w_fc"])
        dsm = dx2.sum(axis=1)
        dcm = np.sum(dx2 * bc["xh2"], axis=1)
        dh1 = dh2 + F.layer_norm_back(dx2 * (1.0 + bc["cm"][:, None]), bc["ln2"])
        # attention branch
        dga = np.sum(dh1 * bc["h_a"], axis=1)
        dh_a = dh1 * bc["ga"][:, None]
        dom, grads[pre + "wo"] = F.linear_back(dh_a, bc["om"], params[pre + "wo"])
        do = F.split_heads(dom, c.n_heads)
        dq, dk, dv = F.attention_back(do, bc["att"])
        dx1 = self._attention_inputs_back(params, pre, bc["x1"], dq, dk, dv, cos, sin, grads)
        dsa = dx1.sum(axis=1)
        dca = np.sum(dx1 * bc["xh1"], axis=1)
        dh = dh1 + F.layer_norm_back(dx1 * (1.0 + bc["ca"][:, None]), bc["ln1"])

        dmod = np.concatenate([dsa, dca, dga, dsm, dcm, dgm], axis=1)
        grads[pre + "mod_w"] = dmod.T @ self._tau(cache)
        grads[pre + "mod_b"] = dmod.sum(axis=0)
        dtau += dmod @ params[pre + "mod_w"]
        return dh

    def _s_block_back(self, params, pre, bc, dh2, dtau, grads, cache, cos, sin):
        c = self.config
        d, b = c.dim, c.base_scale
        # MLP residual
        dh1, dh_m, dg_m = self._residual_back(dh2, bc["rc_m"])
        dact_d, grads[pre + "w_out"] = F.linear_back(dh_m, bc["act_d"], params[pre + "w_out"])
        dact = dact_d if bc["mmask"] is None else dact_d * bc["mmask"]
        da_in = F.gelu_back(dact, bc["gc"])
        s_fc = params[pre + "s_fc"]
        grads[pre + "s_fc"] = np.sqrt(d) * np.sum(da_in * bc["u"], axis=(0, 1))
        du = np.sqrt(d) * s_fc * da_in
        dx, grads[pre + "w_fc"] = F.linear_back(du, bc["h1"], params[pre + "w_fc"])
        dh1 = dh1 + dx
        # attention residual
        dh, dh_a, dg_a = self._residual_back(dh1, bc["rc_a"])
        dom, grads[pre + "wo"] = F.linear_back(dh_a, bc["om"], params[pre + "wo"])
        do = F.split_heads(dom, c.n_heads)
        dq2, dk2, dv = F.attention_back(do, bc["att"])
        sqk = bc["sqk"]
        dsqk = np.sum(dq2 * bc["qn"], axis=(0, 2)) + np.sum(dk2 * bc["kn"], axis=(0, 2))
        grads[pre + "s_qk"] = dsqk.reshape(-1) * (c.s_qk_init / b)
        dq = F.unit_norm_back(dq2 * sqk, bc["cq"])
        dk = F.unit_norm_back(dk2 * sqk, bc["ck"])
        dh = dh + self._attention_inputs_back(params, pre, bc["x_in"], dq, dk, dv, cos, sin, grads)

        # gates: |gamma * scale + delta(t)|, subgradient 0 at exactly 0
        gscale = c.gamma_init / b
        dr_a = dg_a * np.sign(bc["r_a"])
        dr_m = dg_m * np.sign(bc["r_m"])
        grads[pre + "gamma_a"] = dr_a.sum(axis=0) * gscale
        grads[pre + "gamma_m"] = dr_m.sum(axis=0) * gscale
        ddelta = np.concatenate([dr_a, dr_m], axis=1)
        grads[pre + "w_delta"] = ddelta.T @ self._tau(cache)
        dtau += ddelta @ params[pre + "w_delta"]
        return dh


def _unit_rows(w):
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def timestep_embedding(params, t, freq_dim):
    """Conditioning vector ``SiLU(MLP(sinusoid(t)))`` for each time in ``t``."""
    feats = F.timestep_features(t, freq_dim)
    a1, _ = F.silu(feats @ params["t_w1"].T + params["t_b1"])
    tau, _ = F.silu(a1 @ params["t_w2"].T + params["t_b2"])
    return tau


def param_count(params):
    return int(sum(v.size for v in params.values()))
