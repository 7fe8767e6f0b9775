"""Training loop: noisy latents by SLERP, cross-entropy, Adam, EMA and refits."""

from __future__ import annotations

import io
import json
import time
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _layers as F
from .codebook import Codebook, reproject_rows
from .denoiser import Denoiser, DenoiserConfig
from .exceptions import (
    IncompatibleCheckpoint,
    InsufficientData,
    NonFiniteLoss,
    ParameterOutOfRange,
    ShapeMismatch,
)
from .geometry import sample_uniform, slerp, slerp_vjp
from .schedule import LossBuffer, RefitParams, RefitState, Schedule, adaptive_refit

CHECKPOINT_VERSION = 1
CODEBOOK_KEY = "codebook"


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 1000
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    ema_rate: float = 0.9999
    schedule: Schedule = field(default_factory=Schedule)
    refit: RefitParams | None = None
    reproject_after_step: bool = False
    loss_on_clean: bool = False
    dropout_in_training: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ParameterOutOfRange("lr must be >= 0")
        if not 0.0 <= self.ema_rate < 1.0:
            raise ParameterOutOfRange("ema_rate must lie in [0, 1)")
        if self.batch_size < 1:
            raise ParameterOutOfRange("batch_size must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ParameterOutOfRange("Adam betas must lie in [0, 1)")

    def buffer_capacity(self):
        interval = self.refit.refit_interval if self.refit is not None else 50
        return max(interval * self.batch_size, 1)

    def to_dict(self):
        out = {k: v for k, v in asdict(self).items() if k not in ("schedule", "refit")}
        out["schedule"] = self.schedule.to_dict()
        out["refit"] = None if self.refit is None else asdict(self.refit)
        return out

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        obj["schedule"] = Schedule.from_dict(obj["schedule"])
        if obj.get("refit") is not None:
            obj["refit"] = RefitParams(**obj["refit"])
        return cls(**obj)


@dataclass
class TrainState:
    params: dict
    codebook: Codebook
    m: dict
    v: dict
    ema: dict
    step: int
    buffer: LossBuffer
    schedule: Schedule
    rng: np.random.Generator
    refit_state: RefitState = field(default_factory=RefitState)
    history: list = field(default_factory=list)
    seq_length: int | None = None

    def trainable(self):
        """Parameters plus the raw codebook table, keyed uniformly."""
        out = dict(self.params)
        out[CODEBOOK_KEY] = self.codebook.table
        return out


class Adam:
    """Adaptive-moment optimizer with bias correction, updating in place."""

    def __init__(self, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay

    def init(self, params):
        return {k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()}

    def update(self, params, grads, m, v, step):
        """One update for ``step`` (1-based); arrays in ``params`` are modified."""
        c1 = 1.0 - self.beta1**step
        c2 = 1.0 - self.beta2**step
        for k in sorted(params):
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * params[k]
            m[k] *= self.beta1
            m[k] += (1.0 - self.beta1) * g
            v[k] *= self.beta2
            v[k] += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps)


def make_noisy_latent(x, t, z0, codebook, schedule, clean_mask=None):
    """SLERP each position from noise ``z0`` toward its token embedding.

    ``x`` is ``(L,)`` or ``(B, L)``; ``t`` a scalar or one time per sequence.
    Clean positions are set to their embedding exactly.
    """
    x = np.asarray(x)
    e = codebook.embed(x)
    alpha = np.asarray(schedule.alpha(t), dtype=np.float64)
    if x.ndim == 2:
        alpha = np.broadcast_to(alpha, (x.shape[0],))[:, None]
    z = slerp(z0, e, np.broadcast_to(alpha, x.shape))
    if clean_mask is not None:
        z = np.where(np.asarray(clean_mask, dtype=bool)[..., None], e, z)
    return z


def ce_loss(logits, x, loss_mask):
    """Masked cross-entropy summed over positions and averaged over the batch."""
    return ce_loss_and_grad(logits, x, loss_mask)[0]


def ce_loss_and_grad(logits, x, loss_mask):
    """Return ``(loss, per_sequence_loss, dlogits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    x = np.asarray(x)
    mask = np.asarray(loss_mask, dtype=np.float64)
    if logits.ndim == 2:
        logits, x, mask = logits[None], x[None], mask[None]
    if logits.shape[:-1] != x.shape or x.shape != mask.shape:
        raise ShapeMismatch(f"logits {logits.shape}, tokens {x.shape}, mask {mask.shape} disagree")
    logp = F.log_softmax(logits)
    picked = np.take_along_axis(logp, x[..., None], axis=-1)[..., 0]
    per_seq = -np.sum(mask * picked, axis=-1)
    bsz = logits.shape[0]
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, x[..., None], np.take_along_axis(dlogits, x[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= mask[..., None] / bsz
    return float(per_seq.mean()), per_seq, dlogits


def loss_and_grads(model, params, codebook, x, clean_mask, loss_mask, t, alpha, z0, rng=None):
    """Forward and reverse pass for one batch.

    Returns ``(loss, per_sequence_loss, grads)``; ``grads`` contains an entry
    for the raw codebook table under ``"codebook"``.
    """
    clean = np.asarray(clean_mask, dtype=bool)
    e = codebook.embed(x)
    a = np.broadcast_to(np.asarray(alpha, dtype=np.float64)[:, None], x.shape)
    z_free = slerp(z0, e, a)
    z_t = np.where(clean[..., None], e, z_free)
    logits, cache = model.forward(params, z_t, t, rng)
    loss, per_seq, dlogits = ce_loss_and_grad(logits, x, loss_mask)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss; t range [{np.min(t):.4f}, {np.max(t):.4f}]")
    grads, dz = model.backward(params, cache, dlogits)
    _, de_free = slerp_vjp(z0, e, a, dz)
    de = np.where(clean[..., None], dz, de_free)
    d_hat = np.zeros_like(codebook.table)
    np.add.at(d_hat, x.reshape(-1), de.reshape(-1, de.shape[-1]))
    grads[CODEBOOK_KEY] = codebook.normalize_grad(d_hat)
    return loss, per_seq, grads


def init_state(model, config, rng, codebook=None):
    params = model.init_params(rng)
    if codebook is None:
        codebook = Codebook.random(model.config.vocab_size, model.config.dim, rng)
    state = TrainState(
        params=params,
        codebook=codebook,
        m={},
        v={},
        ema={},
        step=0,
        buffer=LossBuffer(config.buffer_capacity()),
        schedule=config.schedule,
        rng=rng,
    )
    full = state.trainable()
    state.m, state.v = Adam().init(full)
    state.ema = {k: p.copy() for k, p in full.items()}
    return state


def ema_swap(state):
    """EMA shadow as ``(params, codebook)``; training parameters are untouched."""
    params = {k: p.copy() for k, p in state.ema.items() if k != CODEBOOK_KEY}
    return params, Codebook(state.ema[CODEBOOK_KEY].copy(), state.codebook.reproject_after_step)


def base_time(schedule, base, alpha):
    """Time on the base schedule that reaches the same interpolation level."""
    return base.inverse_shape(np.asarray(alpha) / schedule.a_max)


class Trainer:
    """Owns a denoiser, its training configuration and the mutable state."""

    def __init__(self, model, config, state):
        self.model = model
        self.config = config
        self.state = state
        self.optimizer = Adam(config.lr, config.beta1, config.beta2, config.eps, config.weight_decay)
        self._t0 = time.perf_counter()

    @classmethod
    def create(cls, model_config, config, seed=0, codebook=None):
        model = Denoiser(model_config)
        rng = np.random.default_rng(seed)
        return cls(model, config, init_state(model, config, rng, codebook))

    def step(self, x, clean_mask):
        """One optimisation step on the batch ``x`` of shape ``(B, L)``."""
        st, cfg = self.state, self.config
        x = np.asarray(x)
        clean = np.asarray(clean_mask, dtype=bool)
        if clean.ndim == 1:
            clean = np.broadcast_to(clean, x.shape)
        bsz, length = x.shape
        st.seq_length = length
        t = st.rng.random(bsz)
        alpha = np.asarray(st.schedule.alpha(t), dtype=np.float64)
        z0 = sample_uniform(self.model.config.dim, st.rng, (bsz, length))
        loss_mask = np.ones(x.shape) if cfg.loss_on_clean else (~clean).astype(np.float64)
        drop_rng = st.rng if cfg.dropout_in_training and self.model.config.dropout > 0 else None

        loss, per_seq, grads = loss_and_grads(
            self.model, st.params, st.codebook, x, clean, loss_mask, t, alpha, z0, drop_rng
        )

        st.step += 1
        full = st.trainable()
        self.optimizer.update(full, grads, st.m, st.v, st.step)
        if cfg.reproject_after_step or st.codebook.reproject_after_step:
            st.codebook.table[...] = reproject_rows(st.codebook.table)
        r = cfg.ema_rate
        for k, p in full.items():
            st.ema[k] *= r
            st.ema[k] += (1.0 - r) * p

        u = base_time(st.schedule, cfg.schedule, alpha)
        for ti, li in zip(np.atleast_1d(u), per_seq):
            st.buffer.record(ti, li)
        self._maybe_refit()
        st.history.append((st.step, float(np.mean(t)), loss, time.perf_counter() - self._t0))
        return loss

    def _maybe_refit(self):
        st, rp = self.state, self.config.refit
        if rp is None or st.step <= rp.warmup or st.step % rp.refit_interval:
            return
        try:
            st.schedule, st.refit_state = adaptive_refit(st.buffer.copy(), self.config.schedule, rp, st.refit_state)
        except InsufficientData:
            pass

    def fit(self, X, clean_mask, steps=None, callback=None):
        """Run ``steps`` steps drawing minibatches uniformly with replacement."""
        X = np.asarray(X)
        clean = np.asarray(clean_mask, dtype=bool)
        if clean.ndim == 1:
            clean = np.broadcast_to(clean, X.shape)
        steps = self.config.steps if steps is None else steps
        for _ in range(steps):
            idx = self.state.rng.integers(0, len(X), size=self.config.batch_size)
            loss = self.step(X[idx], clean[idx])
            if callback is not None:
                callback(self, loss)
        return self

    def ema_params(self):
        return ema_swap(self.state)

    def save(self, path):
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)


# ------------------------------------------------------------------ checkpoints
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _write(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, trainer):
    """Write a deterministic zip: same state gives the same bytes."""
    st = trainer.state
    groups = {"params": st.params, "ema": st.ema, "adam_m": st.m, "adam_v": st.v}
    manifest = {
        "version": CHECKPOINT_VERSION,
        "model": trainer.model.config.to_dict(),
        "train": trainer.config.to_dict(),
        "schedule": st.schedule.to_dict(),
        "refit_state": st.refit_state.to_dict(),
        "step": st.step,
        "seq_length": st.seq_length,
        "rng": st.rng.bit_generator.state,
        "buffer_capacity": st.buffer.capacity,
        "reproject_after_step": st.codebook.reproject_after_step,
        "arrays": {g: {k: [list(a.shape), a.dtype.str] for k, a in sorted(d.items())} for g, d in groups.items()},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1))
        _write(zf, "codebook.bin", st.codebook.to_bytes())
        for g, d in groups.items():
            for k in sorted(d):
                _write(zf, f"{g}/{k}.npy", _npy_bytes(d[k]))
        bt, bl = st.buffer.arrays()
        _write(zf, "buffer.npy", _npy_bytes(np.column_stack([bt, bl]) if len(bt) else np.empty((0, 2))))


def load_checkpoint(path):
    """Rebuild a :class:`Trainer` that resumes exactly where the file left off."""
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise IncompatibleCheckpoint(f"cannot open checkpoint: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError as exc:
            raise IncompatibleCheckpoint("checkpoint has no manifest") from exc
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise IncompatibleCheckpoint(f"unsupported checkpoint version {manifest.get('version')}")
        groups = {}
        for g, entries in manifest["arrays"].items():
            groups[g] = {}
            for k, (shape, _) in entries.items():
                arr = np.lib.format.read_array(io.BytesIO(zf.read(f"{g}/{k}.npy")), allow_pickle=False)
                if list(arr.shape) != shape:
                    raise IncompatibleCheckpoint(f"array {g}/{k} has shape {arr.shape}, manifest says {shape}")
                groups[g][k] = arr
        codebook = Codebook.from_bytes(zf.read("codebook.bin"), manifest["reproject_after_step"])
        buf_arr = np.lib.format.read_array(io.BytesIO(zf.read("buffer.npy")))

    model = Denoiser(DenoiserConfig(**manifest["model"]))
    config = TrainConfig.from_dict(manifest["train"])
    expected = set(model.init_params(np.random.default_rng(0)))
    if set(groups["params"]) != expected:
        raise IncompatibleCheckpoint("parameter names do not match the model configuration")
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng"]
    buffer = LossBuffer(manifest["buffer_capacity"])
    for ti, li in buf_arr:
        buffer.record(ti, li)
    state = TrainState(
        params=groups["params"],
        codebook=codebook,
        m=groups["adam_m"],
        v=groups["adam_v"],
        ema=groups["ema"],
        step=int(manifest["step"]),
        buffer=buffer,
        schedule=Schedule.from_dict(manifest["schedule"]),
        rng=rng,
        refit_state=RefitState.from_dict(manifest["refit_state"]),
        seq_length=manifest.get("seq_length"),
    )
    return Trainer(model, config, state)
