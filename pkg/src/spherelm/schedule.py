"""Noise schedules, truncation bounds, Euler step sizes and adaptive refitting.

A schedule maps time ``t in [0, 1]`` to an interpolation level
``alpha(t) = a_max * shape(t)`` where ``shape`` rises monotonically from 0
to 1. ``alpha = 0`` is pure noise and ``alpha = 1`` the clean embedding.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import BSpline, PchipInterpolator
from sklearn.linear_model import Ridge

from .exceptions import (
    DimensionTooSmall,
    InsufficientData,
    NonFiniteLoss,
    ParameterOutOfRange,
)

KINDS = ("linear", "cosine2", "adaptive")


class Schedule:
    """Monotone map ``t -> alpha`` on ``[0, 1]``.

    Parameters
    ----------
    kind : {"linear", "cosine2", "adaptive"}
    a_max : float
        Truncation bound; ``alpha(1) == a_max``.
    knots : array of shape (n, 2), optional
        ``(t_j, shape_j)`` pairs for the adaptive kind, with ``shape`` in
        ``[0, 1]``. The curve is the monotone cubic (PCHIP) through them.
    """

    def __init__(self, kind="linear", a_max=1.0, knots=None):
        if kind not in KINDS:
            raise ParameterOutOfRange(f"unknown schedule kind {kind!r}")
        a_max = float(a_max)
        if not 0.0 < a_max <= 1.0:
            raise ParameterOutOfRange("a_max must lie in (0, 1]")
        self.kind = kind
        self.a_max = a_max
        self.knots = None
        self._interp = None
        if kind == "adaptive":
            if knots is None:
                raise ParameterOutOfRange("adaptive schedule needs knots")
            knots = np.array(knots, dtype=np.float64)
            _check_knots(knots)
            self.knots = knots
            self._interp = PchipInterpolator(knots[:, 0], knots[:, 1])
        elif knots is not None:
            raise ParameterOutOfRange("knots are only valid for the adaptive kind")

    def __repr__(self):
        extra = f", n_knots={len(self.knots)}" if self.knots is not None else ""
        return f"Schedule(kind={self.kind!r}, a_max={self.a_max!r}{extra})"

    def __eq__(self, other):
        if not isinstance(other, Schedule):
            return NotImplemented
        if (self.kind, self.a_max) != (other.kind, other.a_max):
            return False
        if self.knots is None or other.knots is None:
            return self.knots is other.knots
        return np.array_equal(self.knots, other.knots)

    def shape(self, t):
        """Unit-range profile ``alpha(t) / a_max``."""
        t = _check_time(t)
        if self.kind == "linear":
            out = t.copy()
        elif self.kind == "cosine2":
            out = np.sin(0.5 * np.pi * t) ** 2
        else:
            out = np.clip(self._interp(t), 0.0, 1.0)
        # exact endpoints regardless of rounding in the closed forms
        out = np.where(t == 0.0, 0.0, np.where(t == 1.0, 1.0, out))
        return out[()] if out.ndim == 0 else out

    def alpha(self, t):
        s = self.shape(t)
        if self.a_max == 1.0:
            return s
        return self.a_max * s

    __call__ = alpha

    def alpha_dot(self, t):
        """Time derivative of ``alpha``."""
        t = _check_time(t)
        if self.kind == "linear":
            out = np.ones_like(t)
        elif self.kind == "cosine2":
            out = 0.5 * np.pi * np.sin(np.pi * t)
        else:
            out = self._interp.derivative()(t)
        out = self.a_max * out
        return out[()] if out.ndim == 0 else out

    def inverse_shape(self, s):
        """Time at which ``shape`` reaches ``s`` (smallest such time)."""
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, 1.0)
        if self.kind == "linear":
            out = s.copy()
        elif self.kind == "cosine2":
            out = (2.0 / np.pi) * np.arcsin(np.sqrt(s))
        else:
            grid = np.linspace(0.0, 1.0, 2049)
            vals = np.maximum.accumulate(self._interp(grid))
            out = np.interp(s, vals, grid)
        return out[()] if out.ndim == 0 else out

    def truncate(self, a):
        return truncate(self, a)

    def to_dict(self):
        knots = [] if self.knots is None else self.knots.tolist()
        return {"kind": self.kind, "a_max": self.a_max, "knots": knots}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj):
        knots = obj.get("knots") or None
        return cls(obj["kind"], obj["a_max"], knots)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _check_time(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any((t < 0.0) | (t > 1.0)):
        raise ParameterOutOfRange("time must lie in [0, 1]")
    return t


def _check_knots(knots):
    if knots.ndim != 2 or knots.shape[1] != 2 or len(knots) < 2:
        raise ParameterOutOfRange("knots must have shape (n >= 2, 2)")
    ts, ys = knots[:, 0], knots[:, 1]
    if np.any(np.diff(ts) <= 0):
        raise ParameterOutOfRange("knot times must be strictly increasing")
    if np.any(np.diff(ys) < 0):
        raise ParameterOutOfRange("knot values must be nondecreasing")
    if ts[0] != 0.0 or ts[-1] != 1.0 or ys[0] != 0.0 or ys[-1] != 1.0:
        raise ParameterOutOfRange("knots must run from (0, 0) to (1, 1)")


def alpha(schedule, t):
    return schedule.alpha(t)


def truncate(schedule, a):
    """Same shape, range scaled to ``[0, a]``: ``alpha'(t) = a * shape(t)``."""
    a = float(a)
    if not 0.0 < a <= 1.0:
        raise ParameterOutOfRange("truncation bound must lie in (0, 1]")
    knots = None if schedule.knots is None else schedule.knots.copy()
    return Schedule(schedule.kind, a, knots)


def alpha_star(delta, vocab_size, d):
    """Interpolation level beyond which the target is the nearest codeword.

    Closed form for a random codebook: ``(2/pi) * arcsin(sqrt(2 log(2(V-1)/delta) / d))``.
    """
    if not 0.0 < delta < 1.0:
        raise ParameterOutOfRange("delta must lie in (0, 1)")
    if vocab_size < 2:
        raise ParameterOutOfRange("vocabulary needs at least two tokens")
    arg = 2.0 * math.log(2.0 * (vocab_size - 1) / delta) / d
    if arg > 1.0:
        raise DimensionTooSmall(
            f"d={d} too small for |V|={vocab_size}, delta={delta}: arcsin argument {math.sqrt(arg):.3f} > 1"
        )
    return (2.0 / math.pi) * math.asin(math.sqrt(arg))


def truncation_bound(delta, vocab_size, d):
    """Default truncation ``a = 1 - alpha_star(delta)``."""
    return 1.0 - alpha_star(delta, vocab_size, d)


def euler_step_sizes(schedule, n_steps):
    """Step sizes ``s_n = (alpha_{n+1} - alpha_n) / (1 - alpha_n)`` on ``t_n = n/N``.

    When ``alpha_{n+1}`` reaches 1 the step is a full jump (``s_n = 1``).
    """
    if n_steps < 1:
        raise ParameterOutOfRange("need at least one step")
    a = schedule.alpha(np.arange(n_steps + 1) / n_steps)
    a = np.atleast_1d(a)
    out = np.empty(n_steps)
    for n in range(n_steps):
        if a[n + 1] >= 1.0:
            out[n] = 1.0
        else:
            out[n] = (a[n + 1] - a[n]) / (1.0 - a[n])
    return out


class LossBuffer:
    """FIFO of recent ``(t, loss)`` observations with bounded capacity."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ParameterOutOfRange("capacity must be >= 1")
        self.capacity = int(capacity)
        self._entries = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self._entries)

    @property
    def entries(self):
        return list(self._entries)

    def record(self, t, loss):
        t, loss = float(t), float(loss)
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"non-finite loss {loss} at t={t}")
        if not 0.0 <= t <= 1.0:
            raise ParameterOutOfRange("t must lie in [0, 1]")
        self._entries.append((t, loss))
        return self

    def arrays(self):
        if not self._entries:
            return np.empty(0), np.empty(0)
        arr = np.array(self._entries, dtype=np.float64)
        return arr[:, 0], arr[:, 1]

    def copy(self):
        out = LossBuffer(self.capacity)
        out._entries.extend(self._entries)
        return out


def record_loss(buffer, t, loss):
    return buffer.record(t, loss)


@dataclass
class RefitParams:
    ema_rate: float = 0.9
    uniform_mix: float = 1e-3
    ridge: float = 1.0
    refit_interval: int = 50
    warmup: int = 1000
    grid_size: int = 64
    n_interior_knots: int = 8
    min_points_per_grid: int = 10

    def __post_init__(self):
        if not 0.0 <= self.ema_rate < 1.0:
            raise ParameterOutOfRange("ema_rate must lie in [0, 1)")
        if self.uniform_mix <= 0.0:
            raise ParameterOutOfRange("uniform_mix must be > 0")
        if self.ridge < 0.0:
            raise ParameterOutOfRange("ridge must be >= 0")
        if self.grid_size < 2 or self.refit_interval < 1:
            raise ParameterOutOfRange("grid_size >= 2 and refit_interval >= 1 required")


@dataclass
class RefitState:
    """EMA of schedule knots across refits (``count`` refits so far)."""

    ema: np.ndarray | None = None
    count: int = 0

    def to_dict(self):
        return {"ema": None if self.ema is None else self.ema.tolist(), "count": self.count}

    @classmethod
    def from_dict(cls, obj):
        ema = obj.get("ema")
        return cls(None if ema is None else np.array(ema, dtype=np.float64), int(obj.get("count", 0)))


def fit_loss_profile(t, loss, n_interior_knots=8, ridge=1.0):
    """Ridge-regularised cubic B-spline fit of ``loss`` against ``t`` on [0, 1].

    Returns a callable spline; ``.derivative()`` gives its analytic slope.
    """
    degree = 3
    inner = np.linspace(0.0, 1.0, n_interior_knots + 2)
    knots = np.concatenate([np.zeros(degree), inner, np.ones(degree)])
    basis = BSpline.design_matrix(np.clip(t, 0.0, 1.0), knots, degree).toarray()
    model = Ridge(alpha=ridge, fit_intercept=True).fit(basis, loss)
    # B-splines sum to one, so the intercept folds into every coefficient
    return BSpline(knots, model.coef_ + model.intercept_, degree, extrapolate=False)


def inverse_cdf_times(weights, grid):
    """``F^{-1}(grid)`` for the density ``weights`` sampled on ``grid``.

    ``F`` is the normalised cumulative trapezoid integral, so uniform weights
    give the identity map; the inverse uses monotone PCHIP interpolation.
    """
    cdf = cumulative_trapezoid(weights, grid, initial=0.0)
    cdf = cdf / cdf[-1]
    return np.clip(PchipInterpolator(cdf, grid)(grid), 0.0, 1.0)


def adaptive_refit(buffer, base, params, state=None):
    """Refit the schedule from recent losses; returns ``(schedule, new_state)``.

    Training time is redistributed toward regions where the smoothed loss
    profile rises fastest. ``state`` is not modified.
    """
    state = state if state is not None else RefitState()
    t_obs, l_obs = buffer.arrays()
    need = params.min_points_per_grid * params.grid_size
    if len(t_obs) < need:
        raise InsufficientData(f"need >= {need} observations, have {len(t_obs)}")
    grid = np.linspace(0.0, 1.0, params.grid_size)
    profile = fit_loss_profile(t_obs, l_obs, params.n_interior_knots, params.ridge)
    slope = np.nan_to_num(profile.derivative()(grid))
    g = np.maximum(slope, 0.0)
    w = (1.0 - params.uniform_mix) * g + params.uniform_mix
    warped = inverse_cdf_times(w, grid)
    target = np.asarray(base.shape(warped), dtype=np.float64)

    beta = params.ema_rate
    prev = np.zeros_like(target) if state.ema is None else state.ema
    ema = beta * prev + (1.0 - beta) * target
    count = state.count + 1
    corrected = ema / (1.0 - beta**count)
    corrected = np.maximum.accumulate(np.clip(corrected, 0.0, 1.0))
    corrected[0], corrected[-1] = 0.0, 1.0
    knots = np.column_stack([grid, corrected])
    schedule = Schedule("adaptive", base.a_max, knots)
    return schedule, RefitState(ema=ema, count=count)
