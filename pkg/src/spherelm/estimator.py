"""Scikit-learn style front end for training and sampling."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_clean_mask, check_tokens
from .denoiser import DenoiserConfig
from .sampler import SamplerConfig, model_logits_fn, sample
from .schedule import RefitParams, Schedule, truncation_bound
from .trainer import TrainConfig, Trainer


class SphereFlowLM(BaseEstimator):
    """Flow-matching language model on the unit sphere.

    ``fit`` takes integer token sequences ``X`` of shape ``(n, L)`` and an
    optional clean mask marking conditioning positions. ``predict`` fills in
    the non-clean positions by integrating the learned flow.

    Parameters
    ----------
    truncation : None, "auto" or float
        Upper interpolation level used in training. ``"auto"`` uses
        ``1 - alpha_star(delta)`` for the vocabulary and dimension.
    adaptive : bool
        Refit the schedule from observed losses during training.
    """

    def __init__(
        self,
        arch="standard",
        dim=64,
        n_layers=4,
        n_heads=4,
        cond_dim=64,
        dropout=0.0,
        vocab_size=None,
        schedule="linear",
        truncation="auto",
        delta=0.1,
        adaptive=False,
        steps=1000,
        batch_size=32,
        lr=3e-4,
        ema_rate=0.999,
        reproject=False,
        sample_steps=64,
        velocity="exact",
        k=None,
        temperature=1.0,
        random_state=0,
    ):
        self.arch = arch
        self.dim = dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.cond_dim = cond_dim
        self.dropout = dropout
        self.vocab_size = vocab_size
        self.schedule = schedule
        self.truncation = truncation
        self.delta = delta
        self.adaptive = adaptive
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.ema_rate = ema_rate
        self.reproject = reproject
        self.sample_steps = sample_steps
        self.velocity = velocity
        self.k = k
        self.temperature = temperature
        self.random_state = random_state

    def _a_max(self, vocab):
        if self.truncation is None:
            return 1.0
        if self.truncation == "auto":
            return truncation_bound(self.delta, vocab, self.dim)
        return float(self.truncation)

    def fit(self, X, clean_mask=None):
        X = check_tokens(X, self.vocab_size)
        clean = check_clean_mask(clean_mask, X.shape)
        vocab = self.vocab_size or int(X.max()) + 1
        model_cfg = DenoiserConfig(
            arch=self.arch,
            dim=self.dim,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            cond_dim=self.cond_dim,
            vocab_size=vocab,
            dropout=self.dropout,
        )
        train_cfg = TrainConfig(
            batch_size=self.batch_size,
            steps=self.steps,
            lr=self.lr,
            ema_rate=self.ema_rate,
            schedule=Schedule(self.schedule, self._a_max(vocab)),
            refit=RefitParams() if self.adaptive else None,
            reproject_after_step=self.reproject,
        )
        self.trainer_ = Trainer.create(model_cfg, train_cfg, seed=self.random_state)
        self.trainer_.fit(X, clean)
        self.vocab_size_ = vocab
        self.seq_length_ = X.shape[1]
        self.n_steps_ = self.trainer_.state.step
        return self

    @property
    def schedule_(self):
        check_is_fitted(self, "trainer_")
        return self.trainer_.state.schedule

    @property
    def codebook_(self):
        check_is_fitted(self, "trainer_")
        return self.trainer_.ema_params()[1]

    def _sampler_config(self, seed):
        return SamplerConfig(
            steps=self.sample_steps,
            velocity=self.velocity,
            k=self.k,
            temperature=self.temperature,
            schedule=self.schedule_,
            seed=self.random_state if seed is None else seed,
        )

    def predict(self, X, clean_mask=None, seed=None):
        """Generate tokens at every position not flagged clean."""
        check_is_fitted(self, "trainer_")
        X = check_tokens(X, self.vocab_size_)
        clean = check_clean_mask(clean_mask, X.shape)
        params, codebook = self.trainer_.ema_params()
        fn = model_logits_fn(self.trainer_.model, params)
        out, self.last_report_, _ = sample(fn, codebook, self._sampler_config(seed), tokens=X, clean_mask=clean)
        return out

    def sample(self, n_samples=1, length=None, seed=None):
        """Unconditional samples of shape ``(n_samples, length)``."""
        check_is_fitted(self, "trainer_")
        params, codebook = self.trainer_.ema_params()
        fn = model_logits_fn(self.trainer_.model, params)
        length = self.seq_length_ if length is None else length
        out, self.last_report_, _ = sample(fn, codebook, self._sampler_config(seed), n_samples=n_samples, length=length)
        return out

    def transform(self, X):
        """Unit-norm embeddings of the tokens, shape ``(n, L, dim)``."""
        check_is_fitted(self, "trainer_")
        return self.codebook_.embed(check_tokens(X, self.vocab_size_))

    def score(self, X, clean_mask=None):
        """Fraction of sequences reproduced exactly on their non-clean positions."""
        X = check_tokens(X, getattr(self, "vocab_size_", None))
        clean = check_clean_mask(clean_mask, X.shape)
        pred = self.predict(X, clean)
        return float(np.mean(np.all((pred == X) | clean, axis=1)))
