"""Flow matching for language on the unit hypersphere."""

from .codebook import Codebook
from .denoiser import Denoiser, DenoiserConfig
from .estimator import SphereFlowLM
from .sampler import SamplerConfig, sample
from .schedule import Schedule, alpha_star, truncation_bound
from .trainer import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "Codebook",
    "Denoiser",
    "DenoiserConfig",
    "SphereFlowLM",
    "SamplerConfig",
    "sample",
    "Schedule",
    "alpha_star",
    "truncation_bound",
    "TrainConfig",
    "Trainer",
]
