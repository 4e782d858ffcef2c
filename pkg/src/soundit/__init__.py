"""Soundscape-to-landscape latent diffusion with scene and soundscape conditioning."""

from .diffusion import (NoiseSchedule, build_schedule, cfg_combine, forward_marginal,
                        reverse_step, sample_loop, training_loss)
from .model import ConditioningBundle, SounDiT, SounDiTConfig, patchify, unpatchify

__version__ = "0.1.0"

__all__ = [
    "NoiseSchedule", "build_schedule", "cfg_combine", "forward_marginal", "reverse_step",
    "sample_loop", "training_loss", "ConditioningBundle", "SounDiT", "SounDiTConfig",
    "patchify", "unpatchify",
]
