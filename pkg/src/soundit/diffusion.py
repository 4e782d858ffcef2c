"""Latent diffusion core: noise schedule, forward/reverse process, guidance.

Timesteps are 1-based throughout: ``t`` in ``[1, T]`` indexes ``alpha[t - 1]``.
``t = 0`` denotes the clean latent.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
import torch
from torch import Tensor

Generators = Union[torch.Generator, Sequence[torch.Generator]]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def beta(self) -> np.ndarray:
        return 1.0 - self.alpha

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def to_dict(self) -> dict:
        return {"T": self.T, "alpha": self.alpha.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        alpha = np.asarray(d["alpha"], dtype=np.float64)
        return cls(T=int(d["T"]), alpha=alpha, alpha_bar=np.cumprod(alpha))


def build_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear-in-beta schedule with ``alpha_t = 1 - beta_t``."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 <= beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 <= beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    T = int(T)
    if T == 1:
        beta = np.array([beta_min], dtype=np.float64)
    else:
        beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(T=T, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _check_t(t, schedule: NoiseSchedule) -> Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() == 0 or int(t.min()) < 1 or int(t.max()) > schedule.T:
        raise ValueError(f"timestep out of range [1, {schedule.T}]: {t.tolist()}")
    return t


def _per_sample(values: np.ndarray, t: Tensor, ref: Tensor) -> Tensor:
    """Gather ``values[t-1]`` and reshape to broadcast against ``ref``."""
    v = torch.as_tensor(values, dtype=torch.float64)[t - 1].to(ref.dtype)
    if v.ndim == 0:
        return v
    return v.reshape(-1, *([1] * (ref.ndim - 1)))


def forward_marginal(z0: Tensor, t, noise: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Sample ``z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise``.

    ``t`` is either a scalar or one step index per batch row.
    """
    if noise.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z0.shape)}")
    t = _check_t(t, schedule)
    ab = _per_sample(schedule.alpha_bar, t, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * noise


def forward_step(z_prev: Tensor, t: int, noise: Tensor, schedule: NoiseSchedule) -> Tensor:
    """One transition of the Markov chain q(z_t | z_{t-1})."""
    t = int(_check_t(t, schedule))
    a = float(schedule.alpha[t - 1])
    return np.sqrt(a) * z_prev + np.sqrt(1.0 - a) * noise


def posterior_coefficients(t: int, schedule: NoiseSchedule) -> tuple[float, float, float]:
    """Return ``(1/sqrt(alpha_t), beta_t/sqrt(1-abar_t), posterior variance)``."""
    a = float(schedule.alpha[t - 1])
    beta = 1.0 - a
    ab = float(schedule.alpha_bar[t - 1])
    if beta == 0.0:
        return 1.0 / np.sqrt(a), 0.0, 0.0
    eps_coef = beta / np.sqrt(1.0 - ab)
    var = (1.0 - schedule.alpha_bar_prev(t)) / (1.0 - ab) * beta
    return 1.0 / np.sqrt(a), eps_coef, var


def _randn_like(z: Tensor, rng: Generators) -> Tensor:
    if isinstance(rng, torch.Generator):
        return torch.randn(z.shape, generator=rng, dtype=z.dtype)
    if len(rng) != z.shape[0]:
        raise ValueError(f"need one generator per chain: {len(rng)} vs batch {z.shape[0]}")
    return torch.stack([torch.randn(z.shape[1:], generator=g, dtype=z.dtype) for g in rng])


def reverse_step(z_t: Tensor, t: int, eps_hat: Tensor, schedule: NoiseSchedule,
                 rng: Generators | None = None) -> Tensor:
    """Ancestral step z_t -> z_{t-1} with the fixed posterior variance.

    No noise is injected at ``t = 1``.
    """
    t = int(_check_t(t, schedule))
    if eps_hat.shape != z_t.shape:
        raise ValueError(f"eps_hat shape {tuple(eps_hat.shape)} != latent shape {tuple(z_t.shape)}")
    if not torch.isfinite(eps_hat).all():
        raise FloatingPointError(f"non-finite noise prediction at t={t}")
    inv_sqrt_a, eps_coef, var = posterior_coefficients(t, schedule)
    mean = inv_sqrt_a * (z_t - eps_coef * eps_hat)
    if t == 1 or var == 0.0:
        return mean
    if rng is None:
        raise ValueError("rng required for t > 1")
    return mean + np.sqrt(var) * _randn_like(z_t, rng)


def cfg_combine(eps_uncond: Tensor, eps_cond: Tensor, s: float) -> Tensor:
    """Classifier-free guidance ``eps_u + s (eps_c - eps_u)``.

    Evaluated as ``(1 - s) eps_u + s eps_c`` so that s=0 and s=1 return the
    respective branch bit for bit.
    """
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(f"shape mismatch {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    s = float(s)
    if not np.isfinite(s):
        raise ValueError(f"guidance scale must be finite, got {s}")
    return (1.0 - s) * eps_uncond + s * eps_cond


def training_loss(model: Callable, z0: Tensor, conditions, t, noise: Tensor,
                  schedule: NoiseSchedule) -> Tensor:
    """Epsilon-prediction MSE at ``forward_marginal(z0, t, noise)``."""
    t = _check_t(t, schedule)
    if t.ndim == 0:
        t = t.expand(z0.shape[0])
    z_t = forward_marginal(z0, t, noise, schedule)
    loss = torch.mean((model(z_t, t, conditions) - noise) ** 2)
    if not torch.isfinite(loss):
        raise FloatingPointError("training loss is not finite")
    return loss


@torch.no_grad()
def sample_loop(model: Callable, conditions, schedule: NoiseSchedule, s: float,
                rng: Generators, shape: Sequence[int], dtype=torch.float32,
                guided: bool = True, callback: Callable | None = None) -> Tensor:
    """Ancestral sampling from ``z_T ~ N(0, I)`` down to ``z_0``.

    With ``guided=True`` each step evaluates the model under ``conditions``
    and under ``conditions.null()`` and mixes them with ``cfg_combine``.
    ``guided=False`` is the plain conditional sampler.
    """
    z = _randn_like(torch.empty(tuple(shape), dtype=dtype), rng)
    uncond = conditions.null() if guided else None
    batch = z.shape[0]
    for t in range(schedule.T, 0, -1):
        tt = torch.full((batch,), t, dtype=torch.long)
        eps_c = model(z, tt, conditions)
        if guided:
            eps = cfg_combine(model(z, tt, uncond), eps_c, s)
        else:
            eps = eps_c
        z = reverse_step(z, t, eps, schedule, rng)
        if callback is not None:
            callback(t, z)
    return z
