"""Noise schedule, deterministic DDIM sampling and analytic denoisers.

Timesteps are indexed ``1..T``; ``alpha_bars[0] == 1`` stands for the clean
image so the last DDIM transition lands exactly on the Tweedie estimate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "NoiseSchedule",
    "Denoiser",
    "GaussianAnalyticDenoiser",
    "GmmAnalyticDenoiser",
    "make_schedule",
    "default_schedule",
    "make_ddim_timesteps",
    "initial_noise",
    "tweedie_x0",
    "ddim_step",
    "sample_unconditional",
]

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # betas[t - 1] is beta_t
    alpha_bars: np.ndarray  # length T + 1, alpha_bars[0] == 1

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t])


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linear beta schedule, endpoints inclusive."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    betas.setflags(write=False)
    alpha_bars.setflags(write=False)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


def default_schedule() -> NoiseSchedule:
    return make_schedule()


def make_ddim_timesteps(num_steps: int, T: int) -> list[int]:
    """Descending, evenly strided timesteps starting at ``T``.

    >>> make_ddim_timesteps(4, 1000)
    [1000, 750, 500, 250]
    """
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in [1, {T}], got {num_steps}")
    stride = T // num_steps
    return [T - i * stride for i in range(num_steps)]


class Denoiser(Protocol):
    def predict_eps(self, x_t: np.ndarray, t: int) -> np.ndarray: ...


class GaussianAnalyticDenoiser:
    """Exact MMSE noise prediction for an isotropic Gaussian prior ``N(mean, prior_var I)``."""

    def __init__(self, mean, prior_var: float, schedule: NoiseSchedule):
        if not prior_var > 0:
            raise ValueError(f"prior_var must be positive, got {prior_var}")
        self.mean = np.asarray(mean, dtype=np.float64)
        self.prior_var = float(prior_var)
        self.schedule = schedule

    @property
    def shape(self):
        return self.mean.shape

    def posterior_mean(self, x_t, t: int) -> np.ndarray:
        ab = self.schedule.alpha_bar(t)
        s2 = self.prior_var
        return (s2 * np.sqrt(ab) * x_t + (1.0 - ab) * self.mean) / (ab * s2 + (1.0 - ab))

    def predict_eps(self, x_t, t: int) -> np.ndarray:
        ab = self.schedule.alpha_bar(t)
        x0 = self.posterior_mean(x_t, t)
        return (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)


class GmmAnalyticDenoiser:
    """Exact MMSE noise prediction for a mixture of isotropic Gaussians.

    ``components`` is a sequence of ``(weight, mean_image, variance)``.
    """

    def __init__(self, components: Sequence[tuple[float, np.ndarray, float]],
                 schedule: NoiseSchedule):
        if not components:
            raise ValueError("need at least one mixture component")
        weights = np.array([c[0] for c in components], dtype=np.float64)
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        self.weights = weights
        self.means = np.stack([np.asarray(c[1], dtype=np.float64) for c in components])
        self.variances = np.array([c[2] for c in components], dtype=np.float64)
        if np.any(self.variances <= 0):
            raise ValueError("component variances must be positive")
        self.schedule = schedule

    @property
    def shape(self):
        return self.means.shape[1:]

    def responsibilities(self, x_t, t: int) -> np.ndarray:
        ab = self.schedule.alpha_bar(t)
        d = x_t.size
        marg_var = ab * self.variances + (1.0 - ab)
        sq = np.sum((x_t[None] - np.sqrt(ab) * self.means) ** 2, axis=tuple(range(1, x_t.ndim + 1)))
        logp = np.log(self.weights) - 0.5 * d * np.log(2 * np.pi * marg_var) - sq / (2 * marg_var)
        return np.exp(logp - logsumexp(logp))

    def posterior_mean(self, x_t, t: int) -> np.ndarray:
        ab = self.schedule.alpha_bar(t)
        r = self.responsibilities(x_t, t)
        out = np.zeros_like(x_t, dtype=np.float64)
        for rk, mk, vk in zip(r, self.means, self.variances):
            out += rk * (vk * np.sqrt(ab) * x_t + (1.0 - ab) * mk) / (ab * vk + (1.0 - ab))
        return out

    def predict_eps(self, x_t, t: int) -> np.ndarray:
        ab = self.schedule.alpha_bar(t)
        return (x_t - np.sqrt(ab) * self.posterior_mean(x_t, t)) / np.sqrt(1.0 - ab)


def tweedie_x0(x_t, eps, alpha_bar_t: float) -> np.ndarray:
    if not alpha_bar_t > 0:
        raise ValueError(f"alpha_bar_t must be positive, got {alpha_bar_t}")
    return (x_t - np.sqrt(1.0 - alpha_bar_t) * eps) / np.sqrt(alpha_bar_t)


def ddim_step(x_t, x0hat, eps, alpha_bar_prev: float) -> np.ndarray:
    """Deterministic (eta = 0) DDIM transition to ``alpha_bar_prev``."""
    if not 0 < alpha_bar_prev <= 1:
        raise ValueError(f"alpha_bar_prev must be in (0, 1], got {alpha_bar_prev}")
    if alpha_bar_prev == 1.0:
        return np.array(x0hat, dtype=np.float64, copy=True)
    return np.sqrt(alpha_bar_prev) * x0hat + np.sqrt(1.0 - alpha_bar_prev) * eps


def initial_noise(shape, seed: int) -> np.ndarray:
    """``x_T``: standard normal draws from ``numpy.random.default_rng(seed)``."""
    return np.random.default_rng(seed).standard_normal(tuple(shape))


def _resolve_shape(denoiser, shape):
    if shape is not None:
        return tuple(shape)
    try:
        return tuple(denoiser.shape)
    except AttributeError:
        raise ValueError("shape is required for denoisers without a .shape attribute") from None


def sample_unconditional(denoiser: Denoiser, schedule: NoiseSchedule, num_steps: int,
                         seed: int, shape=None, trajectory: list | None = None) -> np.ndarray:
    """Unguided DDIM sample; ``trajectory`` (if given) receives ``(t, x_t)`` per retained step."""
    x = initial_noise(_resolve_shape(denoiser, shape), seed)
    timesteps = make_ddim_timesteps(num_steps, schedule.T)
    x0 = x
    for i, t in enumerate(timesteps):
        if trajectory is not None:
            trajectory.append((t, x))
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        eps = denoiser.predict_eps(x, t)
        x0 = tweedie_x0(x, eps, schedule.alpha_bar(t))
        x = ddim_step(x, x0, eps, schedule.alpha_bar(t_prev))
    return x0
