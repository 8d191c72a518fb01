"""Per-timestep noise schedule for the joint corruption process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance coefficients for T timesteps.

    ``beta[t-1]`` is the noise variance added at step t; ``alpha = 1 - beta``
    and ``alpha_bar`` is the running product of alpha. ``sigma2[t-1]`` is the
    reverse-step variance ((1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)) * beta_t
    with the convention alpha_bar_0 = 1, so sigma2[0] == 0.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    @property
    def timesteps(self) -> int:
        return len(self.beta)

    def check(self, t: int) -> None:
        if not 1 <= t <= self.timesteps:
            raise ValueError(f"timestep {t} outside [1, {self.timesteps}]")


def make_linear_schedule(timesteps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly interpolated beta schedule with derived coefficients."""
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if timesteps == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    return schedule_from_betas(beta)


def schedule_from_betas(beta: np.ndarray) -> NoiseSchedule:
    beta = np.array(beta, dtype=np.float64)  # copy: the fields are frozen read-only
    if beta.ndim != 1 or len(beta) < 1:
        raise ValueError("beta must be a non-empty vector")
    if np.any(beta <= 0.0) or np.any(beta >= 1.0):
        raise ValueError("every beta must lie strictly inside (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
    sigma2 = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    for arr in (beta, alpha, alpha_bar, sigma2):
        arr.setflags(write=False)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma2=sigma2)
