"""Diffusion noise schedule, closed-form forward noising and reverse-step coefficients.

Notation: ``alpha_bar[t]`` is the cumulative product of ``alpha = 1 - beta``.
The closed-form forward marginal is::

    x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * noise

and with noise prediction ``eps_hat`` one reverse step is::

    x_{t-1} = (x_t - beta[t] / sqrt(1 - alpha_bar[t]) * eps_hat) / sqrt(alpha[t]) + sigma[t] * z
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SIGMA_MODES = ("beta", "posterior")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    sigma_mode: str = "beta"

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigError("schedule needs at least one step")
        if not np.all((beta > 0) & (beta < 1)):
            raise ConfigError("every beta must lie in (0, 1)")
        if self.sigma_mode not in SIGMA_MODES:
            raise ConfigError(f"sigma mode must be one of {SIGMA_MODES}")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for arr in (alpha, alpha_bar):
            arr.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def check_index(self, t) -> np.ndarray:
        t = np.asarray(t)
        if t.size and (t.min() < 0 or t.max() >= self.T):
            bad = int(t.min()) if t.min() < 0 else int(t.max())
            raise IndexError(f"diffusion step t={bad} outside [0, T={self.T})")
        return t.astype(np.int64)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1]),
                "sigma": self.sigma_mode}


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                         sigma_mode: str = "beta") -> NoiseSchedule:
    """Betas linearly spaced from ``beta_start`` to ``beta_end`` inclusive."""
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64), sigma_mode)


def schedule_from_config(cfg: dict) -> NoiseSchedule:
    return make_linear_schedule(cfg.get("T", 1000), cfg.get("beta_start", 1e-4),
                                cfg.get("beta_end", 0.02), cfg.get("sigma", "beta"))


def q_sample(x0, t, noise, sched: NoiseSchedule) -> np.ndarray:
    """Draw ``x_t`` given ``x0`` in closed form; ``t`` has one entry per batch element."""
    x0 = np.asarray(x0)
    t = sched.check_index(np.atleast_1d(t))
    noise = np.asarray(noise, dtype=x0.dtype)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} differs from x0 shape {x0.shape}")
    view = (-1,) + (1,) * (x0.ndim - 1)
    ab = sched.alpha_bar[t].reshape(view)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise).astype(x0.dtype, copy=False)


def forward_step(x_prev, t: int, noise, sched: NoiseSchedule) -> np.ndarray:
    """One transition ``x_{t-1} -> x_t`` of the Markov forward chain."""
    t = int(sched.check_index(t))
    return np.sqrt(sched.alpha[t]) * np.asarray(x_prev) + np.sqrt(sched.beta[t]) * np.asarray(noise)


def reverse_mean_coeffs(t: int, sched: NoiseSchedule) -> tuple:
    """``(c_xt, c_eps, sigma)`` with ``x_{t-1} = c_xt*x_t - c_eps*eps_hat + sigma*z``.

    ``sigma`` is ``sqrt(beta[t])`` by default or the posterior standard
    deviation when the schedule's ``sigma_mode`` is ``"posterior"``.  The
    caller must draw ``z = 0`` at ``t = 0``.
    """
    t = int(sched.check_index(t))
    alpha, beta, ab = sched.alpha[t], sched.beta[t], sched.alpha_bar[t]
    c_xt = 1.0 / np.sqrt(alpha)
    c_eps = beta / (np.sqrt(1.0 - ab) * np.sqrt(alpha))
    if sched.sigma_mode == "beta":
        var = beta
    else:
        ab_prev = sched.alpha_bar[t - 1] if t > 0 else 1.0
        var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return float(c_xt), float(c_eps), float(np.sqrt(var))
