"""Noise schedule, forward noising and the ancestral posterior step.

Steps are 1-based (``t = 1 .. T``); arrays are stored 0-based, so the value
for step ``t`` lives at index ``t - 1``. ``alpha_bar_0`` is taken as 1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step diffusion coefficients.

    ``sigma`` is the posterior standard deviation; ``sigma[t]**2 ==
    (1 - alpha_bar[t-1]) / (1 - alpha_bar[t]) * beta[t]``, and ``sigma`` is
    exactly 0 at ``t = 1``.
    """

    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray
    s0: float = 0.008

    @property
    def T(self):
        return len(self.alpha)

    def _check(self, t):
        if not 1 <= int(t) <= self.T:
            raise ValueError(f"step t={t} outside [1, {self.T}]")
        return int(t)

    def alpha_bar_prev(self, t):
        t = self._check(t)
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def to_dict(self):
        return {
            "schema": 1,
            "type": "NoiseSchedule",
            "T": self.T,
            "s0": self.s0,
            "alpha": self.alpha.tolist(),
            "alpha_bar": self.alpha_bar.tolist(),
            "beta": self.beta.tolist(),
            "sigma": self.sigma.tolist(),
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != 1:
            raise ValueError("unsupported schedule schema version")
        arrays = {k: np.array(d[k], dtype=float) for k in ("alpha", "alpha_bar", "beta", "sigma")}
        return cls(s0=float(d["s0"]), **arrays)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def cosine_alpha_bar(t, T, s0=0.008):
    """Closed-form cosine ``alpha_bar`` before any beta clipping."""
    f = lambda u: np.cos((u / T + s0) / (1 + s0) * np.pi / 2) ** 2
    return f(np.asarray(t, dtype=float)) / f(0.0)


def cosine_schedule(T=1000, s0=0.008, max_beta=0.999):
    if T < 2:
        raise ValueError("a schedule needs T >= 2")
    ab = cosine_alpha_bar(np.arange(T + 1), T, s0)
    beta = np.minimum(1.0 - ab[1:] / ab[:-1], max_beta)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    ab_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma = np.sqrt((1.0 - ab_prev) / (1.0 - alpha_bar) * beta)
    return NoiseSchedule(alpha, alpha_bar, beta, sigma, s0=float(s0))


def forward_diffuse(schedule, x0, t, noise):
    x0 = np.asarray(x0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if x0.shape != noise.shape:
        raise ValueError(f"x0 shape {x0.shape} does not match noise shape {noise.shape}")
    ab = schedule.alpha_bar[schedule._check(t) - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def posterior_coefficients(schedule, t):
    """``(c_xt, c_x0)`` with ``mu_t = c_xt * x_t + c_x0 * x0_hat``."""
    t = schedule._check(t)
    if t == 1:
        return 0.0, 1.0
    a = schedule.alpha[t - 1]
    ab = schedule.alpha_bar[t - 1]
    ab_prev = schedule.alpha_bar[t - 2]
    b = schedule.beta[t - 1]
    return np.sqrt(a) * (1 - ab_prev) / (1 - ab), np.sqrt(ab_prev) * b / (1 - ab)


def posterior_params(schedule, x_t, x0_hat, t):
    """Posterior mean and standard deviation of ``x_{t-1}``; ``(x0_hat, 0)`` at t = 1."""
    x_t = np.asarray(x_t, dtype=float)
    x0_hat = np.asarray(x0_hat, dtype=float)
    t = schedule._check(t)
    if x_t.shape != x0_hat.shape:
        raise ValueError("x_t and x0_hat shapes differ")
    if t == 1:
        return x0_hat.copy(), 0.0
    c_xt, c_x0 = posterior_coefficients(schedule, t)
    return c_xt * x_t + c_x0 * x0_hat, float(schedule.sigma[t - 1])


def vanilla_step(schedule, x_t, x0_hat, t, noise):
    mu, sigma = posterior_params(schedule, x_t, x0_hat, t)
    return mu + sigma * np.asarray(noise, dtype=float)


@dataclass(frozen=True, eq=False)
class DiffusionState:
    x_t: np.ndarray
    t: int
    rng_seed: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.x_t)):
            raise ValueError("x_t must be finite")
        if int(self.t) < 1:
            raise ValueError("t must be >= 1")
