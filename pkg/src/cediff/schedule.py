"""Variance-preserving diffusion schedule with a linear rate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class Schedule:
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_min: float = 1e-3
    t_max: float = 1.0
    n_steps: int = 1000

    def __post_init__(self):
        if not 0 < self.beta_min < self.beta_max:
            raise DomainError(f"need 0 < beta_min < beta_max, got {self.beta_min}, {self.beta_max}")
        if self.t_max != 1.0:
            raise DomainError(f"t_max must be 1, got {self.t_max}")
        if not 0 < self.t_min < self.t_max:
            raise DomainError(f"need 0 < t_min < 1, got {self.t_min}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise DomainError(f"n_steps must be a positive integer, got {self.n_steps}")


def _check_t(t, lo=0.0):
    t_arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t_arr)) or np.any(t_arr < lo) or np.any(t_arr > 1.0):
        raise DomainError(f"t must lie in [{lo}, 1], got {t}")
    return t_arr


def beta(sched: Schedule, t):
    """Instantaneous rate beta(t) = beta_min + t (beta_max - beta_min)."""
    t_arr = _check_t(t)
    out = sched.beta_min + t_arr * (sched.beta_max - sched.beta_min)
    return float(out) if out.ndim == 0 else out


def log_alpha(sched: Schedule, t):
    t_arr = _check_t(t)
    out = -0.25 * t_arr**2 * (sched.beta_max - sched.beta_min) - 0.5 * t_arr * sched.beta_min
    return float(out) if out.ndim == 0 else out


def alpha_sigma(sched: Schedule, t):
    """Return (alpha(t), sigma(t)) from the closed-form integral of beta.

    sigma is computed through expm1 so that it stays accurate as t -> 0.
    """
    la = np.asarray(log_alpha(sched, t))
    a = np.exp(la)
    s = np.sqrt(-np.expm1(2.0 * la))
    if a.ndim == 0:
        return float(a), float(s)
    return a, s


def perturb(sched: Schedule, x0, t, z):
    """Forward VP kernel: alpha(t) x0 + sigma(t) z."""
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x0.shape != z.shape:
        raise ShapeError(f"x0 has shape {x0.shape} but z has shape {z.shape}")
    a, s = alpha_sigma(sched, t)
    return a * x0 + s * z


def time_grid(sched: Schedule, n_steps: int | None = None, t_min: float | None = None):
    """Uniform reverse-time grid: the n_steps+1 times from 1 down to t_min."""
    n = sched.n_steps if n_steps is None else n_steps
    lo = sched.t_min if t_min is None else t_min
    return np.linspace(1.0, lo, n + 1)
