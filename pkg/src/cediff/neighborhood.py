"""Diffused neighborhood scores that keep counterfactuals near their source.

Two neighborhoods are supported: an isotropic Gaussian and a factorized
Laplace-type ("Boltzmann") density whose diffused score is approximated by a
scaled hardtanh. The exact 1D diffused Boltzmann score is also provided; it is
written in terms of erfcx so that no exponential is ever formed explicitly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc, erfcx

from .errors import ConfigError, DomainError, RangeError, ShapeError
from .schedule import Schedule, alpha_sigma

GAUSSIAN = "gaussian"
BOLTZMANN = "boltzmann"
VARIANTS = (GAUSSIAN, BOLTZMANN)

SQRT2 = np.sqrt(2.0)
SQRT_PI = np.sqrt(np.pi)

# Past this point exp(-u^2)/erfc(u) is continued linearly with slope sqrt(pi).
ERFC_RATIO_SWITCH = 20.0
_RATIO_OFFSET = 1.0 / float(erfcx(ERFC_RATIO_SWITCH)) - SQRT_PI * ERFC_RATIO_SWITCH

# |z| beyond which z**2 inside log(erfcx) is no longer representable.
_MAX_ERFC_ARG = 1e150


@dataclass(frozen=True)
class NeighborhoodSpec:
    variant: str
    mu_ce: np.ndarray
    sigma_ce: float
    w: float = 0.0

    def __post_init__(self):
        variant = str(self.variant).lower()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown neighborhood variant {self.variant!r}; expected one of {VARIANTS}")
        mu = np.asarray(self.mu_ce, dtype=np.float64)
        if not np.all(np.isfinite(mu)):
            raise ConfigError("mu_ce must be finite in every coordinate")
        if not (np.isfinite(self.sigma_ce) and self.sigma_ce > 0):
            raise ConfigError(f"sigma_ce must be > 0, got {self.sigma_ce}")
        object.__setattr__(self, "variant", variant)
        object.__setattr__(self, "mu_ce", mu)
        object.__setattr__(self, "sigma_ce", float(self.sigma_ce))


def _positive_time(sched, t):
    if not 0.0 < t <= 1.0:
        raise DomainError(f"t must lie in (0, 1], got {t}")
    return alpha_sigma(sched, t)


def _centered(x_t, mu_ce, a):
    x_t = np.asarray(x_t, dtype=np.float64)
    try:
        return x_t - a * np.broadcast_to(mu_ce, x_t.shape)
    except ValueError:
        raise ShapeError(f"x_t {x_t.shape} does not match mu_ce {np.shape(mu_ce)}") from None


def gaussian_neighborhood_score(sched: Schedule, spec: NeighborhoodSpec, x_t, t):
    """Score of N(alpha mu_ce, (alpha^2 sigma_ce^2 + sigma_t^2) I)."""
    if spec.variant != GAUSSIAN:
        raise ConfigError(f"expected a Gaussian neighborhood, got {spec.variant!r}")
    a, s = alpha_sigma(sched, t)
    return -_centered(x_t, spec.mu_ce, a) / (a * a * spec.sigma_ce**2 + s * s)


def stable_erfc_ratio(u):
    """exp(-u^2) / erfc(u) for u >= 0.

    Evaluated as 1/erfcx(u) below u = 20 and continued linearly with slope
    sqrt(pi) above it; the offset makes the two branches meet at u = 20.
    """
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any(~(u_arr >= 0)):
        raise DomainError(f"u must be >= 0, got {u}")
    low = u_arr < ERFC_RATIO_SWITCH
    out = np.empty_like(u_arr)
    out[low] = 1.0 / erfcx(u_arr[low])
    out[~low] = SQRT_PI * u_arr[~low] + _RATIO_OFFSET
    return float(out) if out.ndim == 0 else out


_SERIES_SWITCH = 1e3


def _mode_factor(u):
    """1 - R(u)/(sqrt(pi) u) with R = 1/erfcx, free of cancellation for large u.

    Below the switch it is (v - 1)/v with v = sqrt(pi) u erfcx(u); above it,
    the asymptotic series of v - 1 is used.
    """
    if u < _SERIES_SWITCH:
        v = SQRT_PI * u * float(erfcx(u))
        return (v - 1.0) / v
    u2 = 1.0 / (u * u)
    v_minus_1 = u2 * (-0.5 + u2 * (0.75 - u2 * 1.875))
    return v_minus_1 / (1.0 + v_minus_1)


def boltzmann_curvature_at_mode(sched: Schedule, sigma_ce: float, t: float, linear_switch: bool = False) -> float:
    """Second derivative of log b_t at y_t = 0.

    Equals 2/(alpha sigma_ce)^2 - 2 R(u)/(sqrt(pi) alpha sigma_ce sigma_t).
    By default R is the exact ratio 1/erfcx(u). ``linear_switch`` uses
    :func:`stable_erfc_ratio` instead, whose linear continuation overstates
    the magnitude by roughly u/20 once u > 20.
    """
    if not sigma_ce > 0:
        raise DomainError(f"sigma_ce must be > 0, got {sigma_ce}")
    a, s = _positive_time(sched, t)
    u = s / (a * sigma_ce)
    if linear_switch:
        return 2.0 / (a * sigma_ce) ** 2 - 2.0 * stable_erfc_ratio(u) / (SQRT_PI * a * sigma_ce * s)
    return 2.0 / (a * sigma_ce) ** 2 * _mode_factor(u)


def gamma(sched: Schedule, sigma_ce: float, t: float, linear_switch: bool = False) -> float:
    """Slope of the hardtanh argument: the mode curvature divided by sqrt(2)/(alpha sigma_ce).

    Equivalent to sqrt(2)/(alpha sigma_ce) - sqrt(2) R(u)/(sigma_t sqrt(pi)). Always negative.
    """
    a, _ = _positive_time(sched, t)
    return boltzmann_curvature_at_mode(sched, sigma_ce, t, linear_switch) * a * sigma_ce / SQRT2


def _log_erfcx(z):
    z = np.asarray(z, dtype=np.float64)
    neg = z < 0
    out = np.empty_like(z)
    out[~neg] = np.log(erfcx(z[~neg]))
    # erfc is in (1, 2] here, so the product never underflows
    out[neg] = np.log(erfc(z[neg])) + z[neg] ** 2
    return out


def boltzmann_exact_score_1d(sched: Schedule, sigma_ce: float, mu_ce, x, t):
    """Exact d/dx log b_t(x) for the diffused 1D Boltzmann neighborhood.

    With k = sqrt(2)/(alpha sigma_ce), u = sigma_t/(alpha sigma_ce) and
    z(+/-) = u +/- y_t/(sqrt(2) sigma_t), the score equals
    k tanh((log erfcx(z+) - log erfcx(z-)) / 2); the shared Gaussian factor
    exp(-u^2 - y_t^2 / (2 sigma_t^2)) cancels between numerator and denominator.
    Accepts scalars or arrays (element-wise).
    """
    if not sigma_ce > 0:
        raise DomainError(f"sigma_ce must be > 0, got {sigma_ce}")
    a, s = _positive_time(sched, t)
    y = np.asarray(x, dtype=np.float64) - a * np.asarray(mu_ce, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise RangeError("non-finite input to the Boltzmann score")
    k = SQRT2 / (a * sigma_ce)
    u = s / (a * sigma_ce)
    shift = y / (SQRT2 * s)
    z_plus, z_minus = u + shift, u - shift
    if np.any(np.abs(z_plus) > _MAX_ERFC_ARG) or np.any(np.abs(z_minus) > _MAX_ERFC_ARG):
        raise RangeError(f"|y_t|/sigma_t too large for stable evaluation at t={t}")
    out = k * np.tanh(0.5 * (_log_erfcx(z_plus) - _log_erfcx(z_minus)))
    if not np.all(np.isfinite(out)):
        raise RangeError(f"Boltzmann score not finite at t={t}")
    return float(out) if out.ndim == 0 else out


def boltzmann_approx_score(sched: Schedule, spec: NeighborhoodSpec, x_t, t):
    """Element-wise (sqrt(2)/(alpha sigma_ce)) * hardtanh(gamma_t * y_t)."""
    if spec.variant != BOLTZMANN:
        raise ConfigError(f"expected a Boltzmann neighborhood, got {spec.variant!r}")
    g = gamma(sched, spec.sigma_ce, t)
    a, _ = alpha_sigma(sched, t)
    y = _centered(x_t, spec.mu_ce, a)
    return SQRT2 / (a * spec.sigma_ce) * np.clip(g * y, -1.0, 1.0)


def neighborhood_score(sched: Schedule, spec: NeighborhoodSpec, x_t, t):
    if spec.variant == GAUSSIAN:
        return gaussian_neighborhood_score(sched, spec, x_t, t)
    return boltzmann_approx_score(sched, spec, x_t, t)


def neighborhood_noise_term(sched: Schedule, spec: NeighborhoodSpec, x_t, t, sigma_t_scaling: bool = False):
    """Additive term of the composed noise prediction.

    As printed, the term is the negated neighborhood score (no sigma_t factor).
    With ``sigma_t_scaling`` it is multiplied by sigma_t, which is the exact
    noise-prediction counterpart of adding the neighborhood score.
    """
    term = -neighborhood_score(sched, spec, x_t, t)
    if sigma_t_scaling:
        _, s = alpha_sigma(sched, t)
        term = s * term
    return term
