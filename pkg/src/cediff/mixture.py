"""Analytic class-conditional Gaussian mixtures with exact diffused scores.

All densities use diagonal covariances. Every routine accepts a single vector
of shape (d,) or a batch of shape (B, d) and returns the matching shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DomainError, ShapeError
from .schedule import Schedule, alpha_sigma

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    component_class: np.ndarray
    n_classes: int
    _log_weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        c = np.asarray(self.component_class, dtype=np.int64).reshape(-1)
        problems = []
        if m.shape != v.shape:
            problems.append(f"means {m.shape} and variances {v.shape} differ in shape")
        if not (len(w) == len(m) == len(c)):
            problems.append("weights, means and component_class must have one entry per component")
        if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            problems.append(f"weights must be nonnegative and sum to 1 (sum={w.sum()!r})")
        if np.any(~(v > 0)):
            problems.append("all variances must be > 0")
        if int(self.n_classes) < 1 or np.any(c < 0) or np.any(c >= self.n_classes):
            problems.append(f"class indices must lie in [0, {self.n_classes})")
        if problems:
            raise ConfigError("invalid Gaussian mixture", problems)
        for name, val in (("weights", w), ("means", m), ("variances", v), ("component_class", c)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "n_classes", int(self.n_classes))
        with np.errstate(divide="ignore"):
            object.__setattr__(self, "_log_weights", np.log(w))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "component_class": self.component_class.tolist(),
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        return cls(d["weights"], d["means"], d["variances"], d["component_class"], d["n_classes"])

    def sample(self, n: int, rng: np.random.Generator):
        """Draw n labeled points. Returns (x, labels)."""
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        x = self.means[comp] + np.sqrt(self.variances[comp]) * z
        return x, self.component_class[comp]


def _as_batch(gm: GaussianMixture, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.ndim != 2 or xb.shape[1] != gm.dim:
        raise ShapeError(f"expected vectors of dimension {gm.dim}, got shape {x.shape}")
    return xb, single


def _component_mask(gm: GaussianMixture, class_filter, batch: int):
    """Boolean (B, K) mask of components admitted for each row, or None."""
    if class_filter is None:
        return None
    cf = np.asarray(class_filter, dtype=np.int64)
    if cf.ndim == 0:
        cf = np.full(batch, int(cf))
    if cf.shape != (batch,):
        raise ShapeError(f"class_filter must be a scalar or have shape ({batch},), got {cf.shape}")
    present = np.zeros(gm.n_classes + 1, dtype=bool)
    present[np.unique(gm.component_class)] = True
    bad = (cf < 0) | (cf >= gm.n_classes)
    if np.any(bad) or not np.all(present[cf]):
        missing = sorted(set(cf.tolist()) - set(gm.component_class.tolist()))
        raise ConfigError(f"no mixture component has class {missing}")
    return gm.component_class[None, :] == cf[:, None]


def _component_terms(gm: GaussianMixture, xb, a: float, s: float):
    """Per-component log weight + log density and the per-component score (B, K, d)."""
    var = a * a * gm.variances + s * s  # (K, d)
    diff = a * gm.means[None, :, :] - xb[:, None, :]  # (B, K, d)
    logdens = -0.5 * np.sum(diff * diff / var, axis=2) - 0.5 * np.sum(np.log(var), axis=1) - 0.5 * gm.dim * LOG_2PI
    return gm._log_weights + logdens, diff / var


def _responsibilities(logits, mask):
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def mixture_diffused_log_density(gm: GaussianMixture, sched: Schedule, x_t, t, class_filter=None):
    """log of the (filtered, renormalized) diffused mixture density at time t."""
    xb, single = _as_batch(gm, x_t)
    a, s = alpha_sigma(sched, t)
    mask = _component_mask(gm, class_filter, len(xb))
    logits, _ = _component_terms(gm, xb, a, s)
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
        norm = logsumexp(np.where(mask, gm._log_weights, -np.inf), axis=1)
    else:
        norm = 0.0
    out = logsumexp(logits, axis=1) - norm
    return out[0] if single else out


def mixture_diffused_score(gm: GaussianMixture, sched: Schedule, x_t, t, class_filter=None):
    """Exact score of the VP-diffused mixture, optionally restricted to one class.

    Restricting to a class renormalizes the weights over that class's
    components; renormalization does not change the score so it is implicit.
    """
    xb, single = _as_batch(gm, x_t)
    a, s = alpha_sigma(sched, t)
    mask = _component_mask(gm, class_filter, len(xb))
    logits, comp_score = _component_terms(gm, xb, a, s)
    r = _responsibilities(logits, mask)
    out = np.sum(r[:, :, None] * comp_score, axis=1)
    return out[0] if single else out


def mixture_noise_prediction(gm: GaussianMixture, sched: Schedule, x_t, t, class_filter=None):
    """Noise prediction -sigma(t) * score. Requires t >= t_min."""
    if t < sched.t_min:
        raise DomainError(f"t={t} is below t_min={sched.t_min}")
    _, s = alpha_sigma(sched, t)
    return -s * mixture_diffused_score(gm, sched, x_t, t, class_filter)


def mixture_bayes_posterior(gm: GaussianMixture, x):
    """Exact class posterior P(class | x) of the undiffused mixture."""
    xb, single = _as_batch(gm, x)
    logits, _ = _component_terms(gm, xb, 1.0, 0.0)
    per_class = np.full((len(xb), gm.n_classes), -np.inf)
    for c in range(gm.n_classes):
        sel = gm.component_class == c
        if np.any(sel):
            per_class[:, c] = logsumexp(logits[:, sel], axis=1)
    post = np.exp(per_class - logsumexp(per_class, axis=1, keepdims=True))
    return post[0] if single else post


def guided_noise(cond, uncond, w):
    """Classifier-free guidance: (w + 1) cond - w uncond."""
    cond = np.asarray(cond, dtype=np.float64)
    uncond = np.asarray(uncond, dtype=np.float64)
    if cond.shape != uncond.shape:
        raise ShapeError(f"cond {cond.shape} and uncond {uncond.shape} differ in shape")
    if not np.isfinite(w) or w < 0:
        raise DomainError(f"guidance weight must be finite and >= 0, got {w}")
    if w == 0:
        return cond.copy()
    return (w + 1.0) * cond - w * uncond


class MixturePredictor:
    """Noise predictor backed by an analytic mixture.

    Call signature shared with the trainable denoiser:
    ``predictor(x_t (B, d), t, y)`` where y is None (unconditional), an int,
    or an int array of shape (B,).
    """

    def __init__(self, gm: GaussianMixture, sched: Schedule):
        self.gm = gm
        self.sched = sched

    @property
    def dim(self) -> int:
        return self.gm.dim

    @property
    def n_classes(self) -> int:
        return self.gm.n_classes

    def __call__(self, x_t, t, y=None):
        return mixture_noise_prediction(self.gm, self.sched, x_t, t, y)
