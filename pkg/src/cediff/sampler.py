"""Euler-Maruyama integration of the reverse-time VP SDE.

Randomness is drawn per batch element from a seed derived from
(config seed, element id), so results do not depend on how a batch is
chunked or ordered.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DomainError, NumericError, SamplingError, ShapeError
from .mixture import guided_noise
from .neighborhood import NeighborhoodSpec, neighborhood_noise_term
from .schedule import Schedule, alpha_sigma, beta


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 1000
    t_min: float = 1e-3
    seed: int = 0
    clip_range: tuple[float, float] | None = None
    chunk_size: int = 512

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigError(f"n_steps must be a positive integer, got {self.n_steps}")
        if not 0 < self.t_min < 1:
            raise ConfigError(f"t_min must lie in (0, 1), got {self.t_min}")
        if self.clip_range is not None:
            lo, hi = self.clip_range
            if not lo < hi:
                raise ConfigError(f"clip_range must satisfy low < high, got {self.clip_range}")


@dataclass(frozen=True)
class GuidanceSpec:
    w: float = 0.0
    target_class: int | np.ndarray | None = None

    def __post_init__(self):
        if not (np.isfinite(self.w) and self.w >= 0):
            raise ConfigError(f"guidance weight must be finite and >= 0, got {self.w}")


@dataclass(frozen=True)
class ComposedPredictor:
    """Guided data noise prediction plus an optional neighborhood term.

    ``sigma_t_scaling`` selects how the neighborhood term enters the noise
    prediction. When True (the default) it is scaled by sigma_t, so converting
    the composed noise back to a score adds exactly the neighborhood score to
    the guided data score. When False the term is used as printed, which
    amplifies the neighborhood score by 1/sigma_t after conversion.
    """

    data_predictor: object
    guidance: GuidanceSpec = GuidanceSpec()
    neighborhood: NeighborhoodSpec | None = None
    sigma_t_scaling: bool = True

    def __post_init__(self):
        if self.guidance.w > 0 and self.guidance.target_class is None:
            raise ConfigError("a target class is required whenever w > 0")

    @property
    def dim(self) -> int:
        return self.data_predictor.dim

    def subset(self, rows) -> "ComposedPredictor":
        """Restrict per-element fields (target classes, mu_ce) to the given rows."""
        g, nb = self.guidance, self.neighborhood
        tc = g.target_class
        if tc is not None and np.ndim(tc) == 1:
            g = replace(g, target_class=np.asarray(tc)[rows])
        if nb is not None and np.ndim(nb.mu_ce) == 2:
            nb = replace(nb, mu_ce=nb.mu_ce[rows])
        return replace(self, guidance=g, neighborhood=nb)

    def guided_noise(self, x_t, t):
        y = self.guidance.target_class
        cond = self.data_predictor(x_t, t, y)
        if self.guidance.w == 0:
            return cond
        return guided_noise(cond, self.data_predictor(x_t, t, None), self.guidance.w)

    def noise_term(self, sched, x_t, t):
        if self.neighborhood is None:
            return np.zeros_like(np.asarray(x_t, dtype=np.float64))
        return neighborhood_noise_term(sched, self.neighborhood, x_t, t, self.sigma_t_scaling)

    def noise(self, sched, x_t, t):
        return self.guided_noise(x_t, t) + self.noise_term(sched, x_t, t)

    def decompose(self, sched, x_t, t):
        """(guided data score, neighborhood score contribution) at (x_t, t)."""
        _, s = alpha_sigma(sched, t)
        return -self.guided_noise(x_t, t) / s, -self.noise_term(sched, x_t, t) / s

    def score(self, sched, x_t, t):
        _, s = alpha_sigma(sched, t)
        return -self.noise(sched, x_t, t) / s


def em_reverse_step(sched: Schedule, x_t, t, dt, score, z):
    """One reverse-time Euler-Maruyama step from t to t - dt."""
    x_t = np.asarray(x_t, dtype=np.float64)
    score = np.asarray(score, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if not (x_t.shape == score.shape == z.shape):
        raise ShapeError(f"shape mismatch: x_t {x_t.shape}, score {score.shape}, z {z.shape}")
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    for name, arr in (("x_t", x_t), ("score", score), ("z", z)):
        bad = np.argwhere(~np.isfinite(arr))
        if len(bad):
            raise NumericError(f"non-finite {name} at coordinate {tuple(bad[0].tolist())}")
    b = beta(sched, t)
    return x_t + (0.5 * b * x_t + b * score) * dt + np.sqrt(b * dt) * z


def element_rng(seed: int, element_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(element_id),)))


def _element_noise(seed, ids, n_steps, dim):
    x1 = np.empty((len(ids), dim))
    zs = np.empty((len(ids), n_steps, dim))
    for row, e in enumerate(ids):
        rng = element_rng(seed, e)
        x1[row] = rng.standard_normal(dim)
        zs[row] = rng.standard_normal((n_steps, dim))
    return x1, zs


def _integrate(sched, config, predictor, ids, dim, trace=None):
    x, zs = _element_noise(config.seed, ids, config.n_steps, dim)
    grid = np.linspace(1.0, config.t_min, config.n_steps + 1)
    for i in range(config.n_steps):
        t = grid[i]
        dt = grid[i] - grid[i + 1]
        sc = predictor.score(sched, x, t)
        if trace is not None:
            trace(i, t, x, sc)
        try:
            x = em_reverse_step(sched, x, t, dt, sc, zs[:, i])
        except NumericError as exc:
            raise SamplingError(f"sampling diverged at step {i} (t={t:.6g}): {exc}", step=i) from exc
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"sampling diverged at step {i} (t={t:.6g})", step=i)
    if config.clip_range is not None:
        x = np.clip(x, *config.clip_range)
    return x


def sample(sched: Schedule, config: SamplerConfig, predictor: ComposedPredictor, batch: int,
           element_ids=None, trace=None):
    """Draw ``batch`` samples by integrating from t=1 down to config.t_min.

    ``element_ids`` (default 0..batch-1) select each element's noise stream;
    per-element fields of ``predictor`` are indexed by row. ``trace`` is an
    optional callback ``trace(step, t, x, score)`` for instrumentation.
    """
    ids = np.arange(batch) if element_ids is None else np.asarray(element_ids, dtype=np.int64)
    if len(ids) != batch:
        raise ShapeError(f"{len(ids)} element ids for a batch of {batch}")
    out = np.empty((batch, predictor.dim))
    step = max(1, int(config.chunk_size))
    for lo in range(0, batch, step):
        rows = np.arange(lo, min(batch, lo + step))
        out[rows] = _integrate(sched, config, predictor.subset(rows), ids[rows], predictor.dim, trace)
    return out


def generate_ces(sched, config, data_predictor, xs, y_ces, variant, w, sigma_ce,
                 element_ids=None, sigma_t_scaling=True):
    """Counterfactuals for a batch of sources: mu_ce = x, guidance toward y_ce."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    y_ces = np.broadcast_to(np.asarray(y_ces, dtype=np.int64), (len(xs),)).copy()
    if not np.all(np.isfinite(xs)):
        raise DomainError("source data must be finite")
    if np.any(y_ces < 0) or np.any(y_ces >= data_predictor.n_classes):
        raise DomainError(f"target classes must lie in [0, {data_predictor.n_classes})")
    pred = ComposedPredictor(
        data_predictor,
        GuidanceSpec(w, y_ces),
        NeighborhoodSpec(variant, xs, sigma_ce, w),
        sigma_t_scaling,
    )
    return sample(sched, config, pred, len(xs), element_ids)


def generate_ce(sched, config, data_predictor, x, y_ce, variant, w, sigma_ce, element_id=0,
                sigma_t_scaling=True):
    return generate_ces(sched, config, data_predictor, np.asarray(x)[None], [y_ce], variant, w,
                        sigma_ce, [element_id], sigma_t_scaling)[0]
