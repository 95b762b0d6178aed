"""Preset class-conditional Gaussian mixtures used as desk-scale tasks."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .mixture import GaussianMixture


def toy16(dim: int = 16, n_classes: int = 4, components_per_class: int = 2, n_strong: int = 4,
          strong_shift: float = 0.3, strong_std: float = 0.3, weak_shift: float = 0.1,
          weak_std: float = 0.15, center: float = 0.5, seed: int = 0) -> GaussianMixture:
    """Overlapping classes carried by two kinds of coordinates.

    The first ``n_strong`` coordinates have large class shifts and large
    variance; the rest have small shifts with small variance, so they are
    individually predictive yet flippable by a small L2 perturbation. Each
    component mean is ``center + shift * pattern`` with a random sign pattern.
    """
    if not 0 <= n_strong <= dim:
        raise ConfigError(f"n_strong must lie in [0, {dim}]")
    rng = np.random.default_rng(seed)
    k = n_classes * components_per_class
    signs = rng.choice([-1.0, 1.0], size=(k, dim))
    shift = np.r_[np.full(n_strong, strong_shift), np.full(dim - n_strong, weak_shift)]
    std = np.r_[np.full(n_strong, strong_std), np.full(dim - n_strong, weak_std)]
    return GaussianMixture(
        weights=np.full(k, 1.0 / k),
        means=center + shift * signs,
        variances=np.tile(std**2, (k, 1)),
        component_class=np.arange(k) // components_per_class,
        n_classes=n_classes,
    )


def toy2d(spread: float = 1.0, variance: float = 0.2) -> GaussianMixture:
    """Two classes, two components each, arranged on a diamond."""
    means = spread * np.array([[-1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, -1.0]])
    return GaussianMixture(
        weights=np.full(4, 0.25),
        means=means,
        variances=np.full((4, 2), variance),
        component_class=[0, 0, 1, 1],
        n_classes=2,
    )


PRESETS = {"toy16": toy16, "toy2d": toy2d}


def mixture_from_config(block: dict) -> GaussianMixture:
    """Build a mixture from a config block: ``{preset: name, ...params}`` or explicit arrays."""
    block = dict(block)
    preset = block.pop("preset", None)
    if preset is None:
        return GaussianMixture.from_dict(block)
    if preset not in PRESETS:
        raise ConfigError(f"unknown mixture preset {preset!r}; known: {sorted(PRESETS)}")
    try:
        return PRESETS[preset](**block)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for preset {preset!r}: {exc}") from None
