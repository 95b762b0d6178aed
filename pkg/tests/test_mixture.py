import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cediff.errors import ConfigError, DomainError, ShapeError
from cediff.mixture import (GaussianMixture, MixturePredictor, guided_noise, mixture_bayes_posterior,
                            mixture_diffused_log_density, mixture_diffused_score, mixture_noise_prediction)
from cediff.schedule import Schedule, alpha_sigma, perturb
from cediff.toy import mixture_from_config, toy2d, toy16
from oracles import central_gradient, gaussian_log_density, mixture_log_density_direct

S = Schedule()


def standard_normal(dim=3):
    return GaussianMixture([1.0], np.zeros((1, dim)), np.ones((1, dim)), [0], 1)


def random_mixture(rng, k=4, dim=2, n_classes=2):
    w = rng.dirichlet(np.ones(k))
    return GaussianMixture(w, rng.normal(size=(k, dim)), rng.uniform(0.1, 1.0, size=(k, dim)),
                           np.arange(k) % n_classes, n_classes)


def test_standard_normal_score_at_t_zero():
    x = np.full(3, 0.5)
    assert np.allclose(mixture_diffused_score(standard_normal(), S, x, 0.0), -x)


@pytest.mark.parametrize("t", [0.0, 0.3, 1.0])
def test_symmetric_pair_has_zero_score_at_origin(t):
    gm = GaussianMixture([0.5, 0.5], [[1.0, -2.0], [-1.0, 2.0]], [[0.3, 0.5], [0.3, 0.5]], [0, 1], 2)
    assert np.allclose(mixture_diffused_score(gm, S, np.zeros(2), t), 0.0, atol=1e-15)


def test_score_matches_finite_difference_of_direct_density(rng):
    for _ in range(20):
        gm = random_mixture(rng)
        x = rng.normal(size=2)
        a, s = alpha_sigma(S, 0.3)

        def logp(v):
            return mixture_log_density_direct(gm.weights, gm.means, gm.variances, v, a, s)

        fd = central_gradient(logp, x, 1e-4)
        got = mixture_diffused_score(gm, S, x, 0.3)
        assert np.linalg.norm(got - fd) <= 1e-5 * np.linalg.norm(fd)
        assert mixture_diffused_log_density(gm, S, x, 0.3) == pytest.approx(logp(x), rel=1e-12)


def test_class_filter_equals_submixture(rng):
    gm = random_mixture(rng, k=6, dim=3, n_classes=3)
    x = rng.normal(size=(5, 3))
    sel = gm.component_class == 1
    sub = GaussianMixture(gm.weights[sel] / gm.weights[sel].sum(), gm.means[sel], gm.variances[sel], [0, 0], 1)
    assert np.allclose(mixture_diffused_score(gm, S, x, 0.4, 1), mixture_diffused_score(sub, S, x, 0.4))
    assert np.allclose(mixture_diffused_log_density(gm, S, x, 0.4, 1), mixture_diffused_log_density(sub, S, x, 0.4))
    per_row = mixture_diffused_score(gm, S, x, 0.4, np.array([0, 1, 2, 1, 0]))
    assert np.allclose(per_row[1], mixture_diffused_score(gm, S, x[1], 0.4, 1))


def test_class_filter_errors():
    gm = toy2d()
    with pytest.raises(ConfigError):
        mixture_diffused_score(gm, S, np.zeros(2), 0.5, 5)
    with pytest.raises(ShapeError):
        mixture_diffused_score(gm, S, np.zeros((3, 2)), 0.5, np.array([0, 1]))
    with pytest.raises(ShapeError):
        mixture_diffused_score(gm, S, np.zeros(3), 0.5)


def test_far_point_is_stable():
    # log-sum-exp keeps the responsibilities finite far from every component
    gm = toy2d()
    s = mixture_diffused_score(gm, S, np.array([1e3, -1e3]), 1e-3)
    assert np.all(np.isfinite(s))


def test_noise_prediction_is_minus_sigma_score(rng):
    gm = random_mixture(rng)
    x = rng.normal(size=(4, 2))
    _, s = alpha_sigma(S, 0.7)
    assert np.array_equal(mixture_noise_prediction(gm, S, x, 0.7), -s * mixture_diffused_score(gm, S, x, 0.7))
    with pytest.raises(DomainError):
        mixture_noise_prediction(gm, S, x, S.t_min / 2)


@pytest.mark.parametrize("t", [0.01, 0.5, 1.0])
def test_standard_normal_is_a_fixed_point(rng, t):
    x = rng.normal(size=(10, 3))
    _, s = alpha_sigma(S, t)
    assert np.allclose(mixture_noise_prediction(standard_normal(), S, x, t), s * x, atol=1e-14)


def test_predicted_noise_regresses_onto_true_noise(rng):
    gm = toy2d()
    n, t = 10_000, 0.5
    x0, y = gm.sample(n, rng)
    z = rng.standard_normal(x0.shape)
    pred = MixturePredictor(gm, S)(perturb(S, x0, t, z), t)
    # pred = E[z | x_t], so regressing z on pred has unit slope (the reverse direction does not)
    slope = np.sum(pred * z) / np.sum(pred * pred)
    assert slope == pytest.approx(1.0, abs=0.05)


def test_guidance_identity():
    assert guided_noise(2.0, 1.0, 15.0) == 17.0
    c = np.array([0.3, -1.2])
    assert np.array_equal(guided_noise(c, np.array([5.0, 7.0]), 0.0), c)


@given(arrays(np.float64, 4, elements=st.floats(-1e3, 1e3)), st.floats(0.0, 50.0))
def test_guidance_cond_equals_uncond(c, w):
    out = guided_noise(c, c, w)
    assert np.allclose(out, c, rtol=1e-12, atol=1e-9 * (1 + w))


def test_guidance_errors():
    with pytest.raises(DomainError):
        guided_noise(1.0, 1.0, -1.0)
    with pytest.raises(ShapeError):
        guided_noise(np.zeros(2), np.zeros(3), 1.0)


def test_posterior_symmetry_and_dominance():
    gm = GaussianMixture([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], [[0.5, 0.5]] * 2, [0, 1], 2)
    assert np.allclose(mixture_bayes_posterior(gm, np.zeros(2)), [0.5, 0.5])
    far = GaussianMixture([0.5, 0.5], [[-20.0, 0.0], [1.0, 0.0]], [[0.5, 0.5]] * 2, [0, 1], 2)
    assert mixture_bayes_posterior(far, [-20.0, 0.0])[0] > 0.999


def test_posterior_matches_brute_force(rng):
    gm = random_mixture(rng, k=6, dim=3, n_classes=3)
    for x in rng.normal(size=(10, 3)):
        dens = np.zeros(3)
        for w, m, v, c in zip(gm.weights, gm.means, gm.variances, gm.component_class):
            dens[c] += w * np.exp(gaussian_log_density(x, m, v))
        assert np.allclose(mixture_bayes_posterior(gm, x), dens / dens.sum(), rtol=1e-10)


@pytest.mark.parametrize("kw", [dict(weights=[0.5, 0.6]), dict(variances=[[1.0], [0.0]]),
                                dict(component_class=[0, 2]), dict(means=[[0.0], [1.0], [2.0]])])
def test_invalid_mixture(kw):
    base = dict(weights=[0.5, 0.5], means=[[0.0], [1.0]], variances=[[1.0], [1.0]], component_class=[0, 1],
                n_classes=2)
    base.update(kw)
    with pytest.raises(ConfigError):
        GaussianMixture(**base)


def test_round_trip_and_presets(rng):
    gm = toy16()
    assert gm.dim == 16 and gm.n_components == 8 and gm.n_classes == 4
    again = GaussianMixture.from_dict(gm.to_dict())
    assert np.array_equal(again.means, gm.means)
    assert np.array_equal(mixture_from_config({"preset": "toy16", "seed": 0}).means, gm.means)
    assert np.array_equal(mixture_from_config(gm.to_dict()).variances, gm.variances)
    with pytest.raises(ConfigError):
        mixture_from_config({"preset": "nope"})
    with pytest.raises(ConfigError):
        mixture_from_config({"preset": "toy2d", "bogus": 1})
    x, y = gm.sample(5000, rng)
    assert x.shape == (5000, 16) and set(np.unique(y)) == {0, 1, 2, 3}
