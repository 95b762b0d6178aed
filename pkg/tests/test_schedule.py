import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cediff.errors import DomainError, ShapeError
from cediff.schedule import Schedule, alpha_sigma, beta, log_alpha, perturb, time_grid
from oracles import vp_alpha_sigma

S = Schedule()


@pytest.mark.parametrize("t, expected", [(0.0, 0.1), (1.0, 20.0), (0.5, 10.05)])
def test_beta_endpoints_and_midpoint(t, expected):
    assert beta(S, t) == pytest.approx(expected, rel=1e-15)


def test_alpha_sigma_at_zero():
    assert alpha_sigma(S, 0.0) == (1.0, 0.0)


def test_alpha_at_one_matches_high_precision():
    with mpmath.workdps(40):
        ref = float(mpmath.exp(mpmath.mpf("-5.025")))
    a, _ = alpha_sigma(S, 1.0)
    assert ref == pytest.approx(6.56e-3, abs=2e-5)  # 6.5715e-3, quoted to two digits
    assert a == pytest.approx(ref, rel=1e-14)


@pytest.mark.parametrize("t", np.linspace(0.0, 1.0, 11))
def test_alpha_sigma_match_quadrature(t):
    a_ref, s_ref = vp_alpha_sigma(t)
    a, s = alpha_sigma(S, t)
    assert a == pytest.approx(a_ref, rel=1e-12)
    assert s == pytest.approx(s_ref, rel=1e-9, abs=1e-15)


@given(st.floats(0.0, 1.0))
def test_variance_preserving_identity(t):
    a, s = alpha_sigma(S, t)
    assert a * a + s * s == pytest.approx(1.0, abs=4e-16)


def test_sigma_accurate_for_tiny_t():
    # sigma^2 ~ beta_min t for t -> 0; a naive sqrt(1 - a^2) loses every digit here
    t = 1e-12
    _, s = alpha_sigma(S, t)
    assert s == pytest.approx(math.sqrt(S.beta_min * t), rel=1e-6)


def test_vectorized_matches_scalar():
    ts = np.linspace(0, 1, 7)
    a, s = alpha_sigma(S, ts)
    for i, t in enumerate(ts):
        assert (a[i], s[i]) == alpha_sigma(S, t)
    assert np.allclose(log_alpha(S, ts), np.log(a))


@pytest.mark.parametrize("t", [-0.1, 1.5, float("nan")])
def test_time_out_of_domain(t):
    with pytest.raises(DomainError):
        alpha_sigma(S, t)


@pytest.mark.parametrize("kw", [dict(beta_min=0.0), dict(beta_min=5, beta_max=1), dict(t_min=0.0),
                                dict(t_max=2.0), dict(n_steps=0)])
def test_invalid_schedule(kw):
    with pytest.raises(DomainError):
        Schedule(**kw)


def test_perturb_identities(rng):
    x0 = rng.normal(size=5)
    z = rng.normal(size=5)
    assert np.array_equal(perturb(S, x0, 0.0, z), x0)
    _, s = alpha_sigma(S, 0.4)
    assert np.allclose(perturb(S, np.zeros(5), 0.4, z), s * z)
    with pytest.raises(ShapeError):
        perturb(S, x0, 0.4, z[:3])


def test_perturb_monte_carlo_mean(rng):
    n, t = 100_000, 0.3
    x0 = np.array([1.0, -2.0, 0.5])
    samples = perturb(S, np.broadcast_to(x0, (n, 3)), t, rng.standard_normal((n, 3)))
    a, s = alpha_sigma(S, t)
    assert np.all(np.abs(samples.mean(0) - a * x0) < 3 * s / math.sqrt(n))


def test_time_grid():
    g = time_grid(S, 10)
    assert g[0] == 1.0 and g[-1] == S.t_min and len(g) == 11
    assert np.allclose(np.diff(g), -(1 - S.t_min) / 10)


@settings(max_examples=50)
@given(st.floats(0.01, 5.0), st.floats(5.01, 40.0), st.floats(0.0, 1.0))
def test_log_alpha_is_integral_of_beta(bmin, bmax, t):
    sched = Schedule(bmin, bmax)
    a_ref, _ = vp_alpha_sigma(t, bmin, bmax)
    assert log_alpha(sched, t) == pytest.approx(math.log(a_ref), rel=1e-10, abs=1e-14)
