import numpy as np
import pytest
import torch

from cediff.denoiser import DSMConfig, Denoiser, DenoiserPredictor, denoiser_predict, dsm_loss, train_denoiser_dsm
from cediff.errors import DomainError
from cediff.mixture import MixturePredictor
from cediff.schedule import Schedule
from cediff.toy import toy2d

S = Schedule()


def test_predict_is_deterministic_and_shaped(rng):
    torch.manual_seed(0)
    for dim in (1, 3, 7):
        m = Denoiser(dim, 3, hidden=16, depth=1, time_dim=8)
        x = rng.normal(size=(5, dim))
        a = denoiser_predict(m, S, x, 0.4, [0, 1, 2, 0, 1])
        assert a.shape == (5, dim)
        assert np.array_equal(a, denoiser_predict(m, S, x, 0.4, [0, 1, 2, 0, 1]))
        assert denoiser_predict(m, S, x[0], 0.4).shape == (dim,)


def test_predict_validation():
    m = Denoiser(2, 2, hidden=8, depth=1, time_dim=8)
    with pytest.raises(DomainError):
        denoiser_predict(m, S, np.zeros(2), 0.0)
    with pytest.raises(DomainError):
        denoiser_predict(m, S, np.zeros(2), 0.5, 2)
    # the adapter clamps t into the trained range
    p = DenoiserPredictor(m, S)
    assert np.array_equal(p(np.zeros((1, 2)), 0.0, 1), p(np.zeros((1, 2)), S.t_min, 1))


def test_point_mass_loss_beats_zero_predictor():
    x = np.tile([[0.7, -0.3]], (512, 1))
    torch.manual_seed(0)
    m = Denoiser(2, 1, hidden=32, depth=2, time_dim=16)
    _, losses = train_denoiser_dsm(m, S, x, np.zeros(512, int), DSMConfig(epochs=60, batch_size=128, lr=2e-3,
                                                                          warmup_steps=20))
    per_dim = losses[-1] / 2
    assert per_dim < 0.5 < 1.0  # the zero predictor scores 1.0 per dimension
    assert losses[-1] < losses[0]


def test_class_and_null_embeddings_receive_gradient():
    torch.manual_seed(0)
    m = Denoiser(2, 2, hidden=8, depth=1, time_dim=8)
    x0 = torch.randn(16, 2)
    y = torch.tensor([0, 1] * 8)
    t = torch.rand(16) * 0.9 + 0.05
    drop = torch.tensor([True, False] * 8)
    dsm_loss(m, S, x0, y, t, torch.randn(16, 2), drop).backward()
    g = m.class_embed.weight.grad
    assert g[m.null_class].abs().sum() > 0 and g[1].abs().sum() > 0
    # the class and null paths differ once embeddings differ
    out_c = m(x0, t, y)
    out_n = m(x0, t, torch.full_like(y, m.null_class))
    assert not torch.allclose(out_c, out_n)


@pytest.mark.slow
def test_trained_denoiser_matches_analytic_noise(rng):
    gm = toy2d()
    x, y = gm.sample(4000, rng)
    torch.manual_seed(0)
    m = Denoiser(2, 2, hidden=64, depth=2, time_dim=32)
    train_denoiser_dsm(m, S, x, y, DSMConfig(epochs=100, batch_size=256, lr=1e-3))
    ref = MixturePredictor(gm, S)
    for t in (0.1, 0.5, 0.9):
        x0, yy = gm.sample(2000, rng)
        a, s = np.exp(-0.25 * t * t * 19.9 - 0.05 * t), None
        xt = a * x0 + np.sqrt(1 - a * a) * rng.standard_normal(x0.shape)
        for cond in (None, 1):
            mse = np.mean((denoiser_predict(m, S, xt, t, cond) - ref(xt, t, cond)) ** 2)
            assert mse < 0.05, (t, cond, mse)


def test_training_errors():
    m = Denoiser(2, 2, hidden=8, depth=1, time_dim=8)
    with pytest.raises(DomainError):
        train_denoiser_dsm(m, S, np.zeros((0, 2)), np.zeros(0, int), DSMConfig(epochs=1))
    with pytest.raises(DomainError):
        train_denoiser_dsm(m, S, np.zeros((4, 2)), np.array([0, 1, 2, 0]), DSMConfig(epochs=1))
