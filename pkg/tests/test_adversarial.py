import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cediff.adversarial import (AttackConfig, Classifier, TrainConfig, accuracy, balanced_batches, classify,
                                pgd_attack, predict, project_l2, robust_model_ce, train)
from cediff.errors import ConfigError, DomainError, ShapeError, TrainingError
from cediff.toy import toy2d


def linear_model(weight, bias):
    m = Classifier(len(weight[0]), len(weight), depth=0)
    with torch.no_grad():
        m.net[0].weight.copy_(torch.tensor(weight))
        m.net[0].bias.copy_(torch.tensor(bias))
    return m


def test_zero_weights_give_uniform_confidence():
    m = Classifier(3, 4, hidden=8, depth=2)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    _, conf = classify(m, np.ones((2, 3)))
    assert np.allclose(conf, 0.25)


def test_forward_is_deterministic_and_shaped(rng):
    m = Classifier(5, 3, dropout=0.5)
    x = rng.normal(size=(7, 5))
    a, b = classify(m, x), classify(m, x)
    assert np.array_equal(a[1], b[1]) and a[0].shape == (7, 3)
    assert classify(m, x[0])[1].shape == (3,)
    with pytest.raises(ShapeError):
        classify(m, np.zeros((2, 4)))


def test_linear_forward_matches_hand_softmax():
    m = linear_model([[1.0, 2.0], [-1.0, 0.5], [0.0, 0.0]], [0.1, -0.2, 0.3])
    logits = np.array([1 * 0.5 + 2 * -1 + 0.1, -1 * 0.5 + 0.5 * -1 - 0.2, 0.3])
    ref = np.exp(logits) / np.exp(logits).sum()
    got_logits, conf = classify(m, np.array([0.5, -1.0]))
    assert np.allclose(got_logits, logits, atol=1e-6) and np.allclose(conf, ref, atol=1e-6)


def test_pgd_zero_budget_is_identity(rng):
    x = torch.tensor(rng.normal(size=(4, 2)), dtype=torch.float32)
    out = pgd_attack(linear_model([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]), x, [0, 1, 0, 1], AttackConfig(0.0))
    assert torch.equal(out, x)


def test_pgd_single_step_on_linear_classifier():
    w = np.array([[0.6, -0.8, 0.0], [-0.3, 0.4, 1.2]])
    m = linear_model(w.tolist(), [0.0, 0.0])
    x = np.array([0.2, 0.1, -0.3])
    out = pgd_attack(m, x, 0, AttackConfig(epsilon=10.0, n_steps=1, step_size=0.1)).double().numpy()
    direction = (w[1] - w[0]) / np.linalg.norm(w[1] - w[0])  # ascends the loss of label 0
    assert np.allclose(out - x, 0.1 * direction, atol=1e-6)


def test_pgd_default_step_and_targeted_direction():
    assert AttackConfig(0.5, 8).step == pytest.approx(2.5 * 0.5 / 8)
    m = linear_model([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    x = np.zeros(2)
    out = pgd_attack(m, x, 0, AttackConfig(1.0, 5, targeted=True, target_class=1)).numpy()
    assert out[1] > 0 > out[0]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 5.0), st.floats(0.0, 20.0))
def test_projection_is_exact(seed, eps, overshoot):
    g = np.random.default_rng(seed)
    x = torch.tensor(g.normal(size=(6, 3)))
    d = torch.tensor(g.normal(size=(6, 3)))
    d = d / d.norm(dim=1, keepdim=True) * eps * (1 + overshoot)
    out = project_l2(x + d, x, eps)
    norms = (out - x).norm(dim=1)
    assert torch.all(norms <= eps * (1 + 1e-12))
    if overshoot > 1e-9:
        assert torch.allclose(norms, torch.full_like(norms, eps), rtol=1e-12)
    inside = project_l2(x + d / (2 + overshoot), x, eps)
    assert torch.equal(inside, x + d / (2 + overshoot))


def test_pgd_stays_in_budget(rng):
    gm = toy2d()
    x, y = gm.sample(300, rng)
    torch.manual_seed(0)
    m = Classifier(2, 2, hidden=16)
    for eps in (0.05, 0.3, 1.0):
        adv = pgd_attack(m, x, y, AttackConfig(eps, 10)).double()
        norms = torch.linalg.vector_norm(adv - torch.as_tensor(x), dim=1)
        assert float(norms.max()) <= eps + 1e-6


def test_standard_training_on_separable_data(rng):
    x = rng.uniform(-1, 1, size=(400, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
    x = x + 0.1 * np.where(y[:, None] == 1, 1.0, -1.0)  # margin
    torch.manual_seed(0)
    m, hist = train(Classifier(2, 2, hidden=16), x, y, 0.0, TrainConfig(epochs=40, batch_size=32, lr=1e-2))
    assert accuracy(m, x, y) >= 0.99
    assert hist.clean_acc[-1] == accuracy(m, x, y) and len(hist.loss) == 40


def test_zero_budget_equals_identity_adversary(rng):
    gm = toy2d()
    x, y = gm.sample(200, rng)
    calls = []

    def identity(model, xb, yb):
        calls.append(len(xb))
        return xb

    runs = []
    for adversary in (None, identity):
        torch.manual_seed(3)
        m, _ = train(Classifier(2, 2, hidden=8), x, y, 0.0, TrainConfig(epochs=3, batch_size=50, seed=3), adversary)
        runs.append([p.detach().clone() for p in m.parameters()])
    assert sum(calls) == 3 * 200
    assert all(torch.equal(a, b) for a, b in zip(*runs))


def test_adversarial_training_improves_robust_accuracy():
    # coordinate 0 separates the classes but only by 0.05; coordinate 1 is noisy but robust
    g = np.random.default_rng(0)
    y = g.integers(0, 2, 600)
    s = 2 * y - 1
    x = np.c_[0.05 * s + 0.01 * g.normal(size=600), s + g.normal(size=600)]
    accs = {}
    for eps in (0.0, 0.5):
        torch.manual_seed(0)
        m, _ = train(Classifier(2, 2, hidden=32), x, y, eps, TrainConfig(epochs=30, batch_size=64, seed=0))
        accs[eps] = accuracy(m, x, y, 0.5)
    assert accs[0.5] > accs[0.0]


def test_balanced_batches_cover_everything(rng):
    y = np.array([0] * 30 + [1] * 10 + [2] * 5)
    batches = balanced_batches(y, 9, rng)
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(45))
    assert set(y[batches[0]]) == {0, 1, 2}


def test_training_errors(rng):
    with pytest.raises(DomainError):
        train(Classifier(2, 2), np.zeros((0, 2)), np.zeros(0), 0.0, TrainConfig(epochs=1))
    x, y = toy2d().sample(64, rng)
    x[5, 0] = np.nan
    with pytest.raises(TrainingError) as info:
        train(Classifier(2, 2), x, y, 0.0, TrainConfig(epochs=2, batch_size=16))
    assert info.value.epoch == 0
    with pytest.raises(ConfigError):
        AttackConfig(-1.0)
    with pytest.raises(ConfigError):
        AttackConfig(1.0, n_steps=0)


def test_robust_ce_stops_immediately_when_confident():
    m = linear_model([[5.0, 0.0], [-5.0, 0.0]], [0.0, 0.0])
    x = np.array([0.9, 0.5])
    out, steps = robust_model_ce(m, x, 0)
    assert steps == 0 and np.allclose(out, x)


def test_robust_ce_respects_clip_and_records(rng):
    gm = toy2d(spread=0.3, variance=0.01)
    x, y = gm.sample(100, rng)
    x = x + 0.5
    torch.manual_seed(0)
    m, _ = train(Classifier(2, 2, hidden=16), x, y, 0.1, TrainConfig(epochs=20, batch_size=32))
    for xi, yi in zip(x[:20], y[:20]):
        out, steps = robust_model_ce(m, xi, 1 - yi, step_size=0.05, max_steps=200)
        assert np.all((0.0 <= out) & (out <= 1.0))
        conf = classify(m, out)[1][1 - yi]
        assert conf >= 0.9 or steps == 200
    with pytest.raises(DomainError):
        robust_model_ce(m, x[0], 5)


def test_predict_matches_argmax(rng):
    m = Classifier(3, 4)
    x = rng.normal(size=(10, 3))
    assert np.array_equal(predict(m, x), classify(m, x)[1].argmax(1))
