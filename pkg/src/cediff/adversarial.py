"""Small classifiers, L2 PGD attacks, adversarial training and the
gradient-ascent counterfactual baseline for robust models."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DomainError, ShapeError, TrainingError


class Classifier(nn.Module):
    """Fully connected ReLU classifier returning logits."""

    def __init__(self, dim: int, n_classes: int, hidden: int = 64, depth: int = 2, dropout: float = 0.0):
        super().__init__()
        self.dim = dim
        self.n_classes = n_classes
        self.hidden = hidden
        self.depth = depth
        self.dropout = dropout
        layers: list[nn.Module] = []
        width = dim
        for _ in range(depth):
            layers += [nn.Linear(width, hidden), nn.ReLU()]
            if dropout > 0:
                layers.append(nn.Dropout(dropout))
            width = hidden
        layers.append(nn.Linear(width, n_classes))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)

    def arch(self) -> dict:
        return {"dim": self.dim, "n_classes": self.n_classes, "hidden": self.hidden,
                "depth": self.depth, "dropout": self.dropout}


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    n_steps: int = 8
    step_size: float | None = None
    targeted: bool = False
    target_class: int | None = None

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")

    @property
    def step(self) -> float:
        # 2.5 eps / n_steps: enough to reach the ball boundary from its center
        return self.step_size if self.step_size is not None else 2.5 * self.epsilon / self.n_steps


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    pgd_steps: int = 8
    epsilon_ramp_epochs: int = 0
    seed: int = 0


@dataclass
class TrainHistory:
    clean_acc: list = field(default_factory=list)
    adv_acc: list = field(default_factory=list)
    loss: list = field(default_factory=list)


def _tensor(x):
    if isinstance(x, torch.Tensor):
        return x.to(torch.get_default_dtype())
    return torch.as_tensor(np.asarray(x), dtype=torch.get_default_dtype())


def classify(model: Classifier, x):
    """Deterministic forward pass. Returns (logits, softmax confidence) as numpy."""
    xt = _tensor(x)
    single = xt.ndim == 1
    xt = xt.reshape(1, -1) if single else xt
    if xt.shape[-1] != model.dim:
        raise ShapeError(f"expected inputs of dimension {model.dim}, got {tuple(xt.shape)}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        logits = model(xt)
        conf = torch.softmax(logits.double(), dim=1)
    model.train(was_training)
    logits, conf = logits.double().numpy(), conf.numpy()
    return (logits[0], conf[0]) if single else (logits, conf)


def predict(model: Classifier, x) -> np.ndarray:
    return classify(model, x)[1].argmax(axis=-1)


def _unit(g):
    norms = g.flatten(1).norm(dim=1).reshape(-1, *([1] * (g.ndim - 1)))
    # rows with a zero gradient take no step
    return torch.where(norms > 0, g / norms.clamp_min(1e-30), torch.zeros_like(g))


def project_l2(x_adv, x, epsilon):
    """Exact projection of x_adv onto the L2 ball of radius epsilon around x."""
    delta = x_adv - x
    norms = delta.flatten(1).norm(dim=1).reshape(-1, *([1] * (delta.ndim - 1)))
    factor = torch.where(norms > epsilon, epsilon / norms.clamp_min(1e-30), torch.ones_like(norms))
    return x + delta * factor


def pgd_attack(model: Classifier, x, y, cfg: AttackConfig):
    """L2 PGD from a deterministic start at x (no random restart).

    Untargeted attacks ascend the cross-entropy of label y; targeted attacks
    descend the cross-entropy of ``cfg.target_class`` (or of y when unset).
    Returns a tensor of the same shape as x.
    """
    x0 = _tensor(x).detach()
    if cfg.epsilon == 0:
        return x0.clone()
    single = x0.ndim == 1
    xb = x0.reshape(1, -1) if single else x0
    labels = torch.as_tensor(np.atleast_1d(np.asarray(y)), dtype=torch.long).reshape(-1)
    if cfg.targeted and cfg.target_class is not None:
        labels = torch.full_like(labels, int(cfg.target_class))
    labels = labels.expand(len(xb)) if len(labels) == 1 else labels
    sign = -1.0 if cfg.targeted else 1.0
    was_training = model.training
    model.eval()
    x_adv = xb.clone()
    for _ in range(cfg.n_steps):
        x_adv.requires_grad_(True)
        loss = F.cross_entropy(model(x_adv), labels, reduction="sum")
        (g,) = torch.autograd.grad(loss, x_adv)
        x_adv = project_l2(x_adv.detach() + sign * cfg.step * _unit(g), xb, cfg.epsilon)
    model.train(was_training)
    x_adv = x_adv.detach()
    return x_adv[0] if single else x_adv


def balanced_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Index batches interleaving classes so each batch is close to class balanced."""
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    longest = max(len(p) for p in pools)
    order = []
    for i in range(longest):
        for p in pools:
            if i < len(p):
                order.append(p[i])
    order = np.asarray(order)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def accuracy(model, x, y, epsilon=0.0, pgd_steps=8) -> float:
    xt, yt = _tensor(x), torch.as_tensor(np.asarray(y), dtype=torch.long)
    if epsilon > 0:
        xt = pgd_attack(model, xt, yt, AttackConfig(epsilon, pgd_steps))
    return float((predict(model, xt) == yt.numpy()).mean())


def train(model: Classifier, x, y, epsilon: float, config: TrainConfig, adversary=None):
    """Standard (epsilon = 0) or PGD adversarial training with Adam.

    Each batch is replaced by ``adversary(model, xb, yb)`` before the gradient
    step; the default adversary is PGD(config.pgd_steps, epsilon), which is the
    identity when epsilon = 0. Returns the per-epoch history.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise DomainError("training set is empty")
    custom = adversary is not None

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999))
    xt, yt = _tensor(x), torch.as_tensor(y)
    hist = TrainHistory()
    for epoch in range(config.epochs):
        if not custom:
            # optional linear ramp of the budget over the first epochs
            frac = min(1.0, (epoch + 1) / config.epsilon_ramp_epochs) if config.epsilon_ramp_epochs else 1.0
            attack = AttackConfig(epsilon * frac, config.pgd_steps)

            def adversary(m, xb, yb, attack=attack):
                return pgd_attack(m, xb, yb, attack)

        losses = []
        for idx in balanced_batches(y, config.batch_size, rng):
            xb, yb = xt[idx], yt[idx]
            xb = adversary(model, xb, yb)
            model.train()
            loss = F.cross_entropy(model(xb), yb)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged in epoch {epoch}", epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        model.eval()
        hist.loss.append(float(np.mean(losses)))
        hist.clean_acc.append(accuracy(model, x, y))
        hist.adv_acc.append(accuracy(model, x, y, epsilon, config.pgd_steps) if epsilon > 0 else hist.clean_acc[-1])
    model.eval()
    return model, hist


def robust_model_ce(model: Classifier, x, y_ce: int, step_size: float = 0.05, conf_threshold: float = 0.9,
                    max_steps: int = 200, clip=(0.0, 1.0)):
    """Push x along the normalized gradient of log p(y_ce | x) until the
    target confidence reaches ``conf_threshold`` or ``max_steps`` is hit.

    Returns (counterfactual as numpy, steps used).
    """
    if not 0 <= y_ce < model.n_classes:
        raise DomainError(f"target class {y_ce} out of range")
    model.eval()
    cur = _tensor(x).detach().reshape(1, -1)
    if clip is not None:
        cur = cur.clamp(*clip)
    steps = 0
    while True:
        cur.requires_grad_(True)
        logp = torch.log_softmax(model(cur), dim=1)[0, y_ce]
        if logp.exp().item() >= conf_threshold or steps >= max_steps:
            break
        (g,) = torch.autograd.grad(logp, cur)
        cur = cur.detach() + step_size * _unit(g)
        if clip is not None:
            cur = cur.clamp(*clip)
        steps += 1
    return cur.detach()[0].double().numpy(), steps
