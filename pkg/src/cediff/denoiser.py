"""Trainable class-conditional noise predictor fit by denoising score matching."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DomainError, TrainingError
from .schedule import Schedule, alpha_sigma


class SinusoidalEmbedding(nn.Module):
    def __init__(self, dim: int, max_period: float = 10000.0):
        super().__init__()
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
        self.register_buffer("freqs", freqs.float(), persistent=False)

    def forward(self, t):
        # scale t in [0, 1] up so that low frequencies still resolve it
        args = 1000.0 * t[:, None] * self.freqs[None, :].to(t.dtype)
        return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)
        self.cond = nn.Linear(width, width)

    def forward(self, h, c):
        r = self.fc1(F.silu(h)) + self.cond(c)
        return h + self.fc2(F.silu(r))


class Denoiser(nn.Module):
    """epsilon_theta(x_t, t, y). Index ``n_classes`` of the class embedding
    is the learnable null embedding used for unconditional prediction."""

    def __init__(self, dim: int, n_classes: int, hidden: int = 128, depth: int = 3, time_dim: int = 64):
        super().__init__()
        self.dim = dim
        self.n_classes = n_classes
        self.hidden = hidden
        self.depth = depth
        self.time_dim = time_dim
        self.time_embed = SinusoidalEmbedding(time_dim)
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.class_embed = nn.Embedding(n_classes + 1, hidden)
        self.inp = nn.Linear(dim, hidden)
        self.blocks = nn.ModuleList(ResidualBlock(hidden) for _ in range(depth))
        self.out = nn.Linear(hidden, dim)

    @property
    def null_class(self) -> int:
        return self.n_classes

    def arch(self) -> dict:
        return {"dim": self.dim, "n_classes": self.n_classes, "hidden": self.hidden,
                "depth": self.depth, "time_dim": self.time_dim}

    def forward(self, x, t, y):
        c = self.time_mlp(self.time_embed(t)) + self.class_embed(y)
        h = self.inp(x)
        for block in self.blocks:
            h = block(h, c)
        return self.out(F.silu(h))


def _labels(model: Denoiser, y, batch: int):
    if y is None:
        return torch.full((batch,), model.null_class, dtype=torch.long)
    yl = torch.as_tensor(np.asarray(y), dtype=torch.long).reshape(-1)
    if torch.any(yl < 0) or torch.any(yl >= model.n_classes):
        raise DomainError(f"class index out of range [0, {model.n_classes})")
    return yl.expand(batch).clone() if len(yl) == 1 else yl


def denoiser_predict(model: Denoiser, sched: Schedule, x_t, t, y=None):
    """Deterministic forward pass on numpy input; y=None routes through the null embedding."""
    if not sched.t_min <= t <= 1.0:
        raise DomainError(f"t={t} outside [t_min, 1]")
    x = np.asarray(x_t, dtype=np.float64)
    single = x.ndim == 1
    xb = torch.as_tensor(np.atleast_2d(x), dtype=next(model.parameters()).dtype)
    yb = _labels(model, y, len(xb))
    tb = torch.full((len(xb),), float(t), dtype=xb.dtype)
    model.eval()
    with torch.no_grad():
        out = model(xb, tb, yb).double().numpy()
    return out[0] if single else out


class DenoiserPredictor:
    """Adapter giving a trained denoiser the sampler's predictor signature."""

    def __init__(self, model: Denoiser, sched: Schedule):
        self.model = model
        self.sched = sched

    @property
    def dim(self) -> int:
        return self.model.dim

    @property
    def n_classes(self) -> int:
        return self.model.n_classes

    def __call__(self, x_t, t, y=None):
        return denoiser_predict(self.model, self.sched, x_t, max(t, self.sched.t_min), y)


@dataclass
class DSMConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-3
    warmup_steps: int = 200
    grad_clip: float = 1.0
    p_uncond: float = 0.3
    seed: int = 0


def dsm_loss(model: Denoiser, sched: Schedule, x0, y, t, z, drop):
    """Mean over the batch of ||eps(alpha x0 + sigma z, t, y or null) - z||^2."""
    a, s = alpha_sigma(sched, t.detach().double().numpy())
    a = torch.as_tensor(a, dtype=x0.dtype)[:, None]
    s = torch.as_tensor(s, dtype=x0.dtype)[:, None]
    y_in = torch.where(drop, torch.full_like(y, model.null_class), y)
    pred = model(a * x0 + s * z, t, y_in)
    return ((pred - z) ** 2).sum(dim=1).mean()


def train_denoiser_dsm(model: Denoiser, sched: Schedule, x, y, config: DSMConfig):
    """Denoising score matching with conditional dropout, warmup and clipping.

    Returns (model, per-epoch mean loss). The loss is summed over coordinates,
    so the zero predictor scores ``dim``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise DomainError("training set is empty")
    if np.any(y < 0) or np.any(y >= model.n_classes):
        raise DomainError("labels out of range")
    gen = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)
    dtype = next(model.parameters()).dtype
    xt = torch.as_tensor(x, dtype=dtype)
    yt = torch.as_tensor(y)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999))
    sched_lr = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda k: min(1.0, (k + 1) / max(1, config.warmup_steps)))
    n = len(xt)
    losses = []
    model.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            b = len(idx)
            t = sched.t_min + (1.0 - sched.t_min) * torch.rand(b, generator=gen, dtype=dtype)
            z = torch.randn(b, model.dim, generator=gen, dtype=dtype)
            drop = torch.rand(b, generator=gen) < config.p_uncond
            loss = dsm_loss(model, sched, xt[idx], yt[idx], t, z, drop)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite DSM loss in epoch {epoch}", epoch=epoch)
            opt.zero_grad()
            loss.backward()
            if config.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            sched_lr.step()
            total += loss.item() * b
            count += b
        losses.append(total / count)
    model.eval()
    return model, losses
