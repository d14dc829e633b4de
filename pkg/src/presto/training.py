"""Teacher training by denoising score matching with condition dropout."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .condition import NULL_CATEGORY, Condition
from .diffusion import EdmConfig, _col, loss_weight, sample_sigma, train_distribution
from .numerics import Adam, SeededStream, Tensor, no_grad


class TeacherConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    steps: int = Field(3000, ge=0)
    batch: int = Field(128, ge=1)
    lr: float = Field(2e-3, gt=0)
    lr_final: float = Field(1e-4, gt=0)
    cond_dropout: float = Field(0.1, ge=0, le=1)


def cosine_lr(step: int, total: int, lr: float, lr_final: float) -> float:
    if total <= 1:
        return lr
    c = 0.5 * (1 + np.cos(np.pi * min(step, total - 1) / (total - 1)))
    return lr_final + (lr - lr_final) * c


def drop_condition(condition: Condition, p: float, stream: SeededStream) -> Condition:
    mask = stream.uniform(len(condition)) < p
    return Condition(np.where(mask, NULL_CATEGORY, condition.category), condition.tempo)


def dsm_step(denoiser, x, condition, optimizer, stream: SeededStream) -> float:
    edm = denoiser.edm
    n = len(x)
    sigma = sample_sigma(train_distribution(edm), stream, n)
    noisy = x + stream.normal(x.shape) * _col(sigma, x.ndim)
    optimizer.zero_grad()
    pred = denoiser.forward(noisy, sigma, condition, full=True,
                            budget=np.zeros(n) if denoiser.net.has_budget_path else None)
    diff = Tensor(x) - pred.x_hat
    loss = ((diff * diff).sum(axis=1) * loss_weight(sigma, edm)).mean()
    loss.backward()
    optimizer.step()
    return float(loss.data)


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)


def train_teacher(denoiser, dataset, cfg: TeacherConfig, stream: SeededStream, optimizer=None,
                  start_step: int = 0) -> TrainLog:
    opt = optimizer or Adam(denoiser.params, lr=cfg.lr)
    log = TrainLog()
    for step in range(start_step, cfg.steps):
        opt.state.lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_final)
        x, cond = dataset.batch(stream, cfg.batch)
        cond = drop_condition(cond, cfg.cond_dropout, stream)
        log.losses.append(dsm_step(denoiser, x, cond, opt, stream))
    return log


def mc_dsm_loss(denoiser, x, condition, sigma: float, stream: SeededStream, edm=None, chunk: int = 2048):
    """Monte-Carlo weighted DSM loss at a fixed sigma: (mean, standard error).

    Works for any ``denoiser(x, sigma, condition) -> ndarray``; give two
    denoisers identically seeded streams to compare them on shared noise.
    """
    per = []
    lam = float(loss_weight(sigma, edm or getattr(denoiser, "edm", EdmConfig())))
    for i in range(0, len(x), chunk):
        xb = x[i:i + chunk]
        noisy = xb + sigma * stream.normal(xb.shape)
        with no_grad():
            xh = denoiser(noisy, np.full(len(xb), sigma), condition.take(slice(i, i + chunk)))
        per.append(lam * ((xb - xh) ** 2).sum(axis=1))
    per = np.concatenate(per)
    return float(per.mean()), float(per.std(ddof=1) / np.sqrt(len(per)))
