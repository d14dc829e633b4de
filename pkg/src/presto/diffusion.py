"""EDM-family noise process: preconditioning, DSM loss, noise distributions,
inference schedules, classifier-free guidance and SNR helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .numerics import SeededStream, Tensor
from .numerics import tensor as T


class _Frozen(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EdmConfig(_Frozen):
    sigma_data: float = Field(0.5, gt=0)
    p_mean: float = -0.4
    p_std: float = Field(1.0, gt=0)
    sigma_min: float = Field(0.002, gt=0)
    sigma_max: float = Field(80.0, gt=0)
    rho: float = Field(7.0, ge=1)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.sigma_min < self.sigma_max:
            raise ValueError(f"sigma_min ({self.sigma_min}) must be < sigma_max ({self.sigma_max})")
        return self


class TrainLogNormal(_Frozen):
    kind: Literal["train"] = "train"
    p_mean: float = -0.4
    p_std: float = Field(1.0, gt=0)


class InferencePower(_Frozen):
    kind: Literal["inference"] = "inference"
    sigma_min: float = Field(0.002, gt=0)
    sigma_max: float = Field(80.0, gt=0)
    rho: float = Field(7.0, ge=1)
    levels: Optional[int] = Field(None, ge=1)


NoiseDistribution = Union[TrainLogNormal, InferencePower]


def train_distribution(cfg: EdmConfig) -> TrainLogNormal:
    return TrainLogNormal(p_mean=cfg.p_mean, p_std=cfg.p_std)


def inference_distribution(cfg: EdmConfig, levels: Optional[int] = None) -> InferencePower:
    return InferencePower(sigma_min=cfg.sigma_min, sigma_max=cfg.sigma_max, rho=cfg.rho, levels=levels)


class GuidanceConfig(_Frozen):
    weight: float = Field(1.0, ge=0)
    mode: Literal["cfg", "cfg++"] = "cfg"

    @model_validator(mode="after")
    def _bounded(self):
        if self.mode == "cfg++" and not 0.0 < self.weight <= 1.0:
            raise ValueError(f"CFG++ needs weight in (0, 1], got {self.weight}")
        return self


class DomainError(ValueError):
    pass


def _positive_sigma(sigma, what="sigma"):
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(~(s > 0)):
        raise DomainError(f"{what} must be > 0, got {s[~(s > 0)].ravel()[:3]}")
    return s


@dataclass(frozen=True)
class PreconditionCoeffs:
    c_skip: np.ndarray
    c_out: np.ndarray
    c_in: np.ndarray
    c_noise: np.ndarray


def precondition(sigma, cfg: EdmConfig = EdmConfig()) -> PreconditionCoeffs:
    s = _positive_sigma(sigma)
    sd = cfg.sigma_data
    r = np.sqrt(s * s + sd * sd)
    return PreconditionCoeffs(
        c_skip=sd * sd / (s * s + sd * sd),
        c_out=s * sd / r,
        c_in=1.0 / r,
        c_noise=np.log(s) / 4.0,
    )


def loss_weight(sigma, cfg: EdmConfig = EdmConfig()) -> np.ndarray:
    """lambda(sigma) = 1 / c_out(sigma)^2."""
    s = _positive_sigma(sigma)
    sd = cfg.sigma_data
    return (s * s + sd * sd) / (s * sd) ** 2


def _col(a, ndim):
    """Reshape per-sample values (B,) to broadcast against (B, ...)."""
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape + (1,) * (ndim - a.ndim))


def denoise(net, x, sigma, condition, cfg: EdmConfig = EdmConfig(), **net_kwargs) -> Tensor:
    """c_skip x + c_out net(c_in x, c_noise, condition).

    ``net(x_in, c_noise, condition, **net_kwargs)`` must return a Tensor of
    x's shape. ``sigma`` is a scalar or one value per sample.
    """
    x = T.as_tensor(x)
    s = np.broadcast_to(_positive_sigma(sigma), x.shape[:1])
    c = precondition(s, cfg)
    x_in = x * _col(c.c_in, x.ndim)
    f = net(x_in, c.c_noise, condition, **net_kwargs)
    if f.shape != x.shape:
        raise T.ShapeError("denoise", x.shape, f.shape)
    return x * _col(c.c_skip, x.ndim) + f * _col(c.c_out, x.ndim)


def score_from_denoiser(x, sigma, x_hat) -> np.ndarray:
    """grad_x log p(x | sigma) = (x_hat - x) / sigma^2."""
    x = np.asarray(getattr(x, "data", x))
    x_hat = np.asarray(getattr(x_hat, "data", x_hat))
    s = _col(_positive_sigma(sigma), x.ndim)
    return (x_hat - x) / (s * s)


def sigma_scaled_residual(x, sigma, x_hat) -> np.ndarray:
    """(x - x_hat) / sigma, i.e. the noise estimate; equals -sigma * score."""
    x = np.asarray(getattr(x, "data", x))
    x_hat = np.asarray(getattr(x_hat, "data", x_hat))
    s = _col(_positive_sigma(sigma), x.ndim)
    return (x - x_hat) / s


def dsm_loss(denoiser, x_real, sigma, eps, weighting=None, cfg: EdmConfig = EdmConfig()) -> Tensor:
    """Batch mean of lambda(sigma) * ||x_real - denoiser(x_real + eps sigma, sigma)||^2.

    ``denoiser(x_noisy, sigma)`` returns a Tensor. ``weighting`` maps sigma to
    lambda; defaults to :func:`loss_weight`.
    """
    x_real = T.as_tensor(x_real)
    s = np.broadcast_to(_positive_sigma(sigma), x_real.shape[:1]).astype(np.float64)
    noisy = x_real.data + np.asarray(eps) * _col(s, x_real.ndim)
    lam = loss_weight(s, cfg) if weighting is None else np.asarray(weighting(s), dtype=np.float64)
    where = f"sigma in [{s.min():.4g}, {s.max():.4g}]"
    try:
        x_hat = denoiser(noisy, s)
        diff = x_real - x_hat
        per = (diff * diff).reshape(diff.shape[0], -1).sum(axis=1)
        loss = (per * lam).mean()
    except T.NonFiniteError as err:
        raise FloatingPointError(f"dsm_loss non-finite ({err}) at {where}") from err
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"dsm_loss non-finite at {where}")
    return loss


def sigma_from_u(u, sigma_min: float, sigma_max: float, rho: float):
    """rho-power interpolant: u=0 -> sigma_max, u=1 -> sigma_min."""
    a = sigma_max ** (1.0 / rho)
    b = sigma_min ** (1.0 / rho)
    return (a + np.asarray(u, dtype=np.float64) * (b - a)) ** rho


def u_from_sigma(sigma, sigma_min: float, sigma_max: float, rho: float):
    a = sigma_max ** (1.0 / rho)
    b = sigma_min ** (1.0 / rho)
    return (np.asarray(sigma, dtype=np.float64) ** (1.0 / rho) - a) / (b - a)


def inference_schedule(n: int, rho: float = 7.0, sigma_min: float = 0.002,
                       sigma_max: float = 80.0) -> np.ndarray:
    """N strictly decreasing levels from sigma_max to sigma_min (endpoints exact)."""
    if n < 1:
        raise DomainError(f"schedule needs N >= 1, got {n}")
    if rho < 1:
        raise DomainError(f"rho must be >= 1, got {rho}")
    if n == 1:
        return np.array([float(sigma_max)])
    out = sigma_from_u(np.arange(n) / (n - 1), sigma_min, sigma_max, rho)
    out[0] = sigma_max
    out[-1] = sigma_min
    return out


def sample_sigma(dist: NoiseDistribution, stream: SeededStream, n: int = 1) -> np.ndarray:
    if isinstance(dist, TrainLogNormal):
        return np.exp(dist.p_mean + dist.p_std * stream.normal(n))
    if dist.levels is not None:
        levels = inference_schedule(dist.levels, dist.rho, dist.sigma_min, dist.sigma_max)
        return levels[stream.integers(0, dist.levels, size=n)]
    s = sigma_from_u(stream.uniform(n), dist.sigma_min, dist.sigma_max, dist.rho)
    return np.clip(s, dist.sigma_min, dist.sigma_max)


def guided_combination(uncond, cond, weight: float):
    """mu(null) + w (mu(e) - mu(null)); works on arrays and Tensors."""
    if weight == 1.0:
        return cond
    if weight == 0.0:
        return uncond
    return uncond + (cond - uncond) * weight


def guided_denoise(denoiser, x, sigma, condition, guidance: GuidanceConfig):
    """Classifier-free guided prediction.

    ``denoiser(x, sigma, condition)`` must accept ``condition.null()``.
    Returns ``(guided, direction)`` where ``direction`` is the prediction a
    sampler should renoise along: the guided one for CFG, the unconditional
    one for CFG++.
    """
    if guidance.mode == "cfg++" and not 0.0 < guidance.weight <= 1.0:
        raise ValueError(f"CFG++ needs weight in (0, 1], got {guidance.weight}")
    w = guidance.weight
    if w == 1.0 and guidance.mode == "cfg":
        out = denoiser(x, sigma, condition)
        return out, out
    uncond = denoiser(x, sigma, condition.null())
    cond = uncond if w == 0.0 else denoiser(x, sigma, condition)
    guided = guided_combination(uncond, cond, w)
    return guided, (uncond if guidance.mode == "cfg++" else guided)


def snr_db(sigma):
    s = _positive_sigma(sigma)
    out = -20.0 * np.log10(s)
    return float(out) if out.ndim == 0 else out


def lognormal_median(cfg: EdmConfig = EdmConfig()) -> float:
    return math.exp(cfg.p_mean)
