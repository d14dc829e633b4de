"""Probability-flow ODE samplers for teachers and ping-pong sampling for
few-step generators.

Every sampler is a pure function of (model, schedule, condition, seed): the
noise for sample ``i`` comes from its own stream ``SeededStream(seed, i)``,
so a sample does not depend on the batch it was drawn in. Draw 0 is the
initial latent; draws 1.. are the renoising draws of ping-pong sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .condition import Condition
from .diffusion import GuidanceConfig, guided_denoise, inference_schedule

KINDS = ("euler", "heun", "dpm2s", "pingpong")


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["euler", "heun", "dpm2s", "pingpong"] = "heun"
    steps: int = Field(40, ge=1)
    rho: float = Field(7.0, ge=1)
    guidance: GuidanceConfig = GuidanceConfig()
    seed: int = 0


@dataclass
class Trajectory:
    sigmas: list = field(default_factory=list)
    states: list = field(default_factory=list)

    def append(self, sigma, x):
        self.sigmas.append(float(sigma))
        self.states.append(np.array(x))


class SamplingError(FloatingPointError):
    pass


def latent_noise(seed: int, n: int, dim: int, draws: int = 1, offset: int = 0) -> np.ndarray:
    """Per-sample standard normal draws, shape (draws, n, dim).

    ``offset`` shifts the sample index so batches can be generated in chunks.
    """
    from .numerics import SeededStream

    out = np.empty((draws, n, dim))
    for i in range(n):
        out[:, i, :] = SeededStream(seed, offset + i).normal((draws, dim))
    return out


def _check(x, what):
    if not np.isfinite(x).all():
        raise SamplingError(f"non-finite state at {what}")


def _predict(denoiser, x, sigma, condition, guidance):
    s = np.full(x.shape[0], sigma)
    if guidance is None:
        out = denoiser(x, s, condition)
        return out, out
    return guided_denoise(denoiser, x, s, condition, guidance)


def ode_sample(denoiser, schedule, condition: Condition, guidance: Optional[GuidanceConfig] = None,
               seed: int = 0, dim: int = 2, method: str = "heun", x_init=None,
               return_trajectory: bool = False):
    """Integrate dx = (x - D(x, sigma)) / sigma dsigma along ``schedule``.

    ``schedule`` has N+1 levels for N steps. Heun applies its second-order
    correction on every step except the last. With CFG++ (Euler only) the
    state is renoised along the unconditional prediction.
    """
    schedule = np.asarray(schedule, dtype=np.float64)
    if len(schedule) < 2:
        raise ValueError("an ODE schedule needs at least two levels")
    if method not in ("euler", "heun"):
        raise ValueError(f"unknown ODE method {method!r}")
    cfgpp = guidance is not None and guidance.mode == "cfg++"
    if cfgpp and method == "heun":
        raise ValueError("CFG++ is supported by the euler and dpm2s samplers")
    n = len(condition)
    x = schedule[0] * (latent_noise(seed, n, dim)[0] if x_init is None else np.asarray(x_init))
    traj = Trajectory()
    traj.append(schedule[0], x)
    last = len(schedule) - 2
    for i in range(len(schedule) - 1):
        s, s_next = schedule[i], schedule[i + 1]
        d_w, d_dir = _predict(denoiser, x, s, condition, guidance)
        if cfgpp:
            x_next = d_w + (s_next / s) * (x - d_dir)
        else:
            slope = (x - d_w) / s
            x_next = x + (s_next - s) * slope
            if method == "heun" and i < last:
                d2, _ = _predict(denoiser, x_next, s_next, condition, guidance)
                slope2 = (x_next - d2) / s_next
                x_next = x + (s_next - s) * 0.5 * (slope + slope2)
        _check(x_next, f"step {i} (sigma {s:.4g} -> {s_next:.4g})")
        x = x_next
        traj.append(s_next, x)
    return (x, traj) if return_trajectory else x


def dpm2s_sample(denoiser, schedule, condition: Condition, guidance: Optional[GuidanceConfig] = None,
                 seed: int = 0, dim: int = 2, x_init=None, return_trajectory: bool = False):
    """Second-order multistep data-prediction solver in log-sigma (DPM-Solver++ 2M).

    The first and the final step are first order. Under CFG++ the update is
    ``x' = D_w + (s'/s)(x - D_null)``.
    """
    schedule = np.asarray(schedule, dtype=np.float64)
    if len(schedule) < 2:
        raise ValueError("an ODE schedule needs at least two levels")
    cfgpp = guidance is not None and guidance.mode == "cfg++"
    n = len(condition)
    x = schedule[0] * (latent_noise(seed, n, dim)[0] if x_init is None else np.asarray(x_init))
    traj = Trajectory()
    traj.append(schedule[0], x)
    old = None
    last = len(schedule) - 2
    for i in range(len(schedule) - 1):
        s, s_next = schedule[i], schedule[i + 1]
        d_w, d_dir = _predict(denoiser, x, s, condition, guidance)
        ratio = s_next / s
        d = d_w
        if old is not None and i < last:
            h = np.log(s / s_next)
            h_last = np.log(schedule[i - 1] / s)
            r = h_last / h
            d = (1.0 + 1.0 / (2.0 * r)) * d_w - (1.0 / (2.0 * r)) * old
        if cfgpp:
            x_next = d + ratio * (x - d_dir)
        else:
            x_next = ratio * x + (1.0 - ratio) * d
        old = d_w
        _check(x_next, f"step {i} (sigma {s:.4g} -> {s_next:.4g})")
        x = x_next
        traj.append(s_next, x)
    return (x, traj) if return_trajectory else x


def ping_pong_sample(generator, schedule, condition: Condition, seed: int = 0, dim: int = 2,
                     return_trajectory: bool = False):
    """Denoise with ``generator`` at each level, renoising to the next level in between."""
    schedule = np.asarray(schedule, dtype=np.float64)
    n_levels = len(schedule)
    if n_levels == 0:
        raise ValueError("ping-pong sampling needs at least one level")
    n = len(condition)
    noise = latent_noise(seed, n, dim, draws=n_levels)
    x = schedule[0] * noise[0]
    traj = Trajectory()
    x_hat = None
    for i in range(n_levels):
        traj.append(schedule[i], x)
        x_hat = np.asarray(generator(x, np.full(n, schedule[i]), condition))
        _check(x_hat, f"level {i} (sigma {schedule[i]:.4g})")
        if i < n_levels - 1:
            x = x_hat + schedule[i + 1] * noise[i + 1]
    traj.append(0.0, x_hat)
    return (x_hat, traj) if return_trajectory else x_hat


def run_sampler(model, cfg: SamplerConfig, condition: Condition, dim: int = 2,
                sigma_min: float = 0.002, sigma_max: float = 80.0):
    """Dispatch on ``cfg.kind``. ODE samplers use steps+1 levels, ping-pong uses steps."""
    guidance = None if (cfg.guidance.mode == "cfg" and cfg.guidance.weight == 1.0) else cfg.guidance
    if cfg.kind == "pingpong":
        sched = inference_schedule(cfg.steps, cfg.rho, sigma_min, sigma_max)
        gen = model if guidance is None else (lambda x, s, c: guided_denoise(model, x, s, c, guidance)[0])
        return ping_pong_sample(gen, sched, condition, cfg.seed, dim)
    sched = inference_schedule(cfg.steps + 1, cfg.rho, sigma_min, sigma_max)
    if cfg.kind == "dpm2s":
        return dpm2s_sample(model, sched, condition, guidance, cfg.seed, dim)
    return ode_sample(model, sched, condition, guidance, cfg.seed, dim, method=cfg.kind)
