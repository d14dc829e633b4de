"""Budget-aware layer dropping: noise-quintile budgets, shifted dropping that
keeps the final layer, budget conditioning and the self-teacher loss.

The BaselineBack variant (drop the last ``b`` layers) is the early-exit
baseline; ShiftedKeepLast drops from the second-to-last layer backwards so
the final layer always runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from ..condition import Condition
from ..diffusion import EdmConfig, loss_weight, sample_sigma, train_distribution, u_from_sigma, _col
from ..numerics import SeededStream, Tensor, no_grad
from ..numerics import tensor as T

# budgets per noise quintile (highest noise first) for a 24-layer reference depth
D3_BUDGETS = (14, 12, 8, 4, 0)
REDUCED_BUDGETS = (12, 8, 8, 0, 0)
REFERENCE_DEPTH = 24

Variant = Literal["shifted", "baseline"]


class ScheduleError(ValueError):
    pass


def scale_budgets(budgets: Sequence[int], depth: int, reference_depth: int = REFERENCE_DEPTH) -> tuple:
    """Proportional rounding (half up) of reference-depth budgets to ``depth``."""
    return tuple(int(math.floor(b * depth / reference_depth + 0.5)) for b in budgets)


def quintile(sigma, rho: float = 7.0, sigma_min: float = 0.002, sigma_max: float = 80.0) -> np.ndarray:
    """Quintile of schedule position u (0 = sigma_max, 1 = sigma_min); 0 is the noisiest."""
    u = np.clip(u_from_sigma(sigma, sigma_min, sigma_max, rho), 0.0, 1.0)
    return np.minimum(np.floor(5.0 * u), 4).astype(np.int64)


def quintile_edges(rho: float = 7.0, sigma_min: float = 0.002, sigma_max: float = 80.0) -> np.ndarray:
    """The four sigma values separating the quintiles, decreasing."""
    from ..diffusion import sigma_from_u

    return sigma_from_u(np.array([0.2, 0.4, 0.6, 0.8]), sigma_min, sigma_max, rho)


def executed_layers(budget: int, depth: int, variant: Variant = "shifted") -> list:
    b = int(budget)
    if b < 0 or b >= depth:
        raise ScheduleError(f"budget {b} outside [0, {depth - 1}] for depth {depth}")
    if b == 0:
        return list(range(1, depth + 1))
    if variant == "baseline":
        return list(range(1, depth - b + 1))
    if variant == "shifted":
        return list(range(1, depth - b)) + [depth]
    raise ScheduleError(f"unknown dropping variant {variant!r}")


class DropSchedule(BaseModel):
    """Per-quintile drop budgets (already in layers of the target model)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    budgets: tuple[int, int, int, int, int]
    variant: Variant = "shifted"
    rho: float = Field(7.0, ge=1)
    sigma_min: float = Field(0.002, gt=0)
    sigma_max: float = Field(80.0, gt=0)

    @field_validator("budgets")
    @classmethod
    def _nonneg(cls, v):
        if any(b < 0 for b in v):
            raise ValueError(f"budgets must be >= 0, got {v}")
        return v

    @classmethod
    def scaled(cls, depth: int, budgets=D3_BUDGETS, variant: Variant = "shifted",
               edm: Optional[EdmConfig] = None, reference_depth: int = REFERENCE_DEPTH) -> "DropSchedule":
        edm = edm or EdmConfig()
        return cls(budgets=scale_budgets(budgets, depth, reference_depth), variant=variant,
                   rho=edm.rho, sigma_min=edm.sigma_min, sigma_max=edm.sigma_max)

    def validate_depth(self, depth: int):
        for b in self.budgets:
            if b >= depth:
                raise ScheduleError(f"budget {b} >= depth {depth}")

    def quintile(self, sigma) -> np.ndarray:
        return quintile(sigma, self.rho, self.sigma_min, self.sigma_max)

    def budget(self, sigma) -> np.ndarray:
        return np.asarray(self.budgets)[self.quintile(sigma)]

    def route(self, sigma, depth: int) -> list:
        """Split a batch by budget: list of (indices, budget, executed layers)."""
        b = self.budget(np.atleast_1d(sigma))
        out = []
        for v in np.unique(b):
            out.append((np.flatnonzero(b == v), int(v), executed_layers(int(v), depth, self.variant)))
        return out


def drop_set(sigma: float, schedule: DropSchedule, depth: int) -> list:
    return executed_layers(int(schedule.budget(np.atleast_1d(sigma))[0]), depth, schedule.variant)


def self_teacher_loss(h_dropped: Tensor, h_full) -> Tensor:
    """Mean squared distance to the stop-gradient full-depth hidden state."""
    h_full = T.stop_gradient(T.as_tensor(h_full))
    if h_dropped.shape != h_full.shape:
        raise T.ShapeError("self_teacher_loss", h_dropped.shape, h_full.shape)
    d = h_dropped - h_full
    return (d * d).mean()


class PrestoLConfig(BaseModel):
    """Layer distillation settings. The three booleans are the ablation ingredients."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    budgets: tuple[int, int, int, int, int] = D3_BUDGETS
    reference_depth: int = Field(REFERENCE_DEPTH, ge=2)
    shifted: bool = True
    budget_conditioning: bool = True
    self_teacher: bool = True
    self_teacher_weight: float = Field(1.0, ge=0)
    steps: int = Field(2000, ge=0)
    batch: int = Field(128, ge=1)
    lr: float = Field(3e-4, gt=0)

    def schedule(self, depth: int, edm: Optional[EdmConfig] = None) -> DropSchedule:
        return DropSchedule.scaled(depth, self.budgets, "shifted" if self.shifted else "baseline",
                                   edm, self.reference_depth)

    @property
    def effective_self_teacher_weight(self) -> float:
        return self.self_teacher_weight if self.self_teacher else 0.0


@dataclass
class LayerStepLosses:
    dsm: float
    self_teacher: float
    total: float


def presto_l_step(denoiser, x_real, condition: Condition, cfg: PrestoLConfig, optimizer,
                  stream: SeededStream) -> LayerStepLosses:
    """One optimizer step on DSM(dropped path) + weight * self-teacher loss.

    ``denoiser`` is an EdmDenoiser whose ``schedule`` is set; its budget path
    (if any) receives each sample's budget. The full-depth reference is a
    no-grad forward of the same weights at budget 0.
    """
    edm = denoiser.edm
    x_real = np.asarray(x_real, dtype=np.float64)
    n = len(x_real)
    sigma = sample_sigma(train_distribution(edm), stream, n)
    eps = stream.normal(x_real.shape)
    noisy = x_real + eps * _col(sigma, x_real.ndim)
    lam = loss_weight(sigma, edm)

    optimizer.zero_grad()
    pred = denoiser.forward(noisy, sigma, condition)
    diff = Tensor(x_real) - pred.x_hat
    dsm = ((diff * diff).sum(axis=1) * lam).mean()
    total = dsm
    st_val = 0.0
    w = cfg.effective_self_teacher_weight
    if w > 0:
        with no_grad():
            full = denoiser.forward(noisy, sigma, condition, full=True,
                                    budget=np.zeros(n) if denoiser.net.has_budget_path else None)
        st = self_teacher_loss(pred.h_norm, full.h_norm)
        st_val = float(st.data)
        total = total + st * w
    if not np.isfinite(total.data):
        raise FloatingPointError(f"layer-distillation loss non-finite (sigma range {sigma.min():.3g}..{sigma.max():.3g})")
    total.backward()
    optimizer.step()
    return LayerStepLosses(float(dsm.data), st_val, float(total.data))


def ablation_masks() -> list:
    """Ingredient masks (shifted, budget_conditioning, self_teacher) for the layer ablation grid:
    the early-exit baseline, each ingredient added alone, and the full method."""
    return [
        (False, False, False),
        (True, False, False),
        (False, True, False),
        (False, False, True),
        (True, True, True),
    ]
