"""Synthetic datasets: a 2-D Gaussian mixture with an exact oracle and
bounded 1-D toy signals conditioned on category and tempo bucket."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..condition import Condition
from ..models.gmm import GmmOracle
from ..numerics import SeededStream


def ring_means(n: int = 8, radius: float = 0.6) -> list:
    a = 2 * np.pi * np.arange(n) / n
    return [(float(radius * np.cos(t)), float(radius * np.sin(t))) for t in a]


class Gmm2DSpec(BaseModel):
    """Mixture of 2-D Gaussians; each component carries a category label.

    The default is eight components on a ring with category c owning the
    two opposite components c and c+4, so every conditional is bimodal.
    ``component_category=None`` labels each component with its own id.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["gmm2d"] = "gmm2d"
    means: list[tuple[float, float]] = ring_means()
    std: float = Field(0.1, gt=0)
    weights: Optional[list[float]] = None
    covs: Optional[list[list[list[float]]]] = None
    component_category: Optional[list[int]] = [0, 1, 2, 3, 0, 1, 2, 3]
    size: int = Field(8192, ge=1)

    @model_validator(mode="after")
    def _shapes(self):
        k = len(self.means)
        if self.component_category is not None:
            cc = self.component_category
            if len(cc) != k:
                raise ValueError(f"{len(cc)} category labels for {k} components")
            if min(cc) < 0 or set(cc) != set(range(max(cc) + 1)):
                raise ValueError(f"category labels must cover 0..C-1 without gaps, got {cc}")
        if self.weights is not None and len(self.weights) != k:
            raise ValueError(f"{len(self.weights)} weights for {k} components")
        if self.covs is not None:
            covs = np.asarray(self.covs, dtype=np.float64)
            if covs.shape != (k, 2, 2):
                raise ValueError(f"covs must have shape ({k}, 2, 2), got {covs.shape}")
            if np.any(np.linalg.eigvalsh((covs + covs.transpose(0, 2, 1)) / 2) <= 0) \
                    or not np.allclose(covs, covs.transpose(0, 2, 1)):
                raise ValueError("covs must be symmetric positive definite")
        return self

    @property
    def categories(self) -> int:
        return len(self.means) if self.component_category is None else max(self.component_category) + 1

    @property
    def labels(self) -> np.ndarray:
        return np.arange(len(self.means)) if self.component_category is None else np.asarray(self.component_category)

    def denoiser(self):
        from ..models.gmm import GmmDenoiser

        return GmmDenoiser(self.oracle(), self.labels)

    def oracle(self) -> GmmOracle:
        k = len(self.means)
        w = np.full(k, 1.0 / k) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        w = w / w.sum()
        if self.covs is None:
            return GmmOracle.isotropic(w, self.means, self.std)
        return GmmOracle(w, np.asarray(self.means), np.asarray(self.covs))


class ToySignal1DSpec(BaseModel):
    """Sines whose frequency is set by the category and whose phase drift by the tempo bucket."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["signal1d"] = "signal1d"
    length: int = Field(16, ge=2)
    categories: int = Field(4, ge=1)
    tempo_buckets: int = Field(3, ge=1)
    base_cycles: float = Field(1.0, gt=0)
    phase_rate: float = Field(0.25, ge=0)
    amp_range: tuple[float, float] = (0.5, 0.9)
    size: int = Field(8192, ge=1)

    @model_validator(mode="after")
    def _amp(self):
        lo, hi = self.amp_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"amp_range must satisfy 0 < lo <= hi <= 1, got {self.amp_range}")
        return self


DatasetSpec = Union[Gmm2DSpec, ToySignal1DSpec]


@dataclass
class SyntheticDataset:
    x: np.ndarray
    condition: Condition
    oracle: Optional[GmmOracle] = None
    labels: Optional[np.ndarray] = None    # category of each mixture component

    def __len__(self):
        return len(self.x)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def batch(self, stream: SeededStream, n: int):
        idx = stream.integers(0, len(self.x), size=n)
        return self.x[idx], self.condition.take(idx)


def signal_values(spec: ToySignal1DSpec, category, tempo, amp, phase) -> np.ndarray:
    t = np.arange(spec.length) / spec.length
    f = spec.base_cycles * (1 + np.asarray(category))[:, None]
    drift = spec.phase_rate * (1 + np.asarray(tempo))[:, None]
    arg = 2 * np.pi * (f * t[None, :] + drift * t[None, :] ** 2) + np.asarray(phase)[:, None]
    return np.asarray(amp)[:, None] * np.sin(arg)


def generate_dataset(spec: DatasetSpec, stream: SeededStream, size: Optional[int] = None) -> SyntheticDataset:
    n = spec.size if size is None else size
    if isinstance(spec, Gmm2DSpec):
        oracle = spec.oracle()
        x, comp = oracle.sample(n, stream)
        return SyntheticDataset(x, Condition.make(spec.labels[comp]), oracle, spec.labels)
    cat = stream.integers(0, spec.categories, size=n)
    tempo = stream.integers(0, spec.tempo_buckets, size=n)
    amp = stream.uniform(n, *spec.amp_range)
    phase = stream.uniform(n, 0.0, 2 * np.pi)
    x = signal_values(spec, cat, tempo, amp, phase)
    return SyntheticDataset(x, Condition.make(cat, tempo), None)
