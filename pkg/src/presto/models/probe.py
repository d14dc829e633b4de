"""Hidden-state variance probes across depth and noise level."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ..diffusion import _col, precondition
from ..numerics import SeededStream, no_grad


@dataclass
class ActivationProfile:
    sigmas: list = field(default_factory=list)
    layers: list = field(default_factory=list)
    variance: dict = field(default_factory=dict)   # (layer, sigma) -> float

    def curve(self, sigma) -> np.ndarray:
        return np.array([self.variance[(i, sigma)] for i in self.layers])

    def last_to_median_ratio(self, sigma) -> float:
        c = self.curve(sigma)
        med = float(np.median(c))
        return float(c[-1] / med) if med > 0 else float("inf")

    def rows(self):
        for s in self.sigmas:
            for i in self.layers:
                yield {"sigma": s, "layer": i, "variance": self.variance[(i, s)]}

    def to_csv(self, path, schema="probe/1"):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["schema_version", "sigma", "layer", "variance", "last_to_median"])
            for s in self.sigmas:
                ratio = self.last_to_median_ratio(s)
                for i in self.layers:
                    w.writerow([schema, repr(float(s)), i, repr(self.variance[(i, s)]), repr(ratio)])


def variance_profile(denoiser, batch, condition, sigma_levels, seed: int = 0,
                     executed_layers=None) -> ActivationProfile:
    """Per-layer variance of hidden activations over the batch, one curve per sigma."""
    if len(sigma_levels) == 0:
        raise ValueError("sigma_levels is empty")
    net, edm = denoiser.net, denoiser.edm
    x0 = np.asarray(batch, dtype=np.float64)
    prof = ActivationProfile(sigmas=[float(s) for s in sigma_levels])
    for j, s in enumerate(prof.sigmas):
        eps = SeededStream(seed, j).normal(x0.shape)
        x = x0 + s * eps
        sig = np.full(len(x), s)
        c = precondition(sig, edm)
        budget = np.zeros(len(x)) if net.has_budget_path else None
        with no_grad():
            r = net.forward(x * _col(c.c_in, 2), c.c_noise, condition, budget, executed_layers)
        prof.layers = list(r.layers)
        for i, h in zip(r.layers, r.hidden):
            # variance across the batch for each (token, channel), averaged over features
            prof.variance[(i, s)] = float(np.var(h.data, axis=0).mean())
    return prof
