"""Sample-quality metrics, real-time factor, rejection sampling and rho sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg

from . import _kernels
from .condition import Condition
from .diffusion import inference_schedule
from .samplers import ping_pong_sample

METRIC_SCHEMA = "metrics/1"


class MetricError(ValueError):
    pass


def _as_set(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or len(x) == 0:
        raise MetricError(f"{name} must be a nonempty (n, d) array, got shape {x.shape}")
    return np.ascontiguousarray(x)


def median_bandwidth(x, y) -> float:
    """Median pairwise distance over the pooled set (off-diagonal pairs)."""
    z = np.concatenate([_as_set(x, "X"), _as_set(y, "Y")])
    d = np.sqrt(_kernels.pairwise_sqdist(z, z))
    iu = np.triu_indices(len(z), k=1)
    h = float(np.median(d[iu]))
    if not h > 0:
        raise MetricError("median heuristic bandwidth is zero (all points coincide)")
    return h


def mmd_rbf(x, y, bandwidth: Optional[float] = None) -> float:
    """Unbiased squared MMD with kernel exp(-|a-b|^2 / (2 h^2)).

    ``bandwidth=None`` uses the median heuristic on the pooled set.
    """
    x, y = _as_set(x, "X"), _as_set(y, "Y")
    if x.shape[1] != y.shape[1]:
        raise MetricError(f"dimension mismatch {x.shape[1]} vs {y.shape[1]}")
    if len(x) < 2 or len(y) < 2:
        raise MetricError("unbiased MMD needs at least two points per set")
    h = median_bandwidth(x, y) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise MetricError(f"bandwidth must be > 0, got {bandwidth}")
    # fixed argument order so that mmd(X, Y) and mmd(Y, X) run identical arithmetic
    if (len(y), y.tobytes()) < (len(x), x.tobytes()):
        x, y = y, x
    sxx, syy, sxy = _kernels.rbf_sums(x, y, 1.0 / (2.0 * h * h))
    m, n = len(x), len(y)
    return float(sxx / (m * (m - 1)) + syy / (n * (n - 1)) - 2.0 * sxy / (m * n))


def frechet_gauss(x, y, eps: float = 0.0) -> float:
    """|mu_x - mu_y|^2 + tr(Cx + Cy - 2 (Cx Cy)^(1/2))."""
    x, y = _as_set(x, "X"), _as_set(y, "Y")
    d = x.shape[1]
    if len(x) <= d or len(y) <= d:
        raise MetricError(f"need more samples than dimensions ({d})")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    cx = np.atleast_2d(np.cov(x, rowvar=False)) + eps * np.eye(d)
    cy = np.atleast_2d(np.cov(y, rowvar=False)) + eps * np.eye(d)
    for c, name in ((cx, "X"), (cy, "Y")):
        if np.linalg.eigvalsh(c).min() < -1e-12:
            raise MetricError(f"covariance of {name} is not positive semi-definite")
    covmean = scipy.linalg.sqrtm(cx @ cy)
    if not np.isfinite(covmean).all():
        raise MetricError("matrix square root failed; increase eps")
    covmean = np.real(covmean)
    diff = mx - my
    return float(diff @ diff + np.trace(cx) + np.trace(cy) - 2.0 * np.trace(covmean))


class Prdc(NamedTuple):
    density: float
    recall: float
    coverage: float


def prdc(real, fake, k: int = 3) -> Prdc:
    """Density, recall and coverage from k-NN balls (the self point excluded)."""
    real, fake = _as_set(real, "X_real"), _as_set(fake, "X_fake")
    if k < 1 or k >= min(len(real), len(fake)):
        raise MetricError(f"k={k} must satisfy 1 <= k < min sample count")
    r_real = _kernels.kth_neighbour_dist(real, k)
    r_fake = _kernels.kth_neighbour_dist(fake, k)
    if not (r_real > 0).any() or not (r_fake > 0).any():
        raise MetricError("all k-NN radii are zero (duplicate-only sample set)")
    dist = np.sqrt(_kernels.pairwise_sqdist(real, fake))           # (R, F)
    inside_real = dist < r_real[:, None]
    density = inside_real.sum() / (k * len(fake))
    recall = (dist < r_fake[None, :]).any(axis=1).mean()
    coverage = (dist.min(axis=1) < r_real).mean()
    return Prdc(float(density), float(recall), float(coverage))


def rtf(duration: float, batch: int, latency: float) -> float:
    """Real-time factor b * T / latency."""
    if not latency > 0:
        raise MetricError(f"latency must be > 0, got {latency}")
    return batch * duration / latency


def rejection_sample(batch, scores, ratio: float):
    """Keep the ceil((1-r) n) highest-scoring items; ties go to the lower index.

    Returns ``(kept_items, kept_indices)`` with indices in ranking order.
    """
    if not 0.0 <= ratio < 1.0:
        raise MetricError(f"rejection ratio must lie in [0, 1), got {ratio}")
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if len(batch) != n:
        raise MetricError(f"{len(batch)} items but {n} scores")
    keep = math.ceil((1.0 - ratio) * n - 1e-12)
    order = np.lexsort((np.arange(n), -scores))[:keep]
    return np.asarray(batch)[order], order


def _labels(oracle, labels):
    return np.arange(oracle.n_components) if labels is None else np.asarray(labels)


def condition_log_likelihood(x, condition: Condition, oracle, labels=None) -> np.ndarray:
    """Log density of each sample under the sub-mixture its category names
    (``labels[j]`` is the category of component ``j``); null uses the full mixture."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = _labels(oracle, labels)
    out = np.empty(len(x))
    for k in np.unique(condition.category):
        idx = condition.category == k
        src = oracle if k < 0 else oracle.subset(np.flatnonzero(labels == k))
        out[idx] = src.log_marginal(x[idx], np.full(idx.sum(), 1e-12))
    return out


def nearest_component(x, oracle) -> np.ndarray:
    """Most likely mixture component (weights included) for each sample."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ll = np.stack([oracle.component(k).log_marginal(x, np.full(len(x), 1e-12)) + np.log(oracle.weights[k])
                   for k in range(oracle.n_components)], axis=1)
    return ll.argmax(axis=1)


def consistency(x, condition: Condition, oracle, labels=None) -> float:
    """Fraction of samples whose most likely component belongs to their category."""
    return float((_labels(oracle, labels)[nearest_component(x, oracle)] == condition.category).mean())


def signal_features(x, n_features: int = 8, seed: int = 1234) -> np.ndarray:
    """Fixed random-projection summary for 1-D signals: projections plus per-sample RMS."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    proj = np.random.default_rng(seed).standard_normal((x.shape[1], n_features)) / np.sqrt(x.shape[1])
    rms = np.sqrt((x * x).mean(axis=1, keepdims=True))
    return np.concatenate([x @ proj, rms], axis=1)


def sample_metrics(real, fake, k: int = 3) -> dict:
    p = prdc(real, fake, k)
    return {"mmd": mmd_rbf(real, fake), "frechet": frechet_gauss(real, fake),
            "density": p.density, "recall": p.recall, "coverage": p.coverage}


@dataclass
class RhoSweep:
    rhos: list
    schedules: dict
    samples: dict
    distances: dict     # (rho_a, rho_b) -> mean per-sample L2 distance


def rho_sweep(generator, steps: int, rhos, condition: Condition, seed: int = 0, dim: int = 2,
              sigma_min: float = 0.002, sigma_max: float = 80.0) -> RhoSweep:
    """Ping-pong sample at each rho with shared latents; compare the sample sets."""
    out = RhoSweep(list(rhos), {}, {}, {})
    for r in out.rhos:
        sched = inference_schedule(steps, r, sigma_min, sigma_max)
        out.schedules[r] = sched
        out.samples[r] = ping_pong_sample(generator, sched, condition, seed, dim)
    for i, a in enumerate(out.rhos):
        for b in out.rhos[i + 1:]:
            out.distances[(a, b)] = float(np.linalg.norm(out.samples[a] - out.samples[b], axis=1).mean())
    return out


METRIC_COLUMNS = ["schema_version", "model", "sampler", "steps", "rho", "seed", "metric", "value"]


@dataclass
class MetricReport:
    """Append-only metric rows; wall-clock numbers belong in a separate timing file."""

    rows: list = field(default_factory=list)

    def add(self, model: str, sampler: str, steps: int, rho: float, seed: int, metric: str, value: float):
        value = float(value)
        if not math.isfinite(value):
            raise MetricError(f"non-finite value for {metric} ({model}, {sampler}, N={steps})")
        self.rows.append({"model": model, "sampler": sampler, "steps": int(steps), "rho": float(rho),
                          "seed": int(seed), "metric": metric, "value": value})

    def add_all(self, model, sampler, steps, rho, seed, metrics: dict):
        for k in sorted(metrics):
            self.add(model, sampler, steps, rho, seed, k, metrics[k])

    def value(self, model: str, metric: str, **match) -> float:
        for r in self.rows:
            if r["model"] == model and r["metric"] == metric and all(r[k] == v for k, v in match.items()):
                return r["value"]
        raise KeyError((model, metric, match))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            for r in self.rows:
                w.writerow([METRIC_SCHEMA, r["model"], r["sampler"], r["steps"], repr(r["rho"]),
                            r["seed"], r["metric"], repr(r["value"])])
