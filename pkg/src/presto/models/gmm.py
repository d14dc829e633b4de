"""Analytic Gaussian-mixture denoisers (the exact DSM minimisers)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _kernels
from ..condition import NULL_CATEGORY, Condition


@dataclass
class GmmOracle:
    weights: np.ndarray   # (K,)
    means: np.ndarray     # (K, D)
    covs: np.ndarray      # (K, D, D)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covs = np.asarray(self.covs, dtype=np.float64)
        k, d = self.means.shape
        if self.weights.shape != (k,) or self.covs.shape != (k, d, d):
            raise ValueError("inconsistent mixture parameter shapes")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must be nonnegative and sum to 1, got {self.weights}")
        if not np.allclose(self.covs, np.swapaxes(self.covs, 1, 2), atol=1e-12):
            raise ValueError("covariances must be symmetric")
        evals, evecs = np.linalg.eigh(self.covs)
        if np.any(evals <= 0):
            raise ValueError("covariances must be positive definite")
        self.evals, self.evecs = evals, evecs

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @classmethod
    def isotropic(cls, weights, means, std) -> "GmmOracle":
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        k, d = means.shape
        std = np.broadcast_to(np.asarray(std, dtype=np.float64), (k,))
        covs = np.stack([np.eye(d) * s * s for s in std])
        return cls(np.asarray(weights, dtype=np.float64), means, covs)

    def component(self, k: int) -> "GmmOracle":
        return GmmOracle(np.ones(1), self.means[k:k + 1], self.covs[k:k + 1])

    def subset(self, components) -> "GmmOracle":
        """Sub-mixture over ``components`` with renormalised weights."""
        idx = np.asarray(components, dtype=np.int64)
        w = self.weights[idx]
        return GmmOracle(w / w.sum(), self.means[idx], self.covs[idx])

    def sample(self, n: int, stream, components=None):
        """Draw n points; returns (x, component ids)."""
        if components is None:
            components = stream.choice(self.n_components, size=n, p=self.weights)
        components = np.asarray(components)
        z = stream.normal((n, self.dim))
        chol = np.linalg.cholesky(self.covs)
        x = self.means[components] + np.einsum("nij,nj->ni", chol[components], z)
        return x, components

    # --------------------------------------------------------- denoising

    def posterior(self, x, sigma):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],))
        if np.any(s <= 0):
            raise ValueError("sigma must be > 0")
        return _kernels.gmm_posterior(x, s, np.log(self.weights), self.means, self.evecs, self.evals)

    def denoise(self, x, sigma) -> np.ndarray:
        return self.posterior(x, sigma)[0]

    def log_marginal(self, x, sigma) -> np.ndarray:
        return self.posterior(x, sigma)[1]

    def marginal_score(self, x, sigma) -> np.ndarray:
        """Exact grad log of the sigma-smoothed mixture, via direct linear solves."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],))
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            logp = np.empty(self.n_components)
            grads = np.empty((self.n_components, d))
            for k in range(self.n_components):
                cov = self.covs[k] + s[i] ** 2 * np.eye(d)
                diff = x[i] - self.means[k]
                sol = np.linalg.solve(cov, diff)
                _, logdet = np.linalg.slogdet(cov)
                logp[k] = np.log(self.weights[k]) - 0.5 * (diff @ sol + logdet)
                grads[k] = -sol
            r = np.exp(logp - logp.max())
            r /= r.sum()
            out[i] = r @ grads
        return out

    def second_moment_loss(self, sigma, n: int, stream, weight) -> float:
        """Monte-Carlo estimate of the minimum weighted DSM loss at one sigma."""
        x, _ = self.sample(n, stream)
        noisy = x + sigma * stream.normal(x.shape)
        err = ((x - self.denoise(noisy, sigma)) ** 2).sum(axis=1)
        return float(weight * err.mean())


class GmmDenoiser:
    """Class-conditional oracle: category c uses the sub-mixture of the
    components labelled c (by default component c alone); null uses the full mixture.

    Called as ``den(x, sigma, condition)`` and returns a numpy array, the
    same convention as the network-backed :class:`~presto.models.EdmDenoiser`.
    """

    def __init__(self, oracle: GmmOracle, component_category=None):
        self.oracle = oracle
        cc = np.arange(oracle.n_components) if component_category is None else np.asarray(component_category)
        if cc.shape != (oracle.n_components,):
            raise ValueError("component_category needs one entry per component")
        self.component_category = cc
        self.parts = [oracle.subset(np.flatnonzero(cc == c)) for c in range(int(cc.max()) + 1)]

    def __call__(self, x, sigma, condition: Condition | None = None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(getattr(x, "data", x), dtype=np.float64))
        s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],))
        if condition is None:
            return self.oracle.denoise(x, s)
        condition = condition.repeat(x.shape[0])
        out = np.empty_like(x)
        for k in np.unique(condition.category):
            idx = condition.category == k
            src = self.oracle if k == NULL_CATEGORY else self.parts[int(k)]
            out[idx] = src.denoise(x[idx], s[idx])
        return out


def gmm_denoise(oracle: GmmOracle, x, sigma) -> np.ndarray:
    return oracle.denoise(x, sigma)
