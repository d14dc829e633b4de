"""Pure-numpy reference versions of the hot kernels."""

import numpy as np


def layer_norm_fwd(x, eps):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[..., 0]


def layer_norm_bwd(g, y, rstd):
    gm = g.mean(axis=-1, keepdims=True)
    gym = (g * y).mean(axis=-1, keepdims=True)
    return rstd[..., None] * (g - gm - y * gym)


def pairwise_sqdist(x, y):
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def rbf_sums(x, y, gamma):
    """Return (sum_{i!=j} k(x_i,x_j), sum_{i!=j} k(y_i,y_j), sum_{i,j} k(x_i,y_j))."""
    kxx = np.exp(-gamma * pairwise_sqdist(x, x))
    kyy = np.exp(-gamma * pairwise_sqdist(y, y))
    kxy = np.exp(-gamma * pairwise_sqdist(x, y))
    return (kxx.sum() - np.trace(kxx), kyy.sum() - np.trace(kyy), kxy.sum())


def kth_neighbour_dist(x, k):
    d = np.sqrt(pairwise_sqdist(x, x))
    # column 0 of the sorted row is the point itself
    return np.sort(d, axis=1)[:, k]


def gmm_posterior(x, sigma, log_w, means, evecs, evals):
    """Posterior mean and log marginal density for a Gaussian mixture prior.

    x: (B, D); sigma: (B,); log_w: (K,); means: (K, D);
    evecs: (K, D, D) column eigenvectors; evals: (K, D).
    """
    b, d = x.shape
    s2 = (sigma * sigma)[:, None, None]                     # (B,1,1)
    diff = x[:, None, :] - means[None, :, :]                # (B,K,D)
    proj = np.einsum("bkd,kde->bke", diff, evecs)           # (B,K,D)
    denom = evals[None, :, :] + s2                          # (B,K,D)
    maha = (proj * proj / denom).sum(axis=-1)               # (B,K)
    logdet = np.log(denom).sum(axis=-1)
    logp = log_w[None, :] - 0.5 * (maha + logdet + d * np.log(2.0 * np.pi))
    mx = logp.max(axis=1, keepdims=True)
    p = np.exp(logp - mx)
    tot = p.sum(axis=1, keepdims=True)
    resp = p / tot
    shrunk = np.einsum("bke,kde->bkd", proj * (evals[None] / denom), evecs)
    post = means[None, :, :] + shrunk                       # (B,K,D)
    mean = (resp[:, :, None] * post).sum(axis=1)
    return mean, (mx + np.log(tot))[:, 0]


def sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu_fwd(x):
    s = sigmoid(x)
    return x * s, s


def silu_bwd(g, x, s):
    return g * (s * (1.0 + x * (1.0 - s)))
