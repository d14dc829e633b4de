"""Numba-compiled versions of the hot kernels.

Signatures and return values match :mod:`presto._kernels._numpy` exactly.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _ln_fwd_2d(x, eps, y, rstd):
    n, w = x.shape
    for i in range(n):
        m = 0.0
        for j in range(w):
            m += x[i, j]
        m /= w
        v = 0.0
        for j in range(w):
            c = x[i, j] - m
            v += c * c
        r = 1.0 / math.sqrt(v / w + eps)
        rstd[i] = r
        for j in range(w):
            y[i, j] = (x[i, j] - m) * r


@njit(cache=True)
def _ln_bwd_2d(g, y, rstd, dx):
    n, w = g.shape
    for i in range(n):
        gm = 0.0
        gym = 0.0
        for j in range(w):
            gm += g[i, j]
            gym += g[i, j] * y[i, j]
        gm /= w
        gym /= w
        r = rstd[i]
        for j in range(w):
            dx[i, j] = r * (g[i, j] - gm - y[i, j] * gym)


def layer_norm_fwd(x, eps):
    shape = x.shape
    x2 = np.ascontiguousarray(x).reshape(-1, shape[-1])
    y = np.empty_like(x2)
    rstd = np.empty(x2.shape[0])
    _ln_fwd_2d(x2, eps, y, rstd)
    return y.reshape(shape), rstd.reshape(shape[:-1])


def layer_norm_bwd(g, y, rstd):
    shape = g.shape
    g2 = np.ascontiguousarray(g).reshape(-1, shape[-1])
    y2 = np.ascontiguousarray(y).reshape(-1, shape[-1])
    dx = np.empty_like(g2)
    _ln_bwd_2d(g2, y2, np.ascontiguousarray(rstd).reshape(-1), dx)
    return dx.reshape(shape)


@njit(cache=True)
def _pairwise_sqdist(x, y):
    n, d = x.shape
    m = y.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                t = x[i, k] - y[j, k]
                s += t * t
            out[i, j] = s
    return out


def pairwise_sqdist(x, y):
    return _pairwise_sqdist(np.ascontiguousarray(x, dtype=np.float64),
                            np.ascontiguousarray(y, dtype=np.float64))


@njit(cache=True)
def _offdiag_rbf_sum(x, gamma):
    n, d = x.shape
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            s = 0.0
            for k in range(d):
                t = x[i, k] - x[j, k]
                s += t * t
            total += math.exp(-gamma * s)
    return total


@njit(cache=True)
def _cross_rbf_sum(x, y, gamma):
    n, d = x.shape
    m = y.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                t = x[i, k] - y[j, k]
                s += t * t
            total += math.exp(-gamma * s)
    return total


def rbf_sums(x, y, gamma):
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    return (_offdiag_rbf_sum(x, gamma), _offdiag_rbf_sum(y, gamma),
            _cross_rbf_sum(x, y, gamma))


@njit(cache=True)
def _kth_neighbour_dist(x, k):
    n = x.shape[0]
    out = np.empty(n)
    row = np.empty(n)
    for i in range(n):
        for j in range(n):
            s = 0.0
            for c in range(x.shape[1]):
                t = x[i, c] - x[j, c]
                s += t * t
            row[j] = math.sqrt(s)
        out[i] = np.sort(row)[k]
    return out


def kth_neighbour_dist(x, k):
    return _kth_neighbour_dist(np.ascontiguousarray(x, dtype=np.float64), k)


@njit(cache=True)
def _gmm_posterior(x, sigma, log_w, means, evecs, evals, mean_out, logz_out):
    b, d = x.shape
    kk = means.shape[0]
    logp = np.empty(kk)
    post = np.empty((kk, d))
    diff = np.empty(d)
    proj = np.empty(d)
    log2pi = math.log(2.0 * math.pi)
    for i in range(b):
        s2 = sigma[i] * sigma[i]
        for c in range(kk):
            for e in range(d):
                diff[e] = x[i, e] - means[c, e]
            maha = 0.0
            logdet = 0.0
            for e in range(d):
                p = 0.0
                for f in range(d):
                    p += diff[f] * evecs[c, f, e]
                den = evals[c, e] + s2
                maha += p * p / den
                logdet += math.log(den)
                proj[e] = p * evals[c, e] / den
            logp[c] = log_w[c] - 0.5 * (maha + logdet + d * log2pi)
            for f in range(d):
                acc = 0.0
                for e in range(d):
                    acc += evecs[c, f, e] * proj[e]
                post[c, f] = means[c, f] + acc
        mx = logp.max()
        tot = 0.0
        for c in range(kk):
            logp[c] = math.exp(logp[c] - mx)
            tot += logp[c]
        for f in range(d):
            acc = 0.0
            for c in range(kk):
                acc += logp[c] / tot * post[c, f]
            mean_out[i, f] = acc
        logz_out[i] = mx + math.log(tot)


def gmm_posterior(x, sigma, log_w, means, evecs, evals):
    x = np.ascontiguousarray(x, dtype=np.float64)
    mean = np.empty_like(x)
    logz = np.empty(x.shape[0])
    _gmm_posterior(x, np.ascontiguousarray(sigma, dtype=np.float64),
                   np.ascontiguousarray(log_w), np.ascontiguousarray(means),
                   np.ascontiguousarray(evecs), np.ascontiguousarray(evals),
                   mean, logz)
    return mean, logz


@njit(cache=True)
def _sig1(v):
    if v >= 0.0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


@njit(cache=True)
def _silu_fwd(x, y, s):
    for i in range(x.size):
        v = _sig1(x[i])
        s[i] = v
        y[i] = x[i] * v


@njit(cache=True)
def _silu_bwd(g, x, s, out):
    for i in range(g.size):
        out[i] = g[i] * (s[i] * (1.0 + x[i] * (1.0 - s[i])))


@njit(cache=True)
def _sigmoid(x, out):
    for i in range(x.size):
        out[i] = _sig1(x[i])


def sigmoid(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(x)
    _sigmoid(x.reshape(-1), out.reshape(-1))
    return out


def silu_fwd(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.empty_like(x)
    s = np.empty_like(x)
    _silu_fwd(x.reshape(-1), y.reshape(-1), s.reshape(-1))
    return y, s


def silu_bwd(g, x, s):
    g = np.ascontiguousarray(g, dtype=np.float64)
    out = np.empty_like(g)
    _silu_bwd(g.reshape(-1), np.ascontiguousarray(x).reshape(-1), np.ascontiguousarray(s).reshape(-1),
              out.reshape(-1))
    return out
