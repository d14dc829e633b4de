"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np


def relative_error(a, b, floor: float = 1e-6):
    """|a - b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradients(loss_fn, params: dict, n_coords: int, rng: np.random.Generator,
                    h: float = 1e-4):
    """Compare reverse-mode gradients with central differences.

    ``loss_fn()`` must rebuild the graph from the current parameter values and
    return a scalar Tensor. Returns ``(analytic, numeric)`` arrays over the
    sampled coordinates.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    names = list(params)
    sizes = np.array([params[n].data.size for n in names])
    picks = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[names[i]]
        j = int(flat - offsets[i])
        g = 0.0 if p.grad is None else p.grad.reshape(-1)[j]
        view = p.data.reshape(-1)
        orig = view[j]
        view[j] = orig + h
        up = loss_fn().item()
        view[j] = orig - h
        down = loss_fn().item()
        view[j] = orig
        analytic.append(g)
        numeric.append((up - down) / (2 * h))
    return np.array(analytic), np.array(numeric)
