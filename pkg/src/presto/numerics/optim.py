"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState) -> dict:
    """Apply one Adam step in place and return ``params``.

    Parameters whose gradient is ``None`` (not reached by the loss) are left
    alone, moments included. Any NaN/inf gradient raises before anything is
    touched.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    """Optimizer over a named parameter dict of leaf tensors."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        adam_update(self.params, {k: p.grad for k, p in self.params.items()}, self.state)

    def state_arrays(self, prefix: str) -> dict:
        out = {f"{prefix}.step": np.array(self.state.step_count)}
        for k, m in self.state.first_moment.items():
            out[f"{prefix}.m.{k}"] = m
            out[f"{prefix}.v.{k}"] = self.state.second_moment[k]
        return out

    def load_state_arrays(self, arrays: dict, prefix: str):
        self.state.step_count = int(arrays[f"{prefix}.step"])
        self.state.first_moment = {}
        self.state.second_moment = {}
        mp, vp = f"{prefix}.m.", f"{prefix}.v."
        for k, a in arrays.items():
            if k.startswith(mp):
                self.state.first_moment[k[len(mp):]] = np.array(a)
            elif k.startswith(vp):
                self.state.second_moment[k[len(vp):]] = np.array(a)


def parameters_of(*groups: dict) -> dict:
    """Merge several named parameter dicts, prefixing nothing; names must be unique."""
    out: dict[str, Tensor] = {}
    for g in groups:
        for k, v in g.items():
            if k in out:
                raise KeyError(f"duplicate parameter name {k!r}")
            out[k] = v
    return out
