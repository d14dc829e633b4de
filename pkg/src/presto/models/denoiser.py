"""Network-backed EDM denoiser with optional per-noise-level layer dropping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..condition import Condition
from ..diffusion import EdmConfig, _col, precondition
from ..numerics import Tensor, no_grad
from ..numerics import tensor as T
from .dit import DitModel


@dataclass
class Prediction:
    x_hat: Tensor
    h_norm: Optional[Tensor]


class EdmDenoiser:
    """mu(x, sigma, e) = c_skip x + c_out F(c_in x, c_noise, e).

    ``schedule`` (an object with ``route(sigma, depth)``, e.g.
    :class:`presto.distill.layer.DropSchedule`) switches on budgeted layer
    dropping: the batch is split by budget, each group runs its executed
    layers, and results are put back in the original order.
    """

    def __init__(self, net: DitModel, edm: EdmConfig = EdmConfig(), schedule=None):
        self.net = net
        self.edm = edm
        self.schedule = schedule

    @property
    def params(self) -> dict:
        return self.net.params

    def _single(self, x, s, condition, budget, layers, with_hidden=False):
        c = precondition(s, self.edm)
        if budget is None and self.net.has_budget_path:
            budget = np.zeros(len(s))
        r = self.net.forward(x * _col(c.c_in, x.ndim), c.c_noise, condition, budget, layers)
        x_hat = x * _col(c.c_skip, x.ndim) + r.out * _col(c.c_out, x.ndim)
        return x_hat, r.h_norm

    def forward(self, x, sigma, condition: Condition, full: bool = False,
                budget=None, layers=None) -> Prediction:
        """Graph-building prediction.

        With a schedule (and ``full=False``) budgets and layer sets come from
        sigma; otherwise ``budget``/``layers`` are used as given.
        """
        x = T.as_tensor(x)
        n = x.shape[0]
        s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,)).copy()
        condition = condition.repeat(n)
        if self.schedule is None or full:
            x_hat, h = self._single(x, s, condition, budget, layers)
            return Prediction(x_hat, h)
        groups = self.schedule.route(s, self.net.depth)
        if len(groups) == 1:
            _, b, lay = groups[0]
            x_hat, h = self._single(x, s, condition, np.full(n, b) if self.net.has_budget_path else None, lay)
            return Prediction(x_hat, h)
        outs, hs, order = [], [], []
        for idx, b, lay in groups:
            xb = x[idx]
            bud = np.full(len(idx), b) if self.net.has_budget_path else None
            xh, h = self._single(xb, s[idx], condition.take(idx), bud, lay)
            outs.append(xh)
            hs.append(h)
            order.append(idx)
        inv = np.argsort(np.concatenate(order))
        return Prediction(T.concat(outs, axis=0)[inv], T.concat(hs, axis=0)[inv])

    def __call__(self, x, sigma, condition: Condition) -> np.ndarray:
        """Numpy-in, numpy-out prediction without graph recording."""
        with no_grad():
            return self.forward(np.asarray(getattr(x, "data", x)), sigma, condition).x_hat.data

    def executed_layer_counts(self, sigma) -> np.ndarray:
        s = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
        if self.schedule is None:
            return np.full(len(s), self.net.depth)
        out = np.empty(len(s), dtype=np.int64)
        for idx, _, lay in self.schedule.route(s, self.net.depth):
            out[idx] = len(lay)
        return out
