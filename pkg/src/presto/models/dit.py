"""A miniature diffusion transformer with adaptive-norm conditioning.

Blocks are pre-norm (attention then feed-forward) with shift/scale/gate
modulation computed from the summed noise, tempo and category embeddings,
DiT adaLN-Zero style. Layers are numbered 1..L. A forward pass can run any
ascending subset of layers; skipped layers are bypassed on the residual
stream.

The optional budget path adds (1) a budget embedding to the conditioning
vector and (2) a budget-only shift/scale stage after the last block. Both are
zero-initialised, so a fresh budget model computes exactly what the same
weights compute without it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..condition import NULL_CATEGORY, Condition
from ..numerics import SeededStream, Tensor
from ..numerics import tensor as T


class DitConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    depth: int = Field(12, ge=2)
    width: int = Field(64, ge=2)
    heads: int = Field(4, ge=1)
    tokens: int = Field(2, ge=1)
    data_dim: int = Field(2, ge=1)
    categories: int = Field(4, ge=1)
    tempo_buckets: int = Field(1, ge=1)
    mlp_ratio: int = Field(2, ge=1)
    budget_path: bool = False

    @model_validator(mode="after")
    def _divisible(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.width % 2:
            raise ValueError("width must be even for the sinusoidal embeddings")
        if self.data_dim % self.tokens:
            raise ValueError(f"data_dim {self.data_dim} not divisible by tokens {self.tokens}")
        return self

    @property
    def patch(self) -> int:
        return self.data_dim // self.tokens


def embedding_freqs(width: int) -> np.ndarray:
    return np.geomspace(0.25, 32.0, width // 2)


@dataclass
class DitOutput:
    out: Optional[Tensor]
    hidden: list = field(default_factory=list)
    layers: list = field(default_factory=list)
    h_norm: Optional[Tensor] = None


def _modulate(x, shift, scale):
    return x * (scale + 1.0) + shift


class DitModel:
    """Parameters live in ``self.params`` (name -> leaf Tensor)."""

    def __init__(self, cfg: DitConfig, seed: int = 0):
        self.cfg = cfg
        self.freqs = embedding_freqs(cfg.width)
        self.params: dict[str, Tensor] = {}
        rng = SeededStream(seed, 0xD17)
        w, p = cfg.width, cfg.patch
        hid = cfg.mlp_ratio * w

        def normal(name, shape, scale):
            self.params[name] = Tensor(rng.normal(shape) * scale, requires_grad=True)

        def zeros(name, shape):
            self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

        normal("embed.w", (p, w), 1.0 / np.sqrt(p))
        zeros("embed.b", (w,))
        normal("embed.pos", (cfg.tokens, w), 1.0)
        normal("noise.l1.w", (w, w), 1.0 / np.sqrt(w))
        zeros("noise.l1.b", (w,))
        normal("noise.l2.w", (w, w), 1.0 / np.sqrt(w))
        zeros("noise.l2.b", (w,))
        normal("tempo.w", (w, w), 0.5 / np.sqrt(w))
        normal("category.table", (cfg.categories + 1, w), 0.5)
        for i in range(1, cfg.depth + 1):
            b = f"blk{i}."
            zeros(b + "mod.w", (w, 6 * w))
            zeros(b + "mod.b", (6 * w,))
            normal(b + "qkv.w", (w, 3 * w), 1.0 / np.sqrt(w))
            zeros(b + "qkv.b", (3 * w,))
            normal(b + "proj.w", (w, w), 1.0 / np.sqrt(w))
            zeros(b + "proj.b", (w,))
            normal(b + "ff1.w", (w, hid), 1.0 / np.sqrt(w))
            zeros(b + "ff1.b", (hid,))
            normal(b + "ff2.w", (hid, w), 1.0 / np.sqrt(hid))
            zeros(b + "ff2.b", (w,))
        zeros("final.mod.w", (w, 2 * w))
        zeros("final.mod.b", (2 * w,))
        zeros("final.out.w", (w, p))
        zeros("final.out.b", (p,))
        if cfg.budget_path:
            self.add_budget_path()

    # ------------------------------------------------------------ structure

    @property
    def depth(self) -> int:
        return self.cfg.depth

    @property
    def has_budget_path(self) -> bool:
        return "budget.emb.w" in self.params

    def add_budget_path(self):
        """Attach zero-initialised budget conditioning modules."""
        w = self.cfg.width
        for name, shape in (("budget.emb.w", (w, w)), ("budget.emb.b", (w,)),
                            ("budget.mod.w", (w, 2 * w)), ("budget.mod.b", (2 * w,))):
            self.params[name] = Tensor(np.zeros(shape), requires_grad=True)
        self.cfg = self.cfg.model_copy(update={"budget_path": True})

    def layer_params(self, i: int) -> dict:
        pre = f"blk{i}."
        return {k: v for k, v in self.params.items() if k.startswith(pre)}

    def copy(self) -> "DitModel":
        new = object.__new__(DitModel)
        new.cfg = self.cfg
        new.freqs = self.freqs
        new.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return new

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict):
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k in self.params:
            if arrays[k].shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arrays[k], dtype=np.float64)

    # ------------------------------------------------------------ forward

    def _conditioning(self, c_noise, condition: Condition, budget):
        p = self.params
        b = len(condition)
        c_noise = np.broadcast_to(np.asarray(c_noise, dtype=np.float64), (b,))
        e = T.sinusoidal(c_noise, self.freqs)
        e = T.linear(T.silu(T.linear(e, p["noise.l1.w"], p["noise.l1.b"])), p["noise.l2.w"], p["noise.l2.b"])
        tempo = T.linear(T.sinusoidal(condition.tempo.astype(np.float64), self.freqs), p["tempo.w"])
        cat = np.where(condition.category == NULL_CATEGORY, self.cfg.categories, condition.category)
        if np.any((cat < 0) | (cat > self.cfg.categories)):
            raise ValueError(f"category ids must lie in [0, {self.cfg.categories}) or be null")
        c = e + tempo + T.take_rows(p["category.table"], cat)
        bemb = None
        if budget is not None:
            bemb = T.sinusoidal(np.broadcast_to(np.asarray(budget, dtype=np.float64), (b,)), self.freqs)
            c = c + T.linear(bemb, p["budget.emb.w"], p["budget.emb.b"])
        return c, bemb

    def _block(self, i, h, sc):
        p = self.params
        pre = f"blk{i}."
        w, nh = self.cfg.width, self.cfg.heads
        dh = w // nh
        bsz, ntok = h.shape[0], h.shape[1]
        mod = T.linear(sc, p[pre + "mod.w"], p[pre + "mod.b"]).reshape(bsz, 6, 1, w)
        shift1, scale1, gate1 = mod[:, 0], mod[:, 1], mod[:, 2]
        shift2, scale2, gate2 = mod[:, 3], mod[:, 4], mod[:, 5]

        a = _modulate(T.layer_norm(h), shift1, scale1)
        qkv = T.linear(a, p[pre + "qkv.w"], p[pre + "qkv.b"])
        qkv = qkv.reshape(bsz, ntok, 3, nh, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = T.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, ntok, w)
        h = h + gate1 * T.linear(o, p[pre + "proj.w"], p[pre + "proj.b"])

        a = _modulate(T.layer_norm(h), shift2, scale2)
        f = T.linear(T.silu(T.linear(a, p[pre + "ff1.w"], p[pre + "ff1.b"])), p[pre + "ff2.w"], p[pre + "ff2.b"])
        return h + gate2 * f

    def check_layers(self, executed_layers) -> list:
        if executed_layers is None:
            return list(range(1, self.depth + 1))
        layers = sorted(int(i) for i in executed_layers)
        if not layers:
            raise ValueError("executed_layers is empty")
        if layers[0] < 1 or layers[-1] > self.depth or len(set(layers)) != len(layers):
            raise ValueError(f"executed_layers must be distinct values in 1..{self.depth}, got {layers}")
        return layers

    def forward(self, x_in, c_noise, condition: Condition, budget=None,
                executed_layers: Optional[Sequence[int]] = None,
                stop_after: Optional[int] = None) -> DitOutput:
        """Run the network on preconditioned input ``x_in`` of shape (B, D).

        ``stop_after=k`` returns right after layer k (``out`` is None); used
        to tap intermediate activations for the discriminator.
        """
        if budget is not None and not self.has_budget_path:
            raise ValueError("budget given to a model without a budget path")
        if budget is None and self.has_budget_path:
            raise ValueError("model has a budget path; pass a budget (0 for the full model)")
        layers = self.check_layers(executed_layers)
        cfg, p = self.cfg, self.params
        x_in = T.as_tensor(x_in)
        bsz = x_in.shape[0]
        condition = condition.repeat(bsz)

        c, bemb = self._conditioning(c_noise, condition, budget)
        sc = T.silu(c)
        h = T.linear(x_in.reshape(bsz, cfg.tokens, cfg.patch), p["embed.w"], p["embed.b"]) + p["embed.pos"]
        res = DitOutput(out=None)
        for i in layers:
            h = self._block(i, h, sc)
            res.hidden.append(h)
            res.layers.append(i)
            if stop_after is not None and i >= stop_after:
                return res
        if bemb is not None:
            bm = T.linear(T.silu(bemb), p["budget.mod.w"], p["budget.mod.b"]).reshape(bsz, 2, 1, cfg.width)
            h = _modulate(h, bm[:, 0], bm[:, 1])
        hn = T.layer_norm(h)
        res.h_norm = hn
        fm = T.linear(sc, p["final.mod.w"], p["final.mod.b"]).reshape(bsz, 2, 1, cfg.width)
        y = T.linear(_modulate(hn, fm[:, 0], fm[:, 1]), p["final.out.w"], p["final.out.b"])
        res.out = y.reshape(bsz, cfg.data_dim)
        return res

    def __call__(self, x_in, c_noise, condition, budget=None, executed_layers=None) -> Tensor:
        return self.forward(x_in, c_noise, condition, budget, executed_layers).out


def dit_forward(model: DitModel, x_tokens, sigma_noise, condition, budget=None, executed_layers=None):
    """Functional form returning ``(output, hidden_states)``."""
    r = model.forward(x_tokens, sigma_noise, condition, budget, executed_layers)
    return r.out, r.hidden


def randomize(model: DitModel, seed: int, scale: float = 0.3):
    """Fill every parameter (zero-initialised ones included) with noise.

    For gradient checks and locality tests, where zero gates would hide
    whole sub-graphs.
    """
    rng = SeededStream(seed, 0xAB)
    for k in sorted(model.params):
        p = model.params[k]
        p.data = p.data + scale * rng.normal(p.shape)
    return model
