"""Score-based distribution-matching step distillation with routable noise
distributions, a discriminator on the fake score model's activations and
continuous-noise generator inputs.

One iteration either updates the generator (DMD + GAN) or the fake score
model and discriminator (fake-DSM + GAN). Fake updates happen ``ratio``
times as often as generator updates: iterations come in cycles of
``ratio + 1`` with the generator turn placed mid-cycle, which keeps
``fake_updates - ratio * gen_updates`` within ``ratio - 1`` at every point.
"""

from __future__ import annotations

from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..condition import Condition
from ..diffusion import (
    EdmConfig, GuidanceConfig, _col, dsm_loss, guided_denoise, inference_distribution,
    inference_schedule, precondition, sample_sigma, train_distribution,
)
from ..models.denoiser import EdmDenoiser
from ..numerics import Adam, SeededStream, Tensor, no_grad
from ..numerics import tensor as T

Dist = Literal["train", "inference"]


class ConfigError(ValueError):
    pass


class DistillationError(FloatingPointError):
    pass


class GeneratorCollapse(RuntimeError):
    """Raised when the discriminator's windowed accuracy on real inputs exceeds the threshold."""

    def __init__(self, message, traces=None):
        super().__init__(message)
        self.traces = traces


class Routing(BaseModel):
    """Which noise distribution feeds each corruption point."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    gen: Dist = "inference"
    dmd: Dist = "train"
    dsm: Dist = "train"
    gan: Dist = "train"

    @classmethod
    def parse(cls, code: str) -> "Routing":
        """'ITTT' -> gen=inference, dmd/dsm/gan=train (order gen, DMD, DSM, GAN)."""
        code = code.replace("/", "").replace(",", "").upper()
        if len(code) != 4 or set(code) - {"I", "T"}:
            raise ConfigError(f"routing code must be four of I/T, got {code!r}")
        m = {"I": "inference", "T": "train"}
        return cls(gen=m[code[0]], dmd=m[code[1]], dsm=m[code[2]], gan=m[code[3]])

    @property
    def code(self) -> str:
        return "".join("I" if d == "inference" else "T" for d in (self.gen, self.dmd, self.dsm, self.gan))


# noise-routing ablation grid: least-squares rows then non-saturating rows
ROUTING_GRID_LS = ("IIII", "IITI", "IITT", "ITTI", "ITIT", "ITTT", "TTTT")
ROUTING_GRID_NS = ("ITIT", "ITTT", "TTTT")
CHOSEN_ROUTING = "ITTT"


class PrestoSConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    routing: Routing = Routing()
    gan_kind: Literal["ls", "ns"] = "ls"
    nu1: float = Field(1.0, ge=0)
    nu2: float = Field(1.0, ge=0)
    guidance_weight: float = Field(4.5, ge=0)
    ratio: int = Field(5, ge=1)
    input_mode: Literal["continuous", "discrete"] = "continuous"
    discrete_sigmas: Optional[list[float]] = None
    dmd_weight: float = Field(1.0, ge=0)
    lr_gen: float = Field(1e-4, gt=0)
    lr_fake: float = Field(3e-4, gt=0)
    iterations: int = Field(1200, ge=0)
    batch: int = Field(128, ge=1)
    disc_layer: Optional[int] = Field(None, ge=1)
    disc_stages: int = Field(1, ge=0)
    disc_width: int = Field(32, ge=1)
    collapse_threshold: float = Field(0.98, gt=0, le=1)
    collapse_window: int = Field(100, ge=1)

    @model_validator(mode="after")
    def _discrete(self):
        if self.input_mode == "discrete":
            s = self.discrete_sigmas
            if not s:
                raise ValueError("discrete input mode needs a nonempty discrete_sigmas list")
            if any(b >= a for a, b in zip(s, s[1:])) or min(s) <= 0:
                raise ValueError(f"discrete_sigmas must be positive and strictly decreasing, got {s}")
        return self

    @classmethod
    def discrete_steps(cls, k: int, rho: float = 7.0, **kw) -> "PrestoSConfig":
        """Discrete-input baseline using the k-level inference schedule."""
        return cls(input_mode="discrete", discrete_sigmas=[float(s) for s in inference_schedule(k, rho)], **kw)


def routed_distribution(which: Dist, edm: EdmConfig):
    return train_distribution(edm) if which == "train" else inference_distribution(edm)


# ------------------------------------------------------------------ discriminator

class DiscriminatorHead:
    """Downsampling head over hidden activations of shape (B, N, W).

    Each stage is a sigma-conditioned linear + SiLU followed by average
    pooling of token pairs, so the score map has N / 2^stages entries. The
    ``scalar`` variant averages the map into one logit per sample (the
    non-saturating loss uses it).
    """

    def __init__(self, width: int, tokens: int, stages: int = 1, hidden: int = 32,
                 kind: Literal["map", "scalar"] = "map", seed: int = 0):
        if tokens % (2 ** stages) or tokens // (2 ** stages) < 1:
            raise ConfigError(f"{tokens} tokens cannot be halved {stages} times")
        self.kind = kind
        self.stages = stages
        self.out_len = 1 if kind == "scalar" else tokens // (2 ** stages)
        self.freqs = np.geomspace(0.25, 32.0, hidden // 2 if hidden > 1 else 1)
        rng = SeededStream(seed, 0xD15C)
        p = {}
        emb = 2 * len(self.freqs)
        p["disc.noise.w"] = Tensor(rng.normal((emb, hidden)) / np.sqrt(emb), requires_grad=True)
        fan = width
        for s in range(max(stages, 1)):
            p[f"disc.s{s}.w"] = Tensor(rng.normal((fan, hidden)) / np.sqrt(fan), requires_grad=True)
            p[f"disc.s{s}.b"] = Tensor(np.zeros(hidden), requires_grad=True)
            fan = hidden
        p["disc.out.w"] = Tensor(rng.normal((hidden, 1)) * 0.1 / np.sqrt(hidden), requires_grad=True)
        p["disc.out.b"] = Tensor(np.zeros(1), requires_grad=True)
        self.params = p

    def __call__(self, h: Tensor, c_noise) -> Tensor:
        p = self.params
        b = h.shape[0]
        e = T.linear(T.sinusoidal(np.asarray(c_noise, dtype=np.float64), self.freqs), p["disc.noise.w"])
        e = e.reshape(b, 1, e.shape[1])
        for s in range(max(self.stages, 1)):
            h = T.silu(T.linear(h, p[f"disc.s{s}.w"], p[f"disc.s{s}.b"]) + e)
            if s < self.stages:
                n, w = h.shape[1], h.shape[2]
                h = h.reshape(b, n // 2, 2, w).mean(axis=2)
        y = T.linear(h, p["disc.out.w"], p["disc.out.b"]).reshape(b, h.shape[1])
        if self.kind == "scalar":
            y = y.mean(axis=1, keepdims=True)
        return y


class Discriminator:
    """D(x, sigma): fake score model trunk up to ``layer`` followed by the head."""

    def __init__(self, fake: EdmDenoiser, head: DiscriminatorHead, layer: int):
        self.fake = fake
        self.head = head
        self.layer = layer

    @property
    def head_kind(self) -> str:
        return self.head.kind

    def __call__(self, x, sigma, condition: Condition) -> Tensor:
        x = T.as_tensor(x)
        c = precondition(sigma, self.fake.edm)
        net = self.fake.net
        budget = np.zeros(x.shape[0]) if net.has_budget_path else None
        r = net.forward(x * _col(c.c_in, x.ndim), c.c_noise, condition.repeat(x.shape[0]), budget,
                        stop_after=self.layer)
        return self.head(r.hidden[-1], c.c_noise)


# ------------------------------------------------------------------ loss pieces

def _sigma_range(sigma) -> str:
    sigma = np.asarray(sigma)
    return f"sigma range {np.min(sigma):.4g}..{np.max(sigma):.4g}"


@contextmanager
def _loss_term(term: str, sigma):
    """Re-raise numeric failures inside one loss as a DistillationError naming the term and sigma."""
    try:
        yield
    except DistillationError:
        raise
    except FloatingPointError as err:
        raise DistillationError(f"{term} loss is non-finite ({err}; {_sigma_range(sigma)})") from None


def draw_generator_sigma(cfg: PrestoSConfig, edm: EdmConfig, stream: SeededStream, n: int) -> np.ndarray:
    if cfg.input_mode == "discrete":
        levels = np.asarray(cfg.discrete_sigmas, dtype=np.float64)
        return levels[stream.integers(0, len(levels), size=n)]
    return sample_sigma(routed_distribution(cfg.routing.gen, edm), stream, n)


def generator_output(generator: EdmDenoiser, x_real, condition: Condition, sigma, stream: SeededStream,
                     track: bool = True):
    """x_gen = G(x_real + sigma eps, sigma). Returns (x_gen Tensor, sigma)."""
    x_real = np.asarray(x_real, dtype=np.float64)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (len(x_real),)).copy()
    noisy = x_real + stream.normal(x_real.shape) * _col(sigma, x_real.ndim)
    with _loss_term("generator output", sigma):
        if track:
            return generator.forward(noisy, sigma, condition).x_hat, sigma
        with no_grad():
            return generator.forward(noisy, sigma, condition).x_hat, sigma


def dmd_signal(fake, real, x_gen, condition: Condition, dist, weight: float, stream: SeededStream):
    """mu_fake(x_gen + sigma eps) - guided mu_real(x_gen + sigma eps), a constant per-sample signal.

    ``fake`` and ``real`` are numpy denoisers ``(x, sigma, condition) -> ndarray``.
    Returns (signal, sigma).
    """
    x_gen = np.asarray(getattr(x_gen, "data", x_gen), dtype=np.float64)
    n = len(x_gen)
    sigma = sample_sigma(dist, stream, n)
    noisy = x_gen + stream.normal(x_gen.shape) * _col(sigma, x_gen.ndim)
    with _loss_term("DMD", sigma):
        mu_fake = fake(noisy, sigma, condition)
        mu_real, _ = guided_denoise(real, noisy, sigma, condition, GuidanceConfig(weight=weight))
    return mu_fake - mu_real, sigma


def dmd_surrogate(x_gen: Tensor, signal) -> Tensor:
    """Loss whose gradient w.r.t. x_gen is signal / B (the signal itself gets no gradient)."""
    return (x_gen * np.asarray(signal)).sum(axis=1).mean()


def fake_dsm_loss(fake: EdmDenoiser, x_gen, condition: Condition, dist, stream: SeededStream):
    x_gen = np.asarray(getattr(x_gen, "data", x_gen), dtype=np.float64)
    sigma = sample_sigma(dist, stream, len(x_gen))
    eps = stream.normal(x_gen.shape)
    with _loss_term("fake-DSM", sigma):
        loss = dsm_loss(lambda xn, s: fake.forward(xn, s, condition, full=True).x_hat, x_gen, sigma, eps,
                        cfg=fake.edm)
    return loss, sigma


def fake_dsm_update(fake: EdmDenoiser, x_gen, condition: Condition, dist, optimizer, stream: SeededStream) -> float:
    optimizer.zero_grad()
    loss, _ = fake_dsm_loss(fake, x_gen, condition, dist, stream)
    loss.backward()
    optimizer.step()
    return float(loss.data)


def _gan_check(D, kind):
    hk = getattr(D, "head_kind", None)
    if hk is not None and (kind == "ns") != (hk == "scalar"):
        raise ConfigError(f"GAN kind {kind!r} needs a {'scalar' if kind == 'ns' else 'map'} head, got {hk!r}")


def _noised(x, dist, stream):
    x_arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    sigma = sample_sigma(dist, stream, len(x_arr))
    noise = stream.normal(x_arr.shape) * _col(sigma, x_arr.ndim)
    return (x + noise if isinstance(x, Tensor) else x_arr + noise), sigma


def gan_generator_loss(D, x_gen, condition, dist, kind: str, stream: SeededStream):
    _gan_check(D, kind)
    noisy, sigma = _noised(x_gen, dist, stream)
    with _loss_term("generator GAN", sigma):
        d = T.as_tensor(D(noisy, sigma, condition))
        if kind == "ls":
            return ((1.0 - d) * (1.0 - d)).mean(), sigma
        return T.softplus(-d).mean(), sigma


def gan_discriminator_loss(D, x_real, x_gen, condition, dist, kind: str, stream: SeededStream):
    """Independent sigma draws for the real and fake branches.

    Returns (loss, real-branch accuracy, (sigma_real, sigma_fake)).
    """
    _gan_check(D, kind)
    x_gen = np.asarray(getattr(x_gen, "data", x_gen), dtype=np.float64)
    n_real, s_real = _noised(np.asarray(x_real, dtype=np.float64), dist, stream)
    n_fake, s_fake = _noised(x_gen, dist, stream)
    with _loss_term("discriminator GAN", np.concatenate([s_real, s_fake])):
        d_real = T.as_tensor(D(n_real, s_real, condition))
        d_fake = T.as_tensor(D(n_fake, s_fake, condition))
        if kind == "ls":
            loss = (d_fake * d_fake).mean() + ((1.0 - d_real) * (1.0 - d_real)).mean()
            acc = float((d_real.data > 0.5).mean())
        else:
            loss = T.softplus(d_fake).mean() + T.softplus(-d_real).mean()
            acc = float((d_real.data > 0.0).mean())
    return loss, acc, (s_real, s_fake)


def gan_losses(D, x_real, x_gen, condition, dist, kind: str, stream: SeededStream):
    """(generator_loss, discriminator_loss) as Tensors."""
    g, _ = gan_generator_loss(D, x_gen, condition, dist, kind, stream)
    d, _, _ = gan_discriminator_loss(D, x_real, x_gen, condition, dist, kind, stream)
    return g, d


# ------------------------------------------------------------------ state + loop

@dataclass
class PrestoSState:
    cfg: PrestoSConfig
    edm: EdmConfig
    generator: EdmDenoiser
    real: EdmDenoiser
    fake: EdmDenoiser
    head: DiscriminatorHead
    disc: Discriminator
    opt_gen: Adam
    opt_fake: Adam
    stream: SeededStream
    iteration: int = 0
    gen_updates: int = 0
    fake_updates: int = 0
    acc_window: deque = field(default_factory=deque)
    traces: dict = field(default_factory=lambda: {k: [] for k in TRACE_KEYS})
    init_digests: dict = field(default_factory=dict)

    def fake_params(self) -> dict:
        return {**self.fake.params, **self.head.params}

    def is_generator_turn(self) -> bool:
        return is_generator_turn(self.iteration, self.cfg.ratio)


TRACE_KEYS = ("iteration", "turn", "gen_loss", "disc_loss", "dmd_loss", "fake_dsm", "dmd_grad_norm", "real_acc")


def is_generator_turn(iteration: int, ratio: int) -> bool:
    return iteration % (ratio + 1) == ratio // 2


def make_state(teacher, cfg: PrestoSConfig, seed: int = 0, generator_net=None, generator_schedule=None,
               score_net=None) -> PrestoSState:
    """Build the distillation state.

    ``teacher`` is the frozen real score model (an EdmDenoiser); it is never
    updated. The generator starts from ``generator_net`` (default: a copy of
    the teacher net) and the fake score model from ``score_net`` (default:
    a copy of the teacher net).
    """
    edm = teacher.edm
    gen_net = (generator_net if generator_net is not None else teacher.net).copy()
    generator = EdmDenoiser(gen_net, edm, generator_schedule)
    fake = EdmDenoiser((score_net if score_net is not None else teacher.net).copy(), edm)
    fcfg = fake.net.cfg
    head = DiscriminatorHead(fcfg.width, fcfg.tokens, cfg.disc_stages, cfg.disc_width,
                             "scalar" if cfg.gan_kind == "ns" else "map", seed=seed)
    layer = cfg.disc_layer or max(1, fcfg.depth // 2)
    if layer > fcfg.depth:
        raise ConfigError(f"disc_layer {layer} > depth {fcfg.depth}")
    state = PrestoSState(cfg=cfg, edm=edm, generator=generator, real=teacher, fake=fake, head=head,
                         disc=Discriminator(fake, head, layer),
                         opt_gen=Adam(generator.params, lr=cfg.lr_gen),
                         opt_fake=Adam({}, lr=cfg.lr_fake),
                         stream=SeededStream(seed, 0x5))
    state.opt_fake.params = state.fake_params()
    # provenance of the starting weights, so callers can check what each model was cloned from
    state.init_digests = {"real": net_digest(teacher.net), "fake": net_digest(fake.net),
                          "generator": net_digest(gen_net)}
    return state


def net_digest(net) -> str:
    """sha256 over a net's parameter names, dtypes, shapes and bytes."""
    from ..io.checkpoint import payload_digest   # io imports this module's config types

    return payload_digest(net.state_arrays())


def _finite(value, term, sigma):
    if not np.isfinite(value):
        raise DistillationError(f"{term} loss is non-finite ({_sigma_range(sigma)})")


@dataclass
class IterationRecord:
    turn: str
    losses: dict


def presto_s_iteration(state: PrestoSState, x_real, condition: Condition) -> IterationRecord:
    cfg, edm, st = state.cfg, state.edm, state.stream.child(state.iteration)
    x_real = np.asarray(x_real, dtype=np.float64)
    n = len(x_real)
    sig_gen = draw_generator_sigma(cfg, edm, st, n)
    gen_turn = state.is_generator_turn()
    x_gen, _ = generator_output(state.generator, x_real, condition, sig_gen, st, track=gen_turn)
    tr = state.traces
    if gen_turn:
        state.opt_gen.zero_grad()
        total = None
        dmd_val = 0.0
        grad_norm = 0.0
        if cfg.dmd_weight > 0:
            signal, s_dmd = dmd_signal(state.fake, state.real, x_gen.data, condition,
                                       routed_distribution(cfg.routing.dmd, edm), cfg.guidance_weight, st)
            _finite(signal.sum(), "DMD", s_dmd)
            grad_norm = float(np.sqrt((signal * signal).sum(axis=1)).mean())
            total = dmd_surrogate(x_gen, signal) * cfg.dmd_weight
            dmd_val = float(total.data)
        g_loss, s_gan = gan_generator_loss(state.disc, x_gen, condition,
                                           routed_distribution(cfg.routing.gan, edm), cfg.gan_kind, st)
        _finite(g_loss.data, "generator GAN", s_gan)
        if cfg.nu1 > 0:
            total = g_loss * cfg.nu1 if total is None else total + g_loss * cfg.nu1
        if total is not None:
            total.backward()
            # only generator parameters move; grads left on the fake model are cleared on its turn
            state.opt_gen.step()
        state.gen_updates += 1
        rec = IterationRecord("gen", {"gen_loss": float(g_loss.data), "dmd_loss": dmd_val,
                                      "dmd_grad_norm": grad_norm})
    else:
        state.opt_fake.zero_grad()
        dsm, s_dsm = fake_dsm_loss(state.fake, x_gen.data, condition,
                                   routed_distribution(cfg.routing.dsm, edm), st)
        _finite(dsm.data, "fake-DSM", s_dsm)
        d_loss, acc, (s_r, s_f) = gan_discriminator_loss(state.disc, x_real, x_gen.data, condition,
                                                         routed_distribution(cfg.routing.gan, edm),
                                                         cfg.gan_kind, st)
        _finite(d_loss.data, "discriminator GAN", np.concatenate([s_r, s_f]))
        total = dsm + d_loss * cfg.nu2 if cfg.nu2 > 0 else dsm
        total.backward()
        state.opt_fake.step()
        state.fake_updates += 1
        state.acc_window.append(acc)
        if len(state.acc_window) > cfg.collapse_window:
            state.acc_window.popleft()
        rec = IterationRecord("fake", {"fake_dsm": float(dsm.data), "disc_loss": float(d_loss.data),
                                       "real_acc": acc})
    tr["iteration"].append(state.iteration)
    tr["turn"].append(rec.turn)
    for k in TRACE_KEYS[2:]:
        tr[k].append(rec.losses.get(k, float("nan")))
    state.iteration += 1
    if len(state.acc_window) == cfg.collapse_window:
        mean_acc = float(np.mean(state.acc_window))
        if mean_acc > cfg.collapse_threshold:
            raise GeneratorCollapse(
                f"discriminator real-input accuracy {mean_acc:.3f} > {cfg.collapse_threshold} over the last "
                f"{cfg.collapse_window} discriminator updates (iteration {state.iteration})", state.traces)
    return rec


def train_presto_s(state: PrestoSState, dataset, iterations: Optional[int] = None, data_seed: int = 0):
    """Run iterations drawing real batches from ``dataset``; returns the state."""
    total = state.cfg.iterations if iterations is None else iterations
    data_stream = SeededStream(data_seed, 0xDA7A)
    for _ in range(total):
        data_stream = SeededStream(data_seed, 0xDA7A, state.iteration)
        x, cond = dataset.batch(data_stream, state.cfg.batch)
        presto_s_iteration(state, x, cond)
    return state


def traces_to_rows(traces: dict):
    for i in range(len(traces["iteration"])):
        yield {k: traces[k][i] for k in TRACE_KEYS}
