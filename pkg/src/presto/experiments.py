"""End-to-end experiment pipelines shared by the command line and the acceptance suite.

Every function is a pure function of its config and seed; timings are
returned separately from metrics so metric files stay reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .condition import Condition
from .diffusion import GuidanceConfig, guided_denoise, inference_schedule
from .distill.layer import PrestoLConfig, executed_layers
from .distill.ls import LsResult, run_pipeline
from .distill.step import PrestoSConfig, PrestoSState, Routing, make_state, train_presto_s
from .eval import condition_log_likelihood, consistency, rtf, sample_metrics, signal_features
from .io.checkpoint import load_checkpoint, save_checkpoint
from .io.config import ExperimentConfig, config_hash
from .io.data import Gmm2DSpec, SyntheticDataset, generate_dataset
from .models.denoiser import EdmDenoiser
from .models.dit import DitModel
from .numerics import SeededStream, no_grad
from .samplers import dpm2s_sample, ode_sample, ping_pong_sample
from .training import mc_dsm_loss, train_teacher

EVAL_SIGMAS = (0.1, 0.5, 2.0, 10.0)


# ------------------------------------------------------------------ data + models

@dataclass
class Data:
    train: SyntheticDataset
    val: SyntheticDataset

    @property
    def dim(self) -> int:
        return self.train.dim


def build_data(cfg: ExperimentConfig) -> Data:
    train = generate_dataset(cfg.dataset, SeededStream(cfg.seed, 0xDA, 1))
    val = generate_dataset(cfg.dataset, SeededStream(cfg.seed, 0xDA, 2), size=max(cfg.eval.samples, 256))
    return Data(train, val)


def model_config(cfg: ExperimentConfig):
    """The model config with data-dependent fields filled from the dataset."""
    ds = cfg.dataset
    if isinstance(ds, Gmm2DSpec):
        return cfg.model.model_copy(update={"data_dim": 2, "categories": ds.categories, "tempo_buckets": 1})
    return cfg.model.model_copy(update={"data_dim": ds.length, "categories": ds.categories,
                                        "tempo_buckets": ds.tempo_buckets})


def new_teacher(cfg: ExperimentConfig) -> EdmDenoiser:
    return EdmDenoiser(DitModel(model_config(cfg), seed=cfg.seed), cfg.edm)


def oracle_denoiser(cfg: ExperimentConfig):
    return cfg.dataset.denoiser() if isinstance(cfg.dataset, Gmm2DSpec) else None


def save_model(path, den: EdmDenoiser, cfg: ExperimentConfig, stage: str, step: int, extra=None, info=None):
    meta = {**(info or {}), "model": den.net.cfg.model_dump(mode="json")}
    if den.schedule is not None:
        meta["schedule"] = den.schedule.model_dump(mode="json")
    arrays = {f"net.{k}": v for k, v in den.net.state_arrays().items()}
    arrays.update(extra or {})
    return save_checkpoint(path, arrays, stage, step, config_hash(cfg), meta)


def load_model(path, cfg: Optional[ExperimentConfig] = None, force: bool = True) -> EdmDenoiser:
    """Rebuild a denoiser from a checkpoint (architecture and schedule come from its header)."""
    from .distill.layer import DropSchedule
    from .models.dit import DitConfig

    header, arrays = load_checkpoint(path, config_hash(cfg) if cfg is not None else None, force=force)
    net = DitModel(DitConfig(**header["meta"]["model"]))
    net.load_state_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("net.")})
    sched = header["meta"].get("schedule")
    edm = cfg.edm if cfg is not None else EdmDenoiser(net).edm
    return EdmDenoiser(net, edm, DropSchedule(**sched) if sched else None)


# ------------------------------------------------------------------ sampling + metrics

def eval_condition(data: Data, n: int) -> Condition:
    return data.val.condition.take(slice(0, n))


def features(cfg: ExperimentConfig, x):
    return x if isinstance(cfg.dataset, Gmm2DSpec) else signal_features(x)


def teacher_samples(cfg, model, condition, steps=None, seed=None, guidance_weight=None, kind="heun"):
    w = cfg.presto_s.guidance_weight if guidance_weight is None else guidance_weight
    g = GuidanceConfig(weight=w)
    n = (cfg.eval.teacher_steps if steps is None else steps) + 1
    sched = inference_schedule(n, cfg.sampler.rho, cfg.edm.sigma_min, cfg.edm.sigma_max)
    seed = cfg.seed + 7 if seed is None else seed
    dim = model_config(cfg).data_dim
    if kind == "dpm2s":
        return dpm2s_sample(model, sched, condition, g, seed, dim)
    return ode_sample(model, sched, condition, g, seed, dim, method=kind)


def generator_samples(cfg, generator, condition, steps=None, seed=None, rho=None, guidance_weight=1.0):
    n = cfg.eval.student_steps if steps is None else steps
    sched = inference_schedule(n, cfg.sampler.rho if rho is None else rho, cfg.edm.sigma_min, cfg.edm.sigma_max)
    g = generator
    if guidance_weight != 1.0:
        gc = GuidanceConfig(weight=guidance_weight)
        g = lambda x, s, c: guided_denoise(generator, x, s, c, gc)[0]   # noqa: E731
    return ping_pong_sample(g, sched, condition, cfg.seed + 7 if seed is None else seed,
                            model_config(cfg).data_dim)


def metrics_for(cfg: ExperimentConfig, data: Data, x, condition: Condition) -> dict:
    real = data.val.x[:len(x)]
    m = sample_metrics(features(cfg, real), features(cfg, x), cfg.eval.k)
    if data.val.oracle is not None:
        m["consistency"] = consistency(x, condition, data.val.oracle, data.val.labels)
    return m


def dsm_by_sigma(model, data: Data, cfg: ExperimentConfig, sigmas=EVAL_SIGMAS, seed: int = 5) -> dict:
    """Monte-Carlo DSM loss on held-out data at each sigma (shared noise across models)."""
    return {s: mc_dsm_loss(model, data.val.x, data.val.condition, s, SeededStream(seed, int(s * 1000)),
                           edm=cfg.edm)[0] for s in sigmas}


# ------------------------------------------------------------------ stages

def run_teacher(cfg: ExperimentConfig, data: Data) -> EdmDenoiser:
    teacher = new_teacher(cfg)
    train_teacher(teacher, data.train, cfg.teacher, SeededStream(cfg.seed, 0x7EA))
    return teacher


def run_presto_s(cfg: ExperimentConfig, teacher: EdmDenoiser, data: Data,
                 step_cfg: Optional[PrestoSConfig] = None) -> PrestoSState:
    step_cfg = step_cfg or cfg.presto_s
    state = make_state(teacher, step_cfg, seed=cfg.seed)
    return train_presto_s(state, data.train, data_seed=cfg.seed)


def routing_configs(base: PrestoSConfig):
    from .distill.step import ROUTING_GRID_LS, ROUTING_GRID_NS

    for kind, grid in (("ls", ROUTING_GRID_LS), ("ns", ROUTING_GRID_NS)):
        for code in grid:
            yield code, kind, base.model_copy(update={"routing": Routing.parse(code), "gan_kind": kind})


def routing_ablation(cfg: ExperimentConfig, teacher: EdmDenoiser, data: Data, iterations: Optional[int] = None):
    """One row per routing configuration: (routing, gan_kind, mmd, frechet, consistency)."""
    n = cfg.eval.samples
    cond = eval_condition(data, n)
    rows = []
    for code, kind, scfg in routing_configs(cfg.presto_s):
        if iterations is not None:
            scfg = scfg.model_copy(update={"iterations": iterations})
        state = run_presto_s(cfg, teacher, data, scfg)
        m = metrics_for(cfg, data, generator_samples(cfg, state.generator, cond), cond)
        rows.append({"routing": "/".join(code), "gan_kind": kind, "mmd": m["mmd"], "frechet": m["frechet"],
                     "consistency": m.get("consistency", float("nan"))})
    return rows


def run_presto_l(cfg: ExperimentConfig, teacher: EdmDenoiser, data: Data,
                 layer_cfg: Optional[PrestoLConfig] = None):
    """Layer-distil a copy of the teacher. Returns (denoiser, per-step losses)."""
    from .distill.ls import layer_stage

    return layer_stage(teacher, layer_cfg or cfg.presto_l, data.train, cfg.seed)


def bucket_sigmas(schedule) -> list:
    """One representative sigma per quintile (the midpoint in schedule position)."""
    from .diffusion import sigma_from_u

    return [float(sigma_from_u((q + 0.5) / 5, schedule.sigma_min, schedule.sigma_max, schedule.rho))
            for q in range(5)]


def layer_eval(cfg, model: EdmDenoiser, teacher: EdmDenoiser, data: Data) -> list:
    """Per-quintile DSM loss of the dropped model vs the full teacher, with executed layer counts."""
    sigmas = bucket_sigmas(model.schedule)
    lm = dsm_by_sigma(model, data, cfg, sigmas)
    lt = dsm_by_sigma(teacher, data, cfg, sigmas)
    rows = []
    for q, s in enumerate(sigmas):
        rows.append({"quintile": q, "sigma": s, "budget": int(model.schedule.budgets[q]),
                     "executed_layers": int(model.executed_layer_counts([s])[0]),
                     "dsm": lm[s], "teacher_dsm": lt[s], "ratio": lm[s] / lt[s]})
    return rows


def layer_ablation(cfg: ExperimentConfig, teacher: EdmDenoiser, data: Data, masks=None, steps_list=(1, 4),
                   layer_steps: Optional[int] = None):
    """One row per (variant, ingredient mask, sampler steps) cell."""
    from .distill.layer import ablation_masks

    rows = []
    n = cfg.eval.samples
    cond = eval_condition(data, n)
    for shifted, budget, st in (masks or ablation_masks()):
        upd = {"shifted": shifted, "budget_conditioning": budget, "self_teacher": st}
        if layer_steps is not None:
            upd["steps"] = layer_steps
        lcfg = cfg.presto_l.model_copy(update=upd)
        model, _ = run_presto_l(cfg, teacher, data, lcfg)
        per = layer_eval(cfg, model, teacher, data)
        mean_ratio = float(np.mean([r["ratio"] for r in per]))
        for steps in steps_list:
            x = teacher_samples(cfg, model, cond, steps=steps, guidance_weight=1.0, kind="dpm2s")
            m = metrics_for(cfg, data, x, cond)
            rows.append({"variant": "shifted" if shifted else "baseline", "shift": int(shifted),
                         "budget_conditioning": int(budget), "self_teacher": int(st), "steps": steps,
                         "dsm_ratio_mean": mean_ratio, "dsm_ratio_top": per[0]["ratio"],
                         "mmd": m["mmd"], "frechet": m["frechet"]})
    return rows


def run_presto_ls(cfg: ExperimentConfig, teacher: EdmDenoiser, data: Data) -> LsResult:
    return run_pipeline(cfg.presto_ls, teacher, data.train, seed=cfg.seed)


# ------------------------------------------------------------------ timing

def time_forward(fn, repeats: int = 20, warmup: int = 3) -> float:
    """Median wall-clock seconds of ``fn()`` after warmup calls."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench(cfg: ExperimentConfig, generator: EdmDenoiser, steps_list, data: Data):
    """Latency and real-time factor of ping-pong sampling at each step count."""
    b = cfg.eval.bench_batch
    cond = eval_condition(data, b)
    rows = []
    for n in steps_list:
        lat = time_forward(lambda: generator_samples(cfg, generator, cond, steps=n),
                           cfg.eval.bench_repeats, cfg.eval.bench_warmup)
        rows.append({"steps": int(n), "batch": b, "latency_s": lat, "rtf": rtf(cfg.eval.duration, b, lat)})
    return rows


def layer_timing(model: EdmDenoiser, budgets, batch: int = 64, repeats: int = 100, seed: int = 0):
    """Median forward time of the network at each budget (shifted dropping)."""
    net = model.net
    rng = SeededStream(seed, 0x71)
    x = rng.normal((batch, net.cfg.data_dim))
    cond = Condition.make(np.zeros(batch, dtype=np.int64))
    c_noise = np.zeros(batch)
    out = []
    for b in budgets:
        layers = executed_layers(int(b), net.depth, "shifted")
        bud = np.full(batch, float(b)) if net.has_budget_path else None

        def fwd():
            with no_grad():
                net.forward(x, c_noise, cond, bud, layers)
        out.append({"budget": int(b), "executed_layers": len(layers),
                    "seconds": time_forward(fwd, repeats=repeats, warmup=3)})
    return out


def rejection_curve(cfg, x, condition, data: Data, ratios):
    """Mean condition log-likelihood and consistency of kept samples at each rejection ratio."""
    from .eval import rejection_sample

    scores = condition_log_likelihood(x, condition, data.val.oracle, data.val.labels)
    rows = []
    for r in ratios:
        _, idx = rejection_sample(x, scores, r)
        rows.append({"ratio": float(r), "kept": len(idx), "mean_score": float(scores[idx].mean()),
                     "consistency": consistency(x[idx], condition.take(idx), data.val.oracle, data.val.labels)})
    return rows
