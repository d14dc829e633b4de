"""Command-line entry point: ``presto <subcommand> [--config FILE] [--out DIR] ...``.

Every command validates its config before doing any work, writes only under
the output directory, and exits nonzero on error (2 for usage errors).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .condition import Condition
from .diffusion import GuidanceConfig, inference_schedule
from .distill.step import TRACE_KEYS, traces_to_rows
from .eval import MetricReport, rho_sweep
from .io.checkpoint import CheckpointError, presto_s_arrays
from .io.config import ConfigValidationError, ExperimentConfig, config_from_dict, parse_config, serialize_config
from .io.csvio import write_csv
from .models.probe import variance_profile
from .samplers import SamplingError, dpm2s_sample, ode_sample, ping_pong_sample

log = logging.getLogger("presto")

TEACHER = "teacher.npz"
COMMANDS = ("train-teacher", "distill-step", "distill-layer", "distill-ls", "sample", "eval", "bench",
            "probe-variance", "sweep-rho", "ablate-noise-routing", "ablate-layer")


def _int_list(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="presto", description="Toy-scale diffusion distillation experiments.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="YAML experiment config (defaults if omitted)")
        s.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("-v", "--verbose", action="store_true")
        return s

    def teacher_arg(s):
        s.add_argument("--teacher", type=Path, help=f"teacher checkpoint (default OUT/{TEACHER})")

    cmd("train-teacher", "train the conditional teacher denoiser")
    s = cmd("distill-step", "step-distil the teacher into a few-step generator")
    teacher_arg(s)
    s.add_argument("--iterations", type=int)
    s = cmd("distill-layer", "layer-distil the teacher under a dropping schedule")
    teacher_arg(s)
    s.add_argument("--steps", type=int)
    s = cmd("distill-ls", "layer distillation followed by step distillation")
    teacher_arg(s)
    s.add_argument("--reproduce-failure", choices=["step-layer", "joint", "layer_distilled"],
                   help="run a known-bad variant and keep its diagnostic traces")
    s = cmd("sample", "draw samples from a checkpoint")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--sampler", choices=["euler", "heun", "dpm2s", "pingpong"])
    s.add_argument("--steps", type=int)
    s.add_argument("--rho", type=float)
    s.add_argument("--guidance", type=float)
    s.add_argument("--n", type=int, default=256)
    s.add_argument("--category", type=int, help="condition every sample on one category (default: held-out mix)")
    s = cmd("eval", "sample-quality metrics for a checkpoint")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--sampler", choices=["euler", "heun", "dpm2s", "pingpong"])
    s.add_argument("--steps", type=int)
    s.add_argument("--guidance", type=float)
    s = cmd("bench", "latency and real-time factor per step count")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--steps", type=_int_list)
    s = cmd("probe-variance", "per-layer activation variance of a checkpoint")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--samples", type=int, default=256)
    s = cmd("sweep-rho", "ping-pong samples of a generator across rho values")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--rhos", type=_float_list)
    s.add_argument("--steps", type=int)
    s = cmd("ablate-noise-routing", "train and score every noise-routing configuration")
    teacher_arg(s)
    s.add_argument("--iterations", type=int)
    s = cmd("ablate-layer", "train and score every layer-dropping ingredient mask")
    teacher_arg(s)
    s.add_argument("--steps", type=int, help="layer-distillation steps per mask")
    s.add_argument("--sampler-steps", type=_int_list, default=[1, 4])
    return p


# ------------------------------------------------------------------ helpers

def load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else config_from_dict({})
    upd = {}
    if args.out is not None:
        upd["output_dir"] = str(args.out)
    if args.seed is not None:
        upd["seed"] = args.seed
    return cfg.model_copy(update=upd) if upd else cfg


def out_path(cfg: ExperimentConfig, name: str) -> Path:
    root = Path(cfg.output_dir).resolve()
    path = (root / name).resolve()
    if root not in path.parents:
        raise ValueError(f"refusing to write {name!r} outside {root}")
    root.mkdir(parents=True, exist_ok=True)
    return path


def load_teacher(args, cfg):
    path = args.teacher or Path(cfg.output_dir) / TEACHER
    if not Path(path).exists():
        raise FileNotFoundError(f"teacher checkpoint {path} not found; run train-teacher first")
    return ex.load_model(path, cfg, force=True)


def write_traces(cfg, name, traces):
    write_csv(out_path(cfg, name), "traces/1", list(TRACE_KEYS), traces_to_rows(traces))


def student_report(cfg, data, report, name, generator):
    cond = ex.eval_condition(data, cfg.eval.samples)
    x = ex.generator_samples(cfg, generator, cond)
    report.add_all(name, "pingpong", cfg.eval.student_steps, cfg.sampler.rho, cfg.seed,
                   ex.metrics_for(cfg, data, x, cond))


def _sample(cfg, model, sampler, steps, rho, guidance, cond, seed):
    dim = model.net.cfg.data_dim
    if sampler == "pingpong":
        sched = inference_schedule(steps, rho, cfg.edm.sigma_min, cfg.edm.sigma_max)
        return ping_pong_sample(model, sched, cond, seed, dim)
    sched = inference_schedule(steps + 1, rho, cfg.edm.sigma_min, cfg.edm.sigma_max)
    g = GuidanceConfig(weight=guidance)
    if sampler == "dpm2s":
        return dpm2s_sample(model, sched, cond, g, seed, dim)
    return ode_sample(model, sched, cond, g, seed, dim, method=sampler)


# ------------------------------------------------------------------ commands

def cmd_train_teacher(args, cfg):
    data = ex.build_data(cfg)
    teacher = ex.run_teacher(cfg, data)
    ex.save_model(out_path(cfg, TEACHER), teacher, cfg, "teacher", cfg.teacher.steps)
    report = MetricReport()
    oracle = ex.oracle_denoiser(cfg)
    for s, v in ex.dsm_by_sigma(teacher, data, cfg).items():
        report.add("teacher", "dsm", 0, s, cfg.seed, "dsm_loss", v)
        if oracle is not None:
            report.add("oracle", "dsm", 0, s, cfg.seed, "dsm_loss", ex.dsm_by_sigma(oracle, data, cfg, [s])[s])
    cond = ex.eval_condition(data, cfg.eval.samples)
    x = ex.teacher_samples(cfg, teacher, cond)
    report.add_all("teacher", "heun", cfg.eval.teacher_steps, cfg.sampler.rho, cfg.seed,
                   ex.metrics_for(cfg, data, x, cond))
    report.to_csv(out_path(cfg, "teacher_metrics.csv"))


def cmd_distill_step(args, cfg):
    if args.iterations is not None:
        cfg = cfg.model_copy(update={"presto_s": cfg.presto_s.model_copy(update={"iterations": args.iterations})})
    data = ex.build_data(cfg)
    teacher = load_teacher(args, cfg)
    state = ex.run_presto_s(cfg, teacher, data)
    ex.save_model(out_path(cfg, "presto_s.npz"), state.generator, cfg, "presto_s", state.iteration,
                  extra={f"state.{k}": v for k, v in presto_s_arrays(state).items()})
    write_traces(cfg, "presto_s_traces.csv", state.traces)
    report = MetricReport()
    student_report(cfg, data, report, "presto_s", state.generator)
    report.to_csv(out_path(cfg, "presto_s_metrics.csv"))


def cmd_distill_layer(args, cfg):
    if args.steps is not None:
        cfg = cfg.model_copy(update={"presto_l": cfg.presto_l.model_copy(update={"steps": args.steps})})
    data = ex.build_data(cfg)
    teacher = load_teacher(args, cfg)
    model, losses = ex.run_presto_l(cfg, teacher, data)
    ex.save_model(out_path(cfg, "presto_l.npz"), model, cfg, "presto_l", len(losses))
    rows = ex.layer_eval(cfg, model, teacher, data)
    write_csv(out_path(cfg, "presto_l_buckets.csv"), "layer-buckets/1", list(rows[0]), rows)
    write_csv(out_path(cfg, "presto_l_losses.csv"), "layer-losses/1", ["step", "dsm", "self_teacher", "total"],
              ({"step": i, "dsm": l.dsm, "self_teacher": l.self_teacher, "total": l.total}
               for i, l in enumerate(losses)))


def cmd_distill_ls(args, cfg):
    if args.reproduce_failure:
        field = "score_init" if args.reproduce_failure == "layer_distilled" else "order"
        ls = cfg.presto_ls.model_dump()
        ls.update({field: args.reproduce_failure, "reproduce_failure": True})
        doc = cfg.model_dump(mode="json")
        doc["presto_ls"] = ls
        cfg = config_from_dict(doc)
    data = ex.build_data(cfg)
    teacher = load_teacher(args, cfg)
    res = ex.run_presto_ls(cfg, teacher, data)
    if res.stage1 is not None:
        ex.save_model(out_path(cfg, "presto_ls_stage1.npz"), res.stage1, cfg, "presto_ls_stage1",
                      len(res.layer_losses))
    if res.state is not None:
        write_traces(cfg, "presto_ls_traces.csv", res.traces)
    if res.collapsed:
        out_path(cfg, "presto_ls_diagnostic.txt").write_text(res.diagnostic + "\n", encoding="utf-8")
        log.warning("collapse guard tripped: %s", res.diagnostic)
        return 1
    info = {"init_digests": res.state.init_digests} if res.state else None
    ex.save_model(out_path(cfg, "presto_ls.npz"), res.generator, cfg, "presto_ls",
                  res.state.iteration if res.state else 0, info=info)
    report = MetricReport()
    student_report(cfg, data, report, "presto_ls", res.generator)
    report.to_csv(out_path(cfg, "presto_ls_metrics.csv"))
    return 0


def cmd_sample(args, cfg):
    model = ex.load_model(args.checkpoint, cfg)
    sampler = args.sampler or cfg.sampler.kind
    steps = args.steps or cfg.sampler.steps
    rho = cfg.sampler.rho if args.rho is None else args.rho
    w = cfg.sampler.guidance.weight if args.guidance is None else args.guidance
    if args.category is not None:
        cond = Condition.make(np.full(args.n, args.category, dtype=np.int64))
    else:
        cond = ex.eval_condition(ex.build_data(cfg), args.n)
    x = _sample(cfg, model, sampler, steps, rho, w, cond, cfg.seed + 7)
    cols = [f"x{i}" for i in range(x.shape[1])]
    rows = ({"category": int(c), "tempo": int(t), **dict(zip(cols, map(float, xi)))}
            for c, t, xi in zip(cond.category, cond.tempo, x))
    write_csv(out_path(cfg, "samples.csv"), "samples/1", ["category", "tempo", *cols], rows)


def cmd_eval(args, cfg):
    model = ex.load_model(args.checkpoint, cfg)
    data = ex.build_data(cfg)
    sampler = args.sampler or cfg.sampler.kind
    steps = args.steps or cfg.sampler.steps
    w = cfg.sampler.guidance.weight if args.guidance is None else args.guidance
    cond = ex.eval_condition(data, cfg.eval.samples)
    x = _sample(cfg, model, sampler, steps, cfg.sampler.rho, w, cond, cfg.seed + 7)
    report = MetricReport()
    report.add_all(args.checkpoint.stem, sampler, steps, cfg.sampler.rho, cfg.seed, ex.metrics_for(cfg, data, x, cond))
    if data.val.oracle is not None:
        for row in ex.rejection_curve(cfg, x, cond, data, cfg.eval.rejection_ratios):
            report.add(args.checkpoint.stem, f"reject@{row['ratio']}", steps, cfg.sampler.rho, cfg.seed,
                       "consistency", row["consistency"])
    report.to_csv(out_path(cfg, "eval_metrics.csv"))


def cmd_bench(args, cfg):
    model = ex.load_model(args.checkpoint, cfg)
    rows = ex.bench(cfg, model, args.steps or cfg.eval.bench_steps, ex.build_data(cfg))
    write_csv(out_path(cfg, "bench.csv"), "bench/1", ["steps", "batch", "latency_s", "rtf"], rows)


def cmd_probe_variance(args, cfg):
    model = ex.load_model(args.checkpoint, cfg)
    data = ex.build_data(cfg)
    n = min(args.samples, len(data.val.x))
    prof = variance_profile(model, data.val.x[:n], data.val.condition.take(slice(0, n)),
                            ex.bucket_sigmas(model.schedule) if model.schedule else list(ex.EVAL_SIGMAS),
                            seed=cfg.seed)
    prof.to_csv(out_path(cfg, "variance.csv"))


def cmd_sweep_rho(args, cfg):
    model = ex.load_model(args.checkpoint, cfg)
    data = ex.build_data(cfg)
    cond = ex.eval_condition(data, cfg.eval.samples)
    rhos = args.rhos or cfg.eval.rho_values
    steps = args.steps or cfg.eval.student_steps
    sweep = rho_sweep(model, steps, rhos, cond, cfg.seed + 7, model.net.cfg.data_dim, cfg.edm.sigma_min,
                      cfg.edm.sigma_max)
    report = MetricReport()
    for r in sweep.rhos:
        report.add_all(args.checkpoint.stem, "pingpong", steps, r, cfg.seed,
                       ex.metrics_for(cfg, data, sweep.samples[r], cond))
    report.to_csv(out_path(cfg, "rho_sweep.csv"))
    rows = [{"step": i, "rho": r, "sigma": float(s)} for r in sweep.rhos for i, s in enumerate(sweep.schedules[r])]
    write_csv(out_path(cfg, "rho_schedules.csv"), "rho-schedules/1", ["step", "rho", "sigma"], rows)


def cmd_ablate_noise_routing(args, cfg):
    data = ex.build_data(cfg)
    teacher = load_teacher(args, cfg)
    rows = ex.routing_ablation(cfg, teacher, data, args.iterations)
    write_csv(out_path(cfg, "noise_routing.csv"), "noise-routing/1",
              ["routing", "gan_kind", "mmd", "frechet", "consistency"], rows)


def cmd_ablate_layer(args, cfg):
    data = ex.build_data(cfg)
    teacher = load_teacher(args, cfg)
    rows = ex.layer_ablation(cfg, teacher, data, steps_list=args.sampler_steps, layer_steps=args.steps)
    write_csv(out_path(cfg, "layer_ablation.csv"), "layer-ablation/1", list(rows[0]), rows)


HANDLERS = {name: globals()["cmd_" + name.replace("-", "_")] for name in COMMANDS}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)       # usage errors exit 2 before any file is touched
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        out_path(cfg, "config.yaml").write_text(serialize_config(cfg), encoding="utf-8")
        return int(HANDLERS[args.command](args, cfg) or 0)
    except ConfigValidationError as err:
        print(f"presto: {err}", file=sys.stderr)
        return 2
    except (CheckpointError, FileNotFoundError, SamplingError, ValueError) as err:
        print(f"presto: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
