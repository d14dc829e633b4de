"""Layer-then-step distillation pipeline.

Stage 1 layer-distills a copy of the teacher under a conservative dropping
schedule. Stage 2 step-distills it: the generator starts from the stage-1
weights and keeps their budget conditioning and schedule, while the real and
fake score models start from the original full-depth teacher.

The orderings known to fail (step first, joint layer+step from the teacher,
score models taken from the layer-distilled net) stay available behind
``reproduce_failure`` so their diagnostic traces can be inspected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, model_validator

from ..models.denoiser import EdmDenoiser
from ..numerics import Adam, SeededStream
from .layer import REDUCED_BUDGETS, PrestoLConfig, presto_l_step
from .step import GeneratorCollapse, PrestoSConfig, PrestoSState, make_state, train_presto_s

FAILURE_NOTES = {
    "step-layer": "dropping layers from an already step-distilled generator destroys its few-step behaviour",
    "joint": "layer dropping and step distillation started together from the teacher collapse the generator",
    "layer_distilled": "score models taken from the layer-distilled net lose capacity and the generator collapses",
}


class LsPipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    order: Literal["layer-step", "step-layer", "joint"] = "layer-step"
    score_init: Literal["teacher", "layer_distilled"] = "teacher"
    reproduce_failure: bool = False
    layer: PrestoLConfig = PrestoLConfig(budgets=REDUCED_BUDGETS)
    step: PrestoSConfig = PrestoSConfig()

    @model_validator(mode="after")
    def _guard(self):
        if self.reproduce_failure:
            return self
        if self.order != "layer-step":
            raise ValueError(f"order {self.order!r} rejected: {FAILURE_NOTES[self.order]}; "
                             "set reproduce_failure to run it anyway")
        if self.score_init != "teacher":
            raise ValueError(f"score_init {self.score_init!r} rejected: {FAILURE_NOTES['layer_distilled']}; "
                             "set reproduce_failure to run it anyway")
        return self


@dataclass
class LsResult:
    generator: EdmDenoiser
    stage1: Optional[EdmDenoiser]
    stage1_arrays: dict
    state: Optional[PrestoSState]
    layer_losses: list = field(default_factory=list)
    collapsed: bool = False
    diagnostic: str = ""

    @property
    def traces(self) -> dict:
        return self.state.traces if self.state is not None else {}


def layer_stage(teacher: EdmDenoiser, cfg: PrestoLConfig, dataset, seed: int, net=None) -> tuple:
    """Layer-distill a copy of ``net`` (default: the teacher net). Returns (denoiser, losses)."""
    net = (net if net is not None else teacher.net).copy()
    if cfg.budget_conditioning and not net.has_budget_path:
        net.add_budget_path()
    sched = cfg.schedule(net.depth, teacher.edm)
    sched.validate_depth(net.depth)
    den = EdmDenoiser(net, teacher.edm, sched)
    opt = Adam(den.params, lr=cfg.lr)
    losses = []
    for i in range(cfg.steps):
        st = SeededStream(seed, 0x1A, i)
        x, cond = dataset.batch(st, cfg.batch)
        losses.append(presto_l_step(den, x, cond, cfg, opt, st))
    return den, losses


def run_pipeline(cfg: LsPipelineConfig, teacher: EdmDenoiser, dataset, seed: int = 0) -> LsResult:
    """Run the configured ordering. A tripped collapse guard ends the run early
    with ``collapsed=True``; the traces up to that point are kept."""
    stage1 = None
    stage1_arrays: dict = {}
    losses: list = []
    state = None
    try:
        if cfg.order == "step-layer":
            state = make_state(teacher, cfg.step, seed)
            train_presto_s(state, dataset, data_seed=seed)
            stage1, losses = layer_stage(teacher, cfg.layer, dataset, seed, net=state.generator.net)
            stage1_arrays = {k: v.copy() for k, v in stage1.net.state_arrays().items()}
            return LsResult(stage1, stage1, stage1_arrays, state, losses)
        if cfg.order == "layer-step":
            stage1, losses = layer_stage(teacher, cfg.layer, dataset, seed)
            stage1_arrays = {k: v.copy() for k, v in stage1.net.state_arrays().items()}
            gen_net, sched = stage1.net, stage1.schedule
        else:  # joint: dropping schedule applied directly to a teacher-initialised generator
            gen_net = teacher.net.copy()
            if cfg.layer.budget_conditioning:
                gen_net.add_budget_path()
            sched = cfg.layer.schedule(gen_net.depth, teacher.edm)
        real = teacher
        score_net = None
        if cfg.score_init == "layer_distilled" and stage1 is not None:
            real = EdmDenoiser(stage1.net.copy(), teacher.edm, stage1.schedule)
            score_net = stage1.net
        state = make_state(real, cfg.step, seed, generator_net=gen_net, generator_schedule=sched,
                           score_net=score_net)
        train_presto_s(state, dataset, data_seed=seed)
        return LsResult(state.generator, stage1, stage1_arrays, state, losses)
    except GeneratorCollapse as exc:
        gen = state.generator if state is not None else stage1
        return LsResult(gen, stage1, stage1_arrays, state, losses, collapsed=True, diagnostic=str(exc))
