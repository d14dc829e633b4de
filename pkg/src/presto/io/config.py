"""Experiment configuration: one YAML document validated in full before any compute.

Every section is optional; omitted keys take their defaults. Unknown keys,
type mismatches and constraint violations are all collected and reported
with their dotted path into the document.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ..diffusion import EdmConfig
from ..distill.layer import PrestoLConfig
from ..distill.ls import LsPipelineConfig
from ..distill.step import PrestoSConfig
from ..models.dit import DitConfig
from ..samplers import SamplerConfig
from ..training import TeacherConfig
from .data import Gmm2DSpec, ToySignal1DSpec


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    samples: int = Field(1024, ge=8)
    k: int = Field(3, ge=1)
    teacher_steps: int = Field(40, ge=1)
    student_steps: int = Field(4, ge=1)
    rejection_ratios: list[float] = [0.0, 0.25, 0.5, 0.75]
    rho_values: list[float] = [1.0, 3.0, 7.0, 15.0, 1000.0]
    bench_steps: list[int] = [1, 2, 4, 8]
    bench_batch: int = Field(1, ge=1)
    bench_repeats: int = Field(20, ge=20)
    bench_warmup: int = Field(3, ge=3)
    duration: float = Field(1.0, gt=0)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 0
    output_dir: str = "runs/default"
    dataset: Annotated[Union[Gmm2DSpec, ToySignal1DSpec], Field(discriminator="kind")] = Gmm2DSpec()
    edm: EdmConfig = EdmConfig()
    model: DitConfig = DitConfig()
    teacher: TeacherConfig = TeacherConfig()
    presto_s: PrestoSConfig = PrestoSConfig()
    presto_l: PrestoLConfig = PrestoLConfig()
    presto_ls: LsPipelineConfig = LsPipelineConfig()
    sampler: SamplerConfig = SamplerConfig()
    eval: EvalConfig = EvalConfig()


class ConfigValidationError(ValueError):
    def __init__(self, violations: list):
        self.violations = violations
        super().__init__("invalid config:\n" + "\n".join(f"  {p}: {m}" for p, m in violations))


def _violations(err: ValidationError) -> list:
    out = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        out.append((loc, e["msg"]))
    return out


def config_from_dict(doc) -> ExperimentConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigValidationError([("<root>", f"expected a mapping, got {type(doc).__name__}")])
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as err:
        raise ConfigValidationError(_violations(err)) from None


def parse_config_text(text: str) -> ExperimentConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigValidationError([("<document>", f"YAML syntax error: {err}")]) from None
    return config_from_dict(doc)


def parse_config(path) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")


def serialize_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
