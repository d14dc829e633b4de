import numpy as np
import pytest

from presto.distill.layer import REDUCED_BUDGETS, PrestoLConfig
from presto.distill.ls import FAILURE_NOTES, LsPipelineConfig, run_pipeline
from presto.distill.step import PrestoSConfig
from presto.io.data import Gmm2DSpec, generate_dataset
from presto.models import DitConfig, DitModel, EdmDenoiser, randomize
from presto.numerics import SeededStream

CFG = DitConfig(depth=4, width=8, heads=2, tokens=2, data_dim=2, categories=4)


def _bytes(net):
    return {k: v.tobytes() for k, v in net.state_arrays().items()}


def tiny(**kw):
    base = dict(layer=PrestoLConfig(budgets=REDUCED_BUDGETS, steps=4, batch=8),
                step=PrestoSConfig(iterations=12, batch=8, guidance_weight=1.0))
    base.update(kw)
    return LsPipelineConfig(**base)


@pytest.fixture(scope="module")
def setup():
    data = generate_dataset(Gmm2DSpec(size=256), SeededStream(0))
    teacher = EdmDenoiser(randomize(DitModel(CFG), 1))
    return teacher, data


def test_defaults():
    cfg = LsPipelineConfig()
    assert (cfg.order, cfg.score_init, cfg.reproduce_failure) == ("layer-step", "teacher", False)
    assert cfg.layer.budgets == (12, 8, 8, 0, 0)
    assert cfg.layer.schedule(12).budgets == (6, 4, 4, 0, 0)


@pytest.mark.parametrize("kw,note", [({"order": "step-layer"}, "step-layer"), ({"order": "joint"}, "joint"),
                                     ({"score_init": "layer_distilled"}, "layer_distilled")])
def test_failure_orderings_need_the_flag(kw, note):
    with pytest.raises(ValueError, match="reproduce_failure") as exc:
        LsPipelineConfig(**kw)
    assert FAILURE_NOTES[note] in str(exc.value)
    assert LsPipelineConfig(reproduce_failure=True, **kw).reproduce_failure


def test_score_models_come_from_the_original_teacher(setup):
    teacher, data = setup
    before = _bytes(teacher.net)
    res = run_pipeline(tiny(), teacher, data, seed=0)
    assert not res.collapsed
    st = res.state
    assert st.real is teacher and _bytes(teacher.net) == before
    # fake score model starts as a teacher copy: its budget-free layout matches the teacher, not stage 1
    assert not st.fake.net.has_budget_path and res.stage1.net.has_budget_path
    fresh = run_pipeline(tiny(step=PrestoSConfig(iterations=0, batch=8)), teacher, data, seed=0)
    assert _bytes(fresh.state.fake.net) == before


def test_generator_starts_from_stage_one_and_stage_one_is_untouched(setup):
    teacher, data = setup
    res = run_pipeline(tiny(), teacher, data, seed=0)
    stage1 = {k: v.tobytes() for k, v in res.stage1_arrays.items()}
    assert _bytes(res.stage1.net) == stage1
    assert res.generator.schedule == res.stage1.schedule
    assert res.generator.net.has_budget_path
    assert _bytes(res.generator.net) != stage1
    start = run_pipeline(tiny(step=PrestoSConfig(iterations=0, batch=8)), teacher, data, seed=0)
    assert _bytes(start.generator.net) == stage1


def test_traces_have_diagnostic_columns(setup):
    teacher, data = setup
    res = run_pipeline(tiny(), teacher, data, seed=0)
    for k in ("gen_loss", "disc_loss", "dmd_grad_norm", "real_acc"):
        assert len(res.traces[k]) == 12
    assert len(res.layer_losses) == 4


@pytest.mark.parametrize("kw", [{"order": "joint"}, {"order": "step-layer"}, {"score_init": "layer_distilled"}])
def test_failure_orderings_run_behind_the_flag(setup, kw):
    teacher, data = setup
    res = run_pipeline(tiny(reproduce_failure=True, **kw), teacher, data, seed=0)
    assert len(res.traces["real_acc"]) == 12
    if kw.get("score_init") == "layer_distilled":
        assert res.state.fake.net.has_budget_path


def test_collapse_is_reported_not_raised(setup):
    teacher, data = setup
    step = PrestoSConfig(iterations=40, batch=8, guidance_weight=1.0, collapse_window=1, collapse_threshold=1e-9)
    res = run_pipeline(tiny(step=step), teacher, data, seed=0)
    assert res.collapsed and "accuracy" in res.diagnostic
    assert len(res.traces["iteration"]) < 40


def test_pipeline_is_deterministic(setup):
    teacher, data = setup
    a = run_pipeline(tiny(), teacher, data, seed=3)
    b = run_pipeline(tiny(), teacher, data, seed=3)
    assert _bytes(a.generator.net) == _bytes(b.generator.net)
    for k in a.traces:
        if k == "turn":
            assert a.traces[k] == b.traces[k]
        else:
            assert np.asarray(a.traces[k], dtype=float).tobytes() == np.asarray(b.traces[k], dtype=float).tobytes()
