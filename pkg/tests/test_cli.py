import csv
import os
import subprocess
import sys

import pytest

from presto.cli import COMMANDS, main

TINY = """\
seed: 1
model: {depth: 4, width: 16, heads: 2}
teacher: {steps: 30, batch: 32}
presto_s: {iterations: 12, batch: 16}
presto_l: {steps: 5, batch: 16}
presto_ls:
  layer: {steps: 5, batch: 16, budgets: [12, 8, 8, 0, 0]}
  step: {iterations: 12, batch: 16}
eval: {samples: 64, teacher_steps: 4, bench_batch: 2}
"""


def _rows(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.reader(fh))


def _snapshot(root):
    return {os.path.join(d, f) for d, _, fs in os.walk(root) for f in fs}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY, encoding="utf-8")
    out = root / "out"
    outside_before = _snapshot(root)
    codes = {}

    def go(*argv):
        code = main([argv[0], "--config", str(cfg), "--out", str(out), *argv[1:]])
        codes[argv[0]] = code
        return code

    go("train-teacher")
    go("distill-step")
    go("distill-layer")
    go("distill-ls")
    go("sample", "--checkpoint", str(out / "presto_s.npz"), "--sampler", "pingpong", "--steps", "2", "--n", "16")
    go("eval", "--checkpoint", str(out / "teacher.npz"), "--steps", "4")
    go("bench", "--checkpoint", str(out / "presto_s.npz"), "--steps", "1,2,4,8")
    go("probe-variance", "--checkpoint", str(out / "presto_l.npz"), "--samples", "32")
    go("sweep-rho", "--checkpoint", str(out / "presto_s.npz"), "--rhos", "1,7,1000")
    go("ablate-noise-routing", "--iterations", "6")
    go("ablate-layer", "--steps", "3", "--sampler-steps", "1")
    outside_after = _snapshot(root) - _snapshot(out)
    return root, out, codes, outside_before, outside_after


def test_every_command_succeeds(run):
    _, _, codes, _, _ = run
    assert set(codes) == set(COMMANDS)
    assert all(c == 0 for c in codes.values()), codes


def test_nothing_written_outside_output_dir(run):
    _, _, _, before, after = run
    assert after == before


def test_every_csv_starts_with_schema_header(run):
    _, out, _, _, _ = run
    csvs = sorted(out.glob("*.csv"))
    assert len(csvs) >= 14
    for p in csvs:
        rows = _rows(p)
        assert rows[0][0] == "schema_version", p.name
        assert len(rows) > 1 and all(r[0] == rows[1][0] for r in rows[1:]), p.name


def test_routing_table_has_ten_rows(run):
    _, out, _, _, _ = run
    rows = _rows(out / "noise_routing.csv")
    assert rows[0] == ["schema_version", "routing", "gan_kind", "mmd", "frechet", "consistency"]
    body = rows[1:]
    assert len(body) == 10
    assert sum(r[2] == "ls" for r in body) == 7 and sum(r[2] == "ns" for r in body) == 3


def test_bench_rows_per_step_count(run):
    _, out, _, _, _ = run
    rows = _rows(out / "bench.csv")
    assert rows[0] == ["schema_version", "steps", "batch", "latency_s", "rtf"]
    assert [int(r[1]) for r in rows[1:]] == [1, 2, 4, 8]
    assert all(float(r[3]) > 0 and float(r[4]) > 0 for r in rows[1:])


def test_ls_run_is_deterministic(run, tmp_path):
    root, out, _, _, _ = run
    again = tmp_path / "again"
    code = main(["distill-ls", "--config", str(root / "tiny.yaml"), "--out", str(again),
                 "--teacher", str(out / "teacher.npz")])
    assert code == 0
    assert (again / "presto_ls_metrics.csv").read_bytes() == (out / "presto_ls_metrics.csv").read_bytes()


def test_reproduce_failure_emits_traces(run, tmp_path):
    root, out, _, _, _ = run
    dest = tmp_path / "fail"
    code = main(["distill-ls", "--config", str(root / "tiny.yaml"), "--out", str(dest),
                 "--teacher", str(out / "teacher.npz"), "--reproduce-failure", "joint"])
    assert code in (0, 1)
    assert _rows(dest / "presto_ls_traces.csv")[0][-1] == "real_acc"


@pytest.mark.parametrize("argv", [["frobnicate"], ["bench", "--checkpoint", "x.npz", "--bogus"], ["sample"]])
def test_usage_errors_exit_two_without_output(tmp_path, argv):
    env = {**os.environ, "PRESTO_NUMBA": "0"}
    proc = subprocess.run([sys.executable, "-m", "presto.cli", *argv, "--out", str(tmp_path / "o")],
                          capture_output=True, text=True, cwd=tmp_path, env=env)
    assert proc.returncode == 2
    assert "usage" in proc.stderr
    assert list(tmp_path.iterdir()) == []


def test_bad_config_exits_two(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("edm: {rho: 0.5}\n", encoding="utf-8")
    assert main(["train-teacher", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_missing_teacher_exits_one(tmp_path):
    assert main(["distill-step", "--out", str(tmp_path / "o")]) == 1


def test_output_path_guard():
    from presto.cli import out_path
    from presto.io.config import config_from_dict
    cfg = config_from_dict({"output_dir": "/tmp/presto-guard"})
    with pytest.raises(ValueError, match="outside"):
        out_path(cfg, "../escape.csv")
