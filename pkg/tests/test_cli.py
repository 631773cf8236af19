import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from steernet import cli
from steernet import evalkit as ek

TINY = """
seed: 0
factor_grid: [0, 1]
model: {d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_seq_len: 48}
pretrain: {steps: 20, batch_size: 8, n_lines: 300}
hypernet: {n_blocks: 1, n_heads: 2, n_cross_heads: 2}
train: {steps: 4, batch_size: 4}
data: {n_concepts: 2, n_train: 4, n_eval: 2}
baseline: {steps: 2, batch_size: 4}
sweep: {sizes: [1, 2], seeds: [0], depths: [1, 2, 3, 4], inits: [random, pretrained-from-base]}
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.yaml").write_text(TINY)
    assert cli.main(["pretrain", "--config", str(d / "cfg.yaml"), "--out", str(d / "run")]) == 0
    return d


def run(workdir, *args, out="run"):
    return cli.main([args[0], "--config", str(workdir / "cfg.yaml"), "--out", str(workdir / out), *args[1:]])


class TestUsage:
    def test_unknown_command(self, capsys):
        assert cli.main(["fly"]) == 2

    def test_missing_command(self):
        assert cli.main([]) == 2

    def test_invalid_config(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("train: {lrr: 1}\n")
        assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 3

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["gen-data", "--config", str(tmp_path / "nope.yaml")]) == 3

    def test_runtime_failure(self, workdir, tmp_path):
        broken = tmp_path / "broken.hstr"
        broken.write_bytes(b"garbage")
        assert run(workdir, "eval", "--base", str(broken), "--method", "unsteered", out="fail") == 1

    def test_module_entry_point(self):
        res = subprocess.run([sys.executable, "-m", "steernet.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "scale-sweep" in res.stdout


class TestCommands:
    def test_pretrain_outputs(self, workdir):
        assert (workdir / "run" / "base.hstr").exists()
        lines = (workdir / "run" / "pretrain_log.jsonl").read_text().splitlines()
        assert len(lines) == 20 and {"step", "loss", "flops"} <= set(json.loads(lines[0]))

    def test_gen_data(self, workdir):
        assert run(workdir, "gen-data") == 0
        train = (workdir / "run" / "train.jsonl").read_text().splitlines()
        assert len(train) == 8
        rec = json.loads(train[0])
        assert set(rec) == {"x", "s", "y_label", "concept_id", "task_id", "split"}

    def test_train_and_eval_deterministic(self, workdir):
        assert run(workdir, "train") == 0
        ckpt = workdir / "run" / "hypernet.hstr"
        first = ckpt.read_bytes()
        assert run(workdir, "train") == 0
        assert ckpt.read_bytes() == first
        assert run(workdir, "eval", "--checkpoint", str(ckpt), out="e1") == 0
        assert run(workdir, "eval", "--checkpoint", str(ckpt), out="e2") == 0
        files = sorted(p.name for p in (workdir / "e1").iterdir() if p.suffix in (".csv", ".jsonl", ".json"))
        assert any(f.endswith(".csv") for f in files)
        for name in files:
            assert (workdir / "e1" / name).read_bytes() == (workdir / "e2" / name).read_bytes()
        rows = list(csv.DictReader(open(workdir / "e1" / files[0 if files[0].endswith(".csv") else 1])))
        assert tuple(rows[0]) == ek.REPORT_COLUMNS

    def test_baselines(self, workdir):
        assert run(workdir, "train-baseline", "--method", "reft-r1") == 0
        assert run(workdir, "train-baseline", "--method", "diffmean") == 0
        for m in ("reft-r1", "diffmean"):
            store = workdir / "run" / f"vectors_{m}.hstr"
            assert run(workdir, "eval", "--checkpoint", str(store), "--split", "held-in", out=f"ev_{m}") == 0
        assert run(workdir, "eval", "--method", "prompt", "--split", "held-in", out="ev_prompt") == 0
        summary = json.loads((workdir / "ev_prompt" / "prompt_eval-held-in.summary.json").read_text())
        assert summary["best_factor"] is None

    def test_factor_grid_override(self, workdir):
        ckpt = workdir / "run" / "hypernet.hstr"
        if not ckpt.exists():
            assert run(workdir, "train") == 0
        assert run(workdir, "eval", "--checkpoint", str(ckpt), "--factor-grid", "0,2", "--split", "held-in",
                   out="grid") == 0
        summary = json.loads(next((workdir / "grid").glob("*.summary.json")).read_text())
        assert set(summary["factor_scores"]) == {"0.000000", "2.000000"}

    def test_scale_sweep_emits_one_report_per_size(self, workdir):
        assert run(workdir, "scale-sweep", "--base", str(workdir / "run" / "base.hstr"), out="sweep") == 0
        reports = sorted((workdir / "sweep").glob("sweep_c*_held_out.csv"))
        assert [p.name for p in reports] == ["sweep_c1_s0_held_out.csv", "sweep_c2_s0_held_out.csv"]

    def test_ablate_grid_shape(self, workdir):
        assert run(workdir, "ablate", "--base", str(workdir / "run" / "base.hstr"), out="abl") == 0
        rows = list(csv.DictReader(open(workdir / "abl" / "ablation.csv")))
        assert len(rows) == 8
        assert {(r["init"], r["n_blocks"]) for r in rows} == {(i, str(n)) for i in ("random", "pretrained-from-base")
                                                               for n in (1, 2, 3, 4)}

    def test_analyze(self, workdir):
        ckpt = workdir / "run" / "hypernet.hstr"
        if not ckpt.exists():
            assert run(workdir, "train") == 0
        c = np.array([1, 5, 10, 25, 50, 100.0])
        pts = workdir / "flops.csv"
        pts.write_text("c,tflops\n" + "".join(f"{a},{87.7035 + 1521.1495 * np.exp(-0.0034 * a)}\n" for a in c))
        assert run(workdir, "analyze", "--checkpoint", str(ckpt), "--flops", str(pts), out="an") == 0
        out = workdir / "an" / "analysis"
        fit = json.loads((out / "flops_fit.json").read_text())
        assert fit["a"] == pytest.approx(87.7035, rel=1e-3)
        cos = json.loads((out / "cosine.json").read_text())
        m = np.array(cos["matrix"])
        assert m.shape[0] == m.shape[1] == len(cos["concepts"])
        attn = json.loads((out / "attention.json").read_text())
        assert attn["blocks"] and "cross_max_column_mass" in attn["blocks"][0]
        assert (out / "pca.csv").exists()
