import csv
import json
import shutil
import subprocess
import sys

import pytest

from gemq.allocator import AllocationPlan
from gemq.checkpoint import load_checkpoint
from gemq.cli import main

TINY = {
    "corpus": {"n_chars": 8000},
    "model": {"d_model": 8, "d_hidden": 8, "n_layers": 2, "n_experts": 8, "seq_len": 16},
    "train": {"max_steps": 30, "batch_size": 4},
    "calib": {"n_sequences": 8},
}


def call(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.json").write_text(json.dumps(TINY))
    assert main(["train", "--config", str(d / "tiny.json"), "--out", str(d / "fp.gemq")]) == 0
    return d


def test_train_writes_a_checkpoint(work):
    m = load_checkpoint(work / "fp.gemq")
    assert m.config.n_experts == 8 and m.expert_bits is None


def test_importance_allocate_quantize_tune_eval(work, capsys):
    cfg = work / "tiny.json"
    code, out, _ = call(capsys, "importance", "--config", cfg, "--model", work / "fp.gemq", "--out", work / "imp.csv")
    assert code == 0 and json.loads(out)["importance"].endswith("imp.csv")

    code, out, _ = call(capsys, "allocate", work / "imp.csv", "--config", cfg, "--budget", 2.0)
    assert code == 0
    plan = AllocationPlan.from_json(out)
    assert plan.bpe <= 2 and plan.constraint_mode == "highest_and_second"
    (work / "plan.json").write_text(out)

    code, _, _ = call(capsys, "quantize", "--config", cfg, "--model", work / "fp.gemq", "--plan",
                      work / "plan.json", "--out", work / "q.gemq")
    assert code == 0 and load_checkpoint(work / "q.gemq").expert_bits == plan.bits

    code, out, _ = call(capsys, "tune-routers", "--config", cfg, "--model", work / "q.gemq",
                        "--out", work / "qt.gemq", "--trace", work / "trace.csv")
    assert code == 0 and json.loads(out)["steps"] == 8
    assert (work / "trace.csv").read_text().startswith("step,loss")

    code, _, _ = call(capsys, "eval", "--config", cfg, "--model", work / "qt.gemq",
                      "--reference", work / "fp.gemq", "--out", work / "eval.json")
    report = json.loads((work / "eval.json").read_text())
    assert code == 0 and report["perplexity"]["heldout"] >= 1
    assert 0 <= report["router_change_ratio"] <= 1
    assert sum(sum(h.values()) for h in report["bit_histogram"]) == 16

    code, out, _ = call(capsys, "pack", "--config", cfg, "--model", work / "fp.gemq", "--plan",
                        work / "plan.json", "--routers-from", work / "qt.gemq", "--out", work / "q.gemqp")
    assert code == 0 and json.loads(out)["file_bytes"] == (work / "q.gemqp").stat().st_size
    code, out, _ = call(capsys, "eval", "--config", cfg, "--model", work / "q.gemqp")
    assert code == 0
    assert json.loads(out)["perplexity"]["heldout"] == pytest.approx(report["perplexity"]["heldout"], rel=1e-12)


def test_pipeline_and_report(work, capsys):
    run_dir = work / "run"
    code, out, _ = call(capsys, "pipeline", "--config", work / "tiny.json", "--model", work / "fp.gemq",
                        "--run-dir", run_dir)
    assert code == 0
    assert json.loads(out)["stages"] == ["stage_2.5", "stage_2", "stage_1.5"]
    assert (run_dir / "manifest.json").exists() and (run_dir / "fp.gemq").exists()

    code, _, _ = call(capsys, "report", run_dir)
    assert code == 0
    with open(run_dir / "ppl_vs_bpe.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["budget_bpe"]) for r in rows] == [2.5, 2.0, 1.5]
    with open(run_dir / "bit_histogram.csv") as fh:
        hist = list(csv.DictReader(fh))
    assert sum(int(r["count"]) for r in hist) == 3 * 16
    with open(run_dir / "change_ratio.csv") as fh:
        est = [r["estimation_model"] for r in csv.DictReader(fh)]
    assert est == ["fp", "q2.5+rft", "q2+rft"]


def test_budget_flags_and_single_stage(work, capsys):
    run_dir = work / "single"
    code, out, _ = call(capsys, "pipeline", "--config", work / "tiny.json", "--model", work / "fp.gemq",
                        "--run-dir", run_dir, "--budgets", "2.5,2.0", "--single-stage")
    assert code == 0 and json.loads(out)["stages"] == ["stage_2.5", "stage_2"]
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert {s["metrics"]["estimation_model"] for s in manifest["stages"]} == {"fp"}


@pytest.mark.parametrize("argv,code,kind", [
    (["bogus"], 2, "usage"),
    (["allocate"], 2, "usage"),
    (["eval", "--model", "/nonexistent/x.gemq"], 2, "missing_file"),
    (["allocate", "IMP", "--budget", "0.2"], 1, None),
    (["allocate", "IMP", "--constraint-mode", "nope"], 2, "usage"),
])
def test_errors_are_json_with_exit_codes(work, capsys, argv, code, kind):
    argv = [str(work / "imp.csv") if a == "IMP" else a for a in argv]
    if not (work / "imp.csv").exists():
        pytest.skip("needs the importance table from the command chain test")
    got, _, err = call(capsys, *argv)
    assert got == code
    payload = json.loads(err.strip().splitlines()[-1])
    assert set(payload) == {"error", "message"}
    if kind:
        assert payload["error"] == kind


def test_unknown_config_key_is_a_usage_error(work, capsys):
    (work / "bad.json").write_text(json.dumps({"model": {"n_expert": 3}}))
    code, _, err = call(capsys, "train", "--config", work / "bad.json", "--out", work / "x.gemq")
    assert code == 2 and json.loads(err)["error"] == "usage"


def test_infeasible_budget_reports_the_constraint(work, capsys):
    code, _, err = call(capsys, "allocate", work / "imp.csv", "--budget", "1.0")
    assert code == 1 and json.loads(err)["error"] == "InfeasibleError"


@pytest.mark.skipif(shutil.which("gemq") is None, reason="console script not installed")
def test_console_script_runs():
    res = subprocess.run(["gemq", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "pipeline" in res.stdout
    res = subprocess.run([sys.executable, "-m", "gemq.cli", "report", "/nonexistent"], capture_output=True, text=True)
    assert res.returncode == 2
