import json
import os
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]

TINY = ["--d", "16", "--n-layers", "2", "--n-heads", "2", "--d-mid", "32", "--max-seq-len", "16"]


def run(*args, cwd=None):
    env = dict(os.environ, PYTHONPATH=str(ROOT / "src"), COLUMNS="200", PYTHONIOENCODING="utf-8")
    env.pop("DISP_OUT", None)
    result = subprocess.run(
        [sys.executable, "-m", "disp", *args], capture_output=True, text=True, encoding="utf-8", env=env, cwd=cwd or ROOT
    )
    return result, (result.stdout + result.stderr).lower()


def test_verify_prop1():
    result, output = run("verify", "--suite", "prop1")
    assert result.returncode == 0, output
    assert "prop1" in output
    assert "pass" in output


def test_missing_corpus_is_a_usage_error(tmp_path):
    result, output = run("search", "--target-ratio", "0.5", "--lambda", "6", "--out", str(tmp_path))
    assert result.returncode == 2
    assert "corpus" in output


def test_unknown_flag():
    result, _ = run("search", "--warmup", "10")
    assert result.returncode == 2


def test_unknown_command():
    result, _ = run("distill")
    assert result.returncode == 2


def test_bad_config_value(tmp_path):
    cfg = tmp_path / "run.env"
    cfg.write_text("target-ratio=abc\n")
    result, _ = run("verify", "--suite", "prop1", "--config", str(cfg))
    assert result.returncode == 2


def test_full_pipeline(tmp_path, corpus_file):
    out = str(tmp_path / "run")
    common = ["--out", out, "--corpus", str(corpus_file), "--seq-len", "16", "--log-level", "WARNING"]

    result, output = run("pretrain", *common, *TINY, "--pretrain-steps", "5", "--pretrain-batch-size", "2")
    assert result.returncode == 0, output
    assert (tmp_path / "run" / "dense.ckpt").is_file()

    result, output = run("search", *common, "--iterations", "4", "--target-ratio", "0.5", "--lambda", "6")
    assert result.returncode == 0, output
    runlog = (tmp_path / "run" / "runlog.csv").read_text().splitlines()
    assert runlog[0].startswith("iteration,lm,R_raw,R_norm,ratio")
    assert len(runlog) == 5

    result, output = run("prune", "--out", out, "--enforce-budget")
    assert result.returncode == 0, output
    assert (tmp_path / "run" / "pruned.ckpt").is_file()
    assert (tmp_path / "run" / "widths.csv").is_file()

    pruned = str(tmp_path / "run" / "pruned.ckpt")
    result, output = run("eval", *common, "--pruned", pruned)
    assert result.returncode == 0, output
    results = json.loads((tmp_path / "run" / "eval.json").read_text())
    assert [r["model"] for r in results] == ["dense", "pruned"]

    result, output = run("verify-equivalence", "--out", out, "--pruned", pruned)
    assert result.returncode == 0, output

    result, output = run("report", "--out", out, "--pruned", pruned)
    assert result.returncode == 0, output
    assert "s1" in output

    lines = (tmp_path / "run" / "manifest.jsonl").read_text().splitlines()
    manifests = [json.loads(line) for line in lines]
    assert [m["command"] for m in manifests] == ["pretrain", "search", "prune", "eval", "report"]
    assert manifests[1]["config"]["lambda"] == 6.0
    assert manifests[1]["config"]["target_ratio"] == 0.5
    assert str(corpus_file) in manifests[1]["inputs"]


def test_search_without_dense_checkpoint(tmp_path, corpus_file):
    result, output = run("search", "--out", str(tmp_path), "--corpus", str(corpus_file))
    assert result.returncode == 2
    assert "dense checkpoint" in output


def test_search_a_long_context_model(tmp_path, corpus_file):
    common = ["--out", str(tmp_path), "--corpus", str(corpus_file), "--seq-len", "80", "--log-level", "WARNING"]
    arch = TINY[:-1] + ["80"]
    result, output = run("pretrain", *common, *arch, "--pretrain-steps", "2", "--pretrain-batch-size", "2")
    assert result.returncode == 0, output
    result, output = run("search", *common, "--iterations", "2")
    assert result.returncode == 0, output


def test_search_resumes_where_it_stopped(tmp_path, corpus_file):
    common = ["--out", str(tmp_path), "--corpus", str(corpus_file), "--seq-len", "16", "--log-level", "WARNING"]
    result, output = run("pretrain", *common, *TINY, "--pretrain-steps", "2", "--pretrain-batch-size", "2")
    assert result.returncode == 0, output
    result, output = run("search", *common, "--resume", "--iterations", "2")
    assert result.returncode == 2
    assert "search checkpoint" in output

    result, output = run("search", *common, "--iterations", "2", "--mode", "elementwise")
    assert result.returncode == 0, output
    result, output = run("search", *common, "--iterations", "3", "--resume")
    assert result.returncode == 0, output
    assert "resuming" in output

    runlog = (tmp_path / "runlog.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in runlog[1:]] == ["1", "2", "3", "4", "5"]
    result, output = run("search", *common, "--iterations", "1", "--resume", "--seed", "3")
    assert result.returncode == 2
