import json
import subprocess
import sys

import pytest

from lgdea.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.mark.parametrize("argv", [["train"], ["train", "--corpus", "x.jsonl"], ["eval"],
                                  ["gen"], ["frobnicate"], [], ["train", "--max-steps", "two"]])
def test_usage_errors_exit_one(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(*argv) == 1


def test_missing_files_exit_one(tmp_path, capsys):
    assert run("train", "--corpus", tmp_path / "nope.jsonl", "--out", tmp_path / "c.json") == 1
    assert "not found" in capsys.readouterr().err


def test_bad_corpus_exits_one(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{}\n")
    assert run("train", "--corpus", bad, "--out", tmp_path / "c.json") == 1


def test_gen_train_eval_pipeline(tmp_path, capsys):
    corpus, evalset = tmp_path / "train.jsonl", tmp_path / "eval.jsonl"
    ckpt, report = tmp_path / "model.json", tmp_path / "report.jsonl"
    assert run("gen", "--corpus-preset", "small", "--seed", 1, "--out", corpus) == 0
    assert run("gen", "--corpus-preset", "small", "--eval-set", "--per-concept", 3,
               "--out", evalset) == 0
    assert run("train", "--corpus", corpus, "--out", ckpt, "--max-steps", 6, "--seed", 1) == 0
    lines = (tmp_path / "model.json.metrics.jsonl").read_text().splitlines()
    assert len(lines) == 6 and json.loads(lines[-1])["step"] == 6

    # resume appends to the same stream
    assert run("train", "--corpus", corpus, "--out", ckpt, "--checkpoint", ckpt,
               "--max-steps", 8) == 0
    assert len((tmp_path / "model.json.metrics.jsonl").read_text().splitlines()) == 8

    capsys.readouterr()
    assert run("eval", "--checkpoint", ckpt, "--corpus", evalset, "--out", report) == 0
    out = capsys.readouterr()
    rec = json.loads(out.out.strip())
    assert rec == json.loads(report.read_text())
    assert set(rec["precision_at_k"]) == {"1", "2", "5", "10"}
    assert "zero-shot" in out.err


def test_train_with_config_file(tmp_path):
    corpus, cfg, ckpt = tmp_path / "c.jsonl", tmp_path / "cfg.json", tmp_path / "m.json"
    assert run("gen", "--corpus-preset", "small", "--pairing-ratio", 0.5, "--out", corpus) == 0
    cfg.write_text(json.dumps({"schema_version": 1, "mode": "global_baseline", "batch_size": 8}))
    assert run("train", "--corpus", corpus, "--config", cfg, "--out", ckpt,
               "--max-steps", 3) == 0
    assert json.loads(ckpt.read_text())["config"]["mode"] == "global_baseline"


def test_dump_relations(tmp_path):
    corpus, out = tmp_path / "c.jsonl", tmp_path / "rel.json"
    assert run("gen", "--corpus-preset", "small", "--out", corpus) == 0
    assert run("dump-relations", "--corpus", corpus, "--out", out) == 0
    doc = json.loads(out.read_text())
    n_img = len(doc["P"])
    assert {"Y", "S_I", "S_T", "P", "ids", "n_paired", "stats"} <= set(doc)
    assert len(doc["S_I"]) == n_img and len(doc["S_T"]) == len(doc["P"][0])
    assert doc["n_paired"] == 8


def test_gradcheck_exits_zero(capsys):
    assert run("gradcheck") == 0
    out = capsys.readouterr().out
    assert out.count("ok") == 6 and "FAIL" not in out


def test_gradcheck_reports_numeric_failure(monkeypatch):
    from lgdea import trainer
    monkeypatch.setattr(trainer, "gradient_suite", lambda **kw: {"total": 0.5})
    assert run("gradcheck") == 2


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lgdea.cli", "eval"], capture_output=True,
                          text=True, cwd=tmp_path)
    assert proc.returncode == 1 and "missing required flag" in proc.stderr
