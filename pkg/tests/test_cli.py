import json

import pytest

from adacascade.cli import main
from adacascade.traces import reference_config


@pytest.fixture
def workspace(tmp_path):
    assert main(["synth", "--reference", "--n", "600", "-o", str(tmp_path / "t.jsonl"),
                 "--topology-out", str(tmp_path / "topo.json")]) == 0
    return tmp_path


def _out(capsys):
    return json.loads(capsys.readouterr().out)


def test_validate(workspace, capsys):
    assert main(["validate", str(workspace / "t.jsonl"), str(workspace / "topo.json"), "--loss-topk", "5"]) == 0
    doc = _out(capsys)
    assert doc["n"] == 600 and doc["loss_k"] == 5


def test_synth_from_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(reference_config(n=50, seed=4).to_dict()), encoding="utf-8")
    assert main(["synth", str(cfg), "-o", str(tmp_path / "a.jsonl")]) == 0
    assert main(["synth", str(cfg), "--seed", "4", "-o", str(tmp_path / "b.jsonl")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert len((tmp_path / "a.jsonl").read_text(encoding="utf-8").splitlines()) == 50


def test_train_then_eval(workspace, capsys):
    args = [str(workspace / "t.jsonl"), str(workspace / "topo.json"), "--loss-topk", "5"]
    assert main(["train", *args, "--lambda", "25", "-o", str(workspace / "p.json"), "--overhead-linear", "0.03"]) == 0
    trained = _out(capsys)
    assert trained["train"]["n"] == 300 and trained["test"]["n"] == 300
    assert main(["eval", *args, "--policy", str(workspace / "p.json")]) == 0
    ev = _out(capsys)
    assert ev["n"] == 600 and ev["mean_time"] <= ev["terminal_only"]["mean_time"]


def test_sweep_and_report(workspace, capsys):
    cfg = workspace / "sweep.json"
    cfg.write_text(json.dumps({"traces": "t.jsonl", "topology": "topo.json", "loss_topk": 5,
                               "lambda_values": [0, 10, 40], "tolerance": 0.05}), encoding="utf-8")
    assert main(["sweep", "--config", str(cfg), "-o", str(workspace / "s.json")]) == 0
    assert _out(capsys)["operating_point"]["excess_error"] <= 0.05
    assert main(["report", "--sweep", str(workspace / "s.json"), "-o", str(workspace / "rep")]) == 0
    assert (workspace / "rep" / "curve.csv").exists() and (workspace / "rep" / "summary.json").exists()


def test_exit_codes(workspace, capsys):
    bad = workspace / "bad.jsonl"
    bad.write_text('{"id": "a"}\n', encoding="utf-8")
    assert main(["validate", str(bad), str(workspace / "topo.json")]) == 2
    assert "line 1" in capsys.readouterr().err
    assert main(["validate", str(workspace / "missing.jsonl"), str(workspace / "topo.json")]) == 1
    assert main(["synth", "-o", str(workspace / "x.jsonl")]) == 2
    assert main(["train", str(workspace / "t.jsonl"), str(workspace / "topo.json"), "--lambda", "1",
                 "--split", "1.0", "-o", str(workspace / "p.json")]) == 2
    with pytest.raises(SystemExit) as err:
        main(["nonsense"])
    assert err.value.code == 2


def test_module_entry_point(workspace):
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "adacascade", "validate", str(workspace / "t.jsonl"),
                           str(workspace / "topo.json")], capture_output=True, text=True, encoding="utf-8")
    assert proc.returncode == 0 and json.loads(proc.stdout)["n"] == 600
