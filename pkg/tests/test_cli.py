from __future__ import annotations

import json

import pytest

from mgprotect.cli import main
from mgprotect.config import default_config_text


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "short.ini"
    cfg.write_text(default_config_text().replace("sim_length = 1.0", "sim_length = 0.3"))
    assert main(["dataset", "--grid", "quick", "--config", str(cfg), "--out",
                 str(root / "data")]) == 0
    assert main(["train", "--features", "all", "--in", str(root / "data"), "--out",
                 str(root / "models")]) == 0
    return root, cfg


def test_dataset_outputs(workspace):
    root, _ = workspace
    data = root / "data"
    for fs in ("I", "IV", "IPQ", "IVPQ"):
        lines = (data / f"dataset_{fs}.csv").read_text().splitlines()
        assert len(lines) == 1 + 7 * 300
    assert len(json.loads((data / "scenarios.json").read_text())) == 7
    assert (root / "models" / "IVPQ_detect.tree").is_file()
    assert "IVPQ_type" in json.loads((root / "models" / "timing.json").read_text())


def test_evaluate_and_report(workspace, capsys):
    root, _ = workspace
    out = root / "report.json"
    args = ["evaluate", "--features", "all", "--in", str(root / "data"), "--models",
            str(root / "models"), "--out", str(out), "--table", str(root / "table.txt"),
            "--debounce"]
    assert main(args) == 0
    first = out.read_bytes()
    assert main(args) == 0
    assert out.read_bytes() == first
    doc = json.loads(first)
    assert set(doc["feature_sets"]) == {"I", "IV", "IPQ", "IVPQ"}
    assert len(doc["provenance"]["models"]) == 8
    capsys.readouterr()
    assert main(["report", "--in", str(out)]) == 0
    assert "I,V,P,Q" in capsys.readouterr().out
    assert main(["report", "--in", str(out), "--json"]) == 0
    assert capsys.readouterr().out.encode() == first


def test_simulate_and_replay(workspace, capsys):
    root, cfg = workspace
    raw = root / "raw.csv"
    assert main(["simulate", "--type", "AG", "--bus", "1", "--rf", "1", "--config", str(cfg),
                 "--out", str(raw)]) == 0
    lines = raw.read_text().splitlines()
    assert lines[0].startswith("t_ms,Ia") and lines[0].endswith(",fault_active")
    assert len(lines) == 301
    trace = root / "trace.csv"
    assert main(["replay", "--type", "7", "--bus", "1", "--rf", "1", "--duration", "0.1",
                 "--config", str(cfg), "--models", str(root / "models"), "--out",
                 str(trace)]) == 0
    assert "inception delay" in capsys.readouterr().out
    assert trace.read_text().startswith("t_ms,true_detect,pred_detect,true_type,pred_type\n")


def test_exit_codes(workspace, tmp_path, capsys):
    root, cfg = workspace
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 2
    # missing dataset: data error
    assert main(["train", "--in", str(tmp_path), "--out", str(tmp_path / "m")]) == 6
    # model trained on another dataset: model error
    other = tmp_path / "other"
    other.mkdir()
    for f in (root / "data").iterdir():
        (other / f.name).write_bytes(f.read_bytes())
    evaluate = ["evaluate", "--in", str(other), "--models", str(root / "models")]
    manifest = json.loads((other / "manifest.json").read_text())
    manifest["master_seed"] += 1
    # edited without updating the stored hash: provenance error
    (other / "manifest.json").write_text(json.dumps(manifest))
    assert main(evaluate) == 6
    del manifest["manifest_hash"]
    (other / "manifest.json").write_text(json.dumps(manifest))
    assert main(evaluate) == 5
    empty = tmp_path / "empty"
    empty.mkdir()
    (empty / "manifest.json").write_bytes((root / "data" / "manifest.json").read_bytes())
    header = (root / "data" / "dataset_IVPQ.csv").read_text().splitlines()[0]
    (empty / "dataset_IVPQ.csv").write_text(header + "\n")
    capsys.readouterr()
    assert main(["evaluate", "--in", str(empty), "--models", str(root / "models")]) == 6
    assert "no rows" in capsys.readouterr().err
    bad = tmp_path / "bad.ini"
    bad.write_text("[network]\nbuses = x\n")
    assert main(["simulate", "--type", "1", "--config", str(bad), "--out",
                 str(tmp_path / "x.csv")]) == 3
    assert "error:" in capsys.readouterr().err
