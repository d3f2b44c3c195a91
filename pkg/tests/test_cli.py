import json
import subprocess
import sys

import pytest

from bubbleattack.cli import main

SMALL = {"data": {"bubbles": 300, "swatches": 300}, "train": {"epochs": 2}, "svm": {"epochs": 100},
         "model": {"arch": "svm"},
         "attack": {"samples_per_class": 10, "steps": 10, "epsilons": [4 / 255, 64 / 255, 1.0]},
         "diagnose": {"samples_per_class": 10},
         "impact": {"ballots": 20000}}
PIPELINE = ("gen-data", "train", "attack", "diagnose", "impact", "report")


def _config(tmp_path, doc=SMALL, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def _run_all(cfg, out):
    for cmd in PIPELINE:
        assert main([cmd, "--config", cfg, "--out", str(out)]) == 0, cmd


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = _config(base)
    _run_all(cfg, base / "a")
    _run_all(cfg, base / "b")
    return base / "a", base / "b"


def _artifacts(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file() and p.name != "run.log")


def test_reruns_are_byte_identical(runs):
    a, b = runs
    files = _artifacts(a)
    assert files == _artifacts(b) and len(files) > 15
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_every_text_artifact_is_stamped(runs):
    a = runs[0]
    stamp = None
    for p in a.rglob("*"):
        if p.suffix == ".json" and p.parent.name != "data":
            doc = json.loads(p.read_text())
            prov = doc.get("provenance", doc)
            assert "config_hash" in prov, p
            stamp = stamp or prov["config_hash"]
        elif p.suffix in (".csv", ".md") and p.name != "report.md":
            assert "config_hash=" in p.read_text().splitlines()[0], p
    assert len(stamp) == 64


def test_run_log_records_each_command(runs):
    lines = [json.loads(s) for s in (runs[0] / "run.log").read_text().splitlines()]
    assert [r["command"] for r in lines] == list(PIPELINE)
    assert all(r["status"] == "ok" for r in lines)


def test_attack_table_headers(runs):
    md = (runs[0] / "attack" / "svm.md").read_text()
    assert "| 4/255 | 64/255 | 255/255 |" in md


def test_svm_has_no_zero_first_steps(runs):
    rep = json.loads((runs[0] / "diagnose" / "svm.json").read_text())
    text = json.dumps(rep)
    assert '"first_step_zero": 0' in text and '"first_step_zero": 1' not in text


def test_impact_output(runs, capsys):
    doc = json.loads((runs[0] / "impact" / "impact.json").read_text())
    flat = json.dumps(doc)
    assert "0.407" in flat
    assert "Nevada" in (runs[0] / "impact" / "impact.md").read_text()


def test_dry_run_echoes_full_scale(tmp_path, capsys):
    cfg = _config(tmp_path, {"data": {"scale": "full"}})
    assert main(["gen-data", "--dry-run", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "42679" in out.replace(",", "") and "423703" in out.replace(",", "")
    assert not (tmp_path / "o" / "data").exists()


def test_usage_errors_exit_1(tmp_path):
    assert main(["bogus"]) == 1
    assert main(["train", "--precision", "f16"]) == 1


def test_config_errors_exit_2(tmp_path):
    assert main(["train", "--config", _config(tmp_path, {"trian": {}})]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["train", "--seed", "-1", "--out", str(tmp_path)]) == 2


def test_data_errors_exit_3(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "o"
    assert main(["attack", "--config", cfg, "--out", str(out)]) == 3
    junk = tmp_path / "junk.bbld"
    junk.write_bytes(b"garbage")
    assert main(["attack", "--config", cfg, "--out", str(out), "--dataset", str(junk)]) == 3


def test_divergence_exits_4(tmp_path):
    doc = {"data": {"bubbles": 100, "swatches": 100}, "model": {"arch": "simplecnn"},
           "train": {"epochs": 1, "learning_rate": 1e300, "precision": "f64"}}
    cfg = _config(tmp_path, doc)
    out = str(tmp_path / "o")
    assert main(["gen-data", "--config", cfg, "--out", out]) == 0
    with pytest.warns(RuntimeWarning):
        assert main(["train", "--config", cfg, "--out", out]) == 4


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "bubbleattack.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("gen-data", "train", "attack", "diagnose", "channel", "impact", "report", "export"):
        assert cmd in r.stdout
