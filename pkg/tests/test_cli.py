import csv
import json

import pytest

from visco.cli import main


def run_cli(args, capsys):
    code = main(["-q"] + args)
    out = capsys.readouterr().out
    return code, json.loads(out)


@pytest.fixture(scope="module")
def relax_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("relax")


def test_run_relax(relax_dir, capsys, tmp_path):
    cfg = tmp_path / "relax.toml"
    cfg.write_text('[grid]\nnx = 8\nny = 8\n[time]\nT = 0.3\ntau = 0.1\n')
    code, doc = run_cli(["run", str(cfg), "--out", str(relax_dir)], capsys)
    assert code == 0 and doc["status"] == "ok" and doc["steps"] == 3
    with open(relax_dir / "ledger.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    for r in rows:
        for key in ("stored", "dissip_increment", "work_increment", "cn_excess"):
            assert abs(float(r[key])) <= 1e-10
    for name in ("energy.csv", "contact_report.json", "config.toml", "frame_0003.json"):
        assert (relax_dir / name).exists()


def test_inspect(relax_dir, capsys):
    code, doc = run_cli(["inspect", str(relax_dir / "frame_0003.json"), "--diag", "cn"], capsys)
    assert code == 0 and set(doc) >= {"det_integral", "image_measure", "excess"}
    assert doc["excess"] == 0.0
    code, doc = run_cli(["inspect", str(relax_dir / "frame_0003.json"), "--diag", "korn",
                         "--prev", str(relax_dir / "frame_0002.json")], capsys)
    assert code == 0 and doc["korn_quotient"] == 0.0
    code, doc = run_cli(["inspect", str(relax_dir / "frame_0003.json"), "--diag", "energy"], capsys)
    assert code == 0 and len(doc["energy"]) == 4
    code, doc = run_cli(["inspect", str(relax_dir / "frame_0003.json"), "--diag", "contact"], capsys)
    assert code == 0 and doc["contact_points"] == [] and doc["reaction"]["ok"]
    code, doc = run_cli(["inspect", str(relax_dir / "frame_0003.json"), "--diag", "korn"], capsys)
    assert code == 2 and doc["error"] == "UsageError"


def test_errors_are_json(capsys, tmp_path):
    code, doc = run_cli(["run", "--scenario", "nope"], capsys)
    assert code == 2 and "valid names" in doc["message"]
    bad = tmp_path / "bad.toml"
    bad.write_text("[time]\nT = 1.0\ntau = 0.3\n")
    code, doc = run_cli(["run", str(bad)], capsys)
    assert code == 2 and doc["error"] == "ConfigError" and doc["violations"]
    code, doc = run_cli(["run", str(tmp_path / "missing.toml")], capsys)
    assert code == 2 and doc["status"] == "error"
    code, doc = run_cli(["frobnicate"], capsys)
    assert code == 2


def test_run_failure_exit_code(capsys, tmp_path):
    # an absurd load makes the first step fail; the report names the cause
    cfg = tmp_path / "hard.toml"
    cfg.write_text('[grid]\nnx = 6\nny = 6\n[time]\nT = 0.1\ntau = 0.1\n'
                   '[load]\nkind = "uniform"\ngamma = 1e9\n[solver]\nmax_iter = 3\n')
    code, doc = run_cli(["run", str(cfg), "--out", str(tmp_path / "o")], capsys)
    assert code == 1 and doc["status"] == "error" and doc["steps_completed"] == 0
    assert (tmp_path / "o" / "error.json").exists()
