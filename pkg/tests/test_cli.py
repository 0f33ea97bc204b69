import csv
import json
import shutil
import subprocess
import sys

import pytest

from twophase import cli, verify
from twophase.cli import main

SMALL = """
experiment.name = small
model.m = 16
model.d = 4
data.mode = fixed
data.n = 200
schedule.0.optimizer = label_noise_sgd
schedule.0.eta = 0.02
schedule.0.sigma = 1
schedule.0.steps = {steps}
schedule.0.record_every = 10
schedule.1.optimizer = gd
schedule.1.eta = 0.02
schedule.1.steps = 20
schedule.1.record_every = 10
outputs.neuron_dump = true
"""


def _write(tmp_path, text, name="c.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_run_writes_outputs(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL.format(steps=100))
    out = tmp_path / "out"
    assert main(["run", cfg, "--out", str(out)]) == cli.EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["steps"] == 120
    trace = _rows(out / "trace.csv")
    assert [int(r["step"]) for r in trace] == list(range(0, 121, 10))
    summary = json.loads((out / "summary.json").read_text())
    assert summary["experiment"] == "small" and summary["telescope_max_residual"] < 1e-9
    assert (out / "neurons.csv").exists()


def test_run_zero_steps(tmp_path, capsys):
    text = SMALL.format(steps=0).replace("schedule.1.steps = 20", "schedule.1.steps = 0")
    out = tmp_path / "z"
    assert main(["run", _write(tmp_path, text), "--out", str(out)]) == 0
    assert len(_rows(out / "trace.csv")) == 1
    assert json.loads((out / "summary.json").read_text())["steps"] == 0
    capsys.readouterr()


def test_run_is_byte_identical(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL.format(steps=200))
    for d in ("a", "b"):
        assert main(["run", cfg, "--out", str(tmp_path / d)]) == 0
    for f in ("trace.csv", "neurons.csv", "summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    capsys.readouterr()


def test_config_error_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL.format(steps=10) + "model.colour = red\n")
    assert main(["run", cfg, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "unknown key 'model.colour'" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.cfg")]) == cli.EXIT_CONFIG


def test_divergence_exit_code(tmp_path, capsys):
    text = SMALL.format(steps=2000).replace("eta = 0.02", "eta = 5")
    out = tmp_path / "div"
    assert main(["run", _write(tmp_path, text), "--out", str(out)]) == cli.EXIT_DIVERGED
    summary = json.loads((out / "summary.json").read_text())
    assert summary["diverged"] and summary["divergence_reason"]
    # the trace is flushed up to the failure
    assert len(_rows(out / "trace.csv")) >= 1
    assert "diverged" in capsys.readouterr().err


def test_verify_exit_codes(tmp_path, monkeypatch, capsys):
    ok = [verify.VerifyReport("a", 1.0, 1.0, 0.0, 1, True)]
    bad = ok + [verify.VerifyReport("b", 2.0, 1.0, 0.0, 1, False)]
    skipped = ok + [verify.VerifyReport("c", 2.0, 1.0, 0.0, 1, False, status="precondition-skipped")]
    for reports, code in ((ok, 0), (bad, 1), (skipped, 0)):
        monkeypatch.setattr(verify, "run_suite", lambda *a, r=reports, **k: r)
        assert main(["verify", "--json", str(tmp_path / "r.json")]) == code
    capsys.readouterr()


def test_verify_json_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    # the exit status reflects the Monte-Carlo outcome; only reproducibility is asserted
    first = main(["verify", "quick", "--seed", "3", "--json", str(a)])
    second = main(["verify", "quick", "--seed", "3", "--json", str(b)])
    assert first == second and first in (0, 1)
    assert a.read_bytes() == b.read_bytes()
    names = [r["check_name"] for r in json.loads(a.read_text())]
    assert "escape" in names and len(names) == 13
    assert "check" in capsys.readouterr().out


def test_sweep_writes_table(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL.format(steps=50))
    out = tmp_path / "sw"
    code = main(["sweep", cfg, "--grid", "schedule.0.sigma=0,1", "--grid", "model.m=8,16",
                 "--out", str(out)])
    assert code == 0
    rows = _rows(out / "sweep.csv")
    assert len(rows) == 4
    assert [(r["schedule.0.sigma"], r["model.m"]) for r in rows] == [
        ("0", "8"), ("0", "16"), ("1", "8"), ("1", "16")]
    assert all(r["status"] == "ok" for r in rows)
    assert (out / "point_003" / "trace.csv").exists()
    capsys.readouterr()


def test_sweep_bad_point_is_recorded(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL.format(steps=20))
    out = tmp_path / "sw"
    assert main(["sweep", cfg, "--grid", "model.m=8,zero", "--out", str(out)]) == 0
    rows = _rows(out / "sweep.csv")
    assert [r["status"] for r in rows] == ["ok", "error"]
    assert "model.m" in rows[1]["error"]
    assert "1 failed" in capsys.readouterr().out


def test_sweep_empty_grid_is_usage_error(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL.format(steps=20))
    assert main(["sweep", cfg]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "empty grid" in err and "usage:" in err
    assert main(["sweep", cfg, "--grid", "model.m="]) == cli.EXIT_CONFIG
    capsys.readouterr()


def test_sweep_escape_monotone_in_sigma(tmp_path, capsys):
    # stronger label noise reaches the escape condition sooner
    cfg = _write(tmp_path, """
        experiment.name = esc
        model.m = 64
        model.d = 8
        schedule.0.optimizer = label_noise_sgd
        schedule.0.eta = 0.01
        schedule.0.steps = 60000
        schedule.0.record_every = 100
        outputs.trace = none
    """.replace("        ", ""))
    out = tmp_path / "esc"
    assert main(["sweep", cfg, "--grid", "schedule.0.sigma=1,2,4", "--out", str(out)]) == 0
    steps = [int(r["escape_step"]) for r in _rows(out / "sweep.csv")]
    assert steps[0] > steps[1] > steps[2]
    capsys.readouterr()


@pytest.mark.parametrize("name", ["fig2.cfg", "fig4.cfg", "appendixE.cfg", "lemma2.cfg"])
def test_bundled_configs_resolve(name):
    path = cli.resolve_config(name)
    assert path.is_file() and path.name == name


def test_console_script(tmp_path):
    exe = shutil.which("twophase")
    cmd = [exe] if exe else [sys.executable, "-m", "twophase.cli"]
    res = subprocess.run(cmd + ["run", _write(tmp_path, SMALL.format(steps=10)),
                                "--out", str(tmp_path / "o")],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "warning: A2" in res.stderr
    res = subprocess.run(cmd + ["bogus"], capture_output=True, text=True)
    assert res.returncode == 2
