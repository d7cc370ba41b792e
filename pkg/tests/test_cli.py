import json
import subprocess
import sys

import pytest

from sdglab.cli import DEFAULTS, ConfigError, load_config, main, parse_overrides, random_jets

QUICK_LAMBDA = ["--lambda.dims", "[2]", "--lambda.samples", "5"]


def _report(out, sub):
    data = json.loads((out / f"{sub}.json").read_text())
    meta = data.pop("meta")
    assert meta["subcommand"] == sub and meta["version"]
    return data


def test_lambda_check_passes(tmp_path, capsys):
    assert main(["lambda-check", "--out", str(tmp_path), *QUICK_LAMBDA]) == 0
    assert "PASS  lambda_identity_m2" in capsys.readouterr().out
    rep = _report(tmp_path, "lambda-check")
    assert rep["dims"]["m2"]["samples"] == 5


def test_failing_verdict_gives_exit_one(tmp_path, capsys):
    code = main(["lambda-check", "--out", str(tmp_path), *QUICK_LAMBDA, "--lambda.n_dir.2=6"])
    assert code == 1
    assert "FAIL  lambda_identity_m2" in capsys.readouterr().out


def test_reports_are_deterministic_apart_from_meta(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["lambda-check", "--out", str(out), "--seed", "4", "--quiet", *QUICK_LAMBDA]) == 0
    assert _report(a, "lambda-check") == _report(b, "lambda-check")
    assert main(["lambda-check", "--out", str(b), "--seed", "5", "--quiet", *QUICK_LAMBDA]) == 0
    assert _report(a, "lambda-check") != _report(b, "lambda-check")


def test_quiet_prints_nothing(tmp_path, capsys):
    assert main(["lambda-check", "--out", str(tmp_path), "--quiet", *QUICK_LAMBDA]) == 0
    assert capsys.readouterr().out == ""


def test_config_file_and_flags(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("spec: ms2\nsimulation:\n  dt: 0.001\n  n_paths: 500\nsimulate:\n  n_dump: 2\n")
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(cfg), "--out", str(out), "--quiet", "--seed", "3"]) == 0
    rep = _report(out, "simulate")
    assert rep["spec_name"] == "ms2" and rep["dt"] == 0.001 and rep["seed"] == 3
    files = sorted(p.name for p in (out / "paths").iterdir())
    assert files == ["limit_0000.csv", "limit_0001.csv"]
    lines = (out / "paths" / "limit_0000.csv").read_text().splitlines()
    assert lines[0] == "t,x_1,x_2,exited" and lines[-1].endswith(",1")


def test_verify_value_from_cli(tmp_path):
    out = tmp_path / "v"
    assert main(["verify-value", "--out", str(out), "--paths", "300", "--dt", "1e-3", "--quiet"]) == 0
    rep = _report(out, "verify-value")
    assert rep["n_paths"] == 300 and rep["verdicts"]["value_identity"]


@pytest.mark.parametrize("argv", [
    ["validate", "--config", "missing.yaml"],
    ["validate", "--x0", "[5.0, 0.0]"],
    ["validate", "--spec", "nope"],
    ["validate", "--simulation.dt", "-1"],
    ["validate", "--simulation.bogus", "1"],
    ["validate", "--seed", "-3"],
    ["validate", "stray"],
    ["simulate", "--simulate.process", "game", "--simulation.dt", "1e-3"],
    ["nope"],
])
def test_configuration_errors_give_exit_two(tmp_path, argv):
    assert main([*argv, "--out", str(tmp_path), "--quiet"]) == 2


def test_unknown_top_level_key(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("color: blue\n")
    with pytest.raises(ConfigError):
        load_config(str(cfg), {})
    cfg.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(str(cfg), {})


def test_override_parsing():
    assert parse_overrides(["--a.b", "3", "--c=[1, 2]", "--d", "x"]) == {"a.b": 3, "c": [1, 2], "d": "x"}
    with pytest.raises(ConfigError):
        parse_overrides(["--a"])
    cfg = load_config(None, {"lambda.n_dir.3": 100})
    assert cfg["lambda"]["n_dir"][3] == 100 and DEFAULTS["lambda"]["n_dir"][3] == 5000


def test_random_jets_are_symmetric_and_reproducible():
    a = list(random_jets(3, 4, 0))
    b = list(random_jets(3, 4, 0))
    for (p, S), (p2, S2) in zip(a, b):
        assert (p == p2).all() and (S == S2).all() and (S == S.T).all()


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "sdglab", "lambda-check", "--out", str(tmp_path), *QUICK_LAMBDA],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "lambda-check.json").exists()
    res = subprocess.run([sys.executable, "-m", "sdglab", "validate", "--x0", "[9, 9]", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 2 and "outside" in res.stderr
