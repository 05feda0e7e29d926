import json
from pathlib import Path

import pandas as pd
import pytest

from covidsem.cli import COMMANDS, main
from covidsem.models import POLICY_TERMS, outcome_spec

FAST = ["--draws", "4"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth_cli(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli_synth")
    assert run("sird-synth", "--seed", 0, "--out", d) == 0
    return d


def _snapshot(directory: Path) -> dict[str, bytes]:
    out = {}
    for p in sorted(directory.iterdir()):
        data = p.read_bytes()
        if p.name == "manifest.json":
            lines = data.decode().splitlines()
            assert lines[-2].startswith('  "created_utc"')
            data = "\n".join(lines[:-2]).encode()
        out[p.name] = data
    return out


def test_sird_synth_outputs(synth_cli):
    names = {p.name for p in synth_cli.iterdir()}
    assert {"cases_deaths.csv", "tests.csv", "policies.csv", "mobility.csv", "covariates.csv",
            "truth.json", "manifest.json"} <= names
    m = json.loads((synth_cli / "manifest.json").read_text())
    assert m["command"] == "sird-synth" and m["seed"] == 0
    assert set(m["outputs"]) >= {"truth.json", "cases_deaths.csv"}


def test_ingest_then_estimate_recovers_truth(synth_cli, tmp_path):
    assert run("ingest", "--data-dir", synth_cli, "--out", tmp_path / "ing") == 0
    panel = tmp_path / "ing" / "panel.csv"
    assert panel.is_file()
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"specs": ["outcome_cases"], "window": ["2020-03-07", "2020-06-04"]}))
    assert run("estimate", "--config", cfg, "--panel", panel, "--out", tmp_path / "est") == 0
    fit = json.loads((tmp_path / "est" / "fit_outcome_cases.json").read_text())
    truth = json.loads((synth_cli / "truth.json").read_text())["theta_weekly"]
    coef = dict(zip(fit["names"], fit["coefficients"]))
    for p in POLICY_TERMS:
        assert abs(coef[p] / truth[p] - 1) < 0.10, p
    m = json.loads((tmp_path / "est" / "manifest.json").read_text())
    assert str(panel) in m["inputs"]


def test_identity_counterfactual_zero_contrasts(synth_cli, tmp_path):
    out = tmp_path / "cf"
    assert run("counterfactual", "--data-dir", synth_cli, "--scenario", "identity", "--out", out, *FAST) == 0
    fr = pd.read_csv(out / "counterfactual_identity_cases.csv")
    for c, want in (("growth_change", 0.0), ("weekly_ratio", 1.0), ("cumulative_relative", 0.0)):
        sub = fr[fr["contrast"] == c]
        assert len(sub) > 0
        assert (sub[["mean", "lo", "hi"]] == want).all().all()


@pytest.mark.parametrize("command, extra", [
    ("ingest", []),
    ("estimate", ["--spec", "reduced_cases", "--spec", "behavior_retail_cases"]),
    ("decompose", FAST),
    ("counterfactual", FAST + ["--scenario", "mask_march14"]),
    ("sird-synth", []),
    ("dml", ["--folds", "3", "--target", "stay_at_home"]),
    ("sensitivity", ["--variant", "1", "--variant", "8", "--variant", "9"]),
])
def test_rerun_byte_identical(synth_cli, tmp_path, command, extra):
    out = tmp_path / "o"
    args = [command, "--seed", 7, "--out", out, *extra]
    if command != "sird-synth":
        args += ["--data-dir", synth_cli]
    assert run(*args) == 0
    first = _snapshot(out)
    assert run(*args) == 0
    assert _snapshot(out) == first
    assert len(first) >= 2


def test_all_commands_covered():
    assert set(COMMANDS) == {"ingest", "estimate", "decompose", "counterfactual", "sird-synth", "dml", "sensitivity"}


def test_config_error_names_field_path(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"bootstrap": {"B": -1}, "dml": {"folds": "x"}}))
    assert run("decompose", "--config", cfg) == 1
    err = capsys.readouterr().err
    assert "config error at bootstrap.B" in err and "config error at dml.folds" in err
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert run("estimate", "--config", cfg) == 1
    assert "nonsense" in capsys.readouterr().err


def test_usage_errors_exit_1(tmp_path):
    assert run("frobnicate") == 1
    assert run() == 1
    assert run("estimate", "--seed", -1, "--out", tmp_path) == 1
    assert run("estimate", "--out", tmp_path) == 1


def test_data_error_exit_2(tmp_path, capsys):
    (tmp_path / "cases_deaths.csv").write_text("state,date,cumulative_cases,cumulative_deaths\nXX,2020-03-07,1,0\n")
    for name in ("policies", "mobility", "covariates"):
        (tmp_path / f"{name}.csv").write_text("x\n")
    assert run("ingest", "--data-dir", tmp_path, "--out", tmp_path / "o") == 2
    assert "unknown state code" in capsys.readouterr().err
    assert run("estimate", "--panel", tmp_path / "missing.csv", "--out", tmp_path / "o") == 2


def test_numerical_error_exit_3(synth_cli, tmp_path, capsys):
    spec = outcome_spec("cases")
    d = spec.to_dict()
    d["name"] = "collinear"
    d["terms"].append(dict(d["terms"][0], name="mask_copy"))
    path = tmp_path / "collinear.json"
    path.write_text(json.dumps(d))
    assert run("estimate", "--data-dir", synth_cli, "--spec", path, "--out", tmp_path / "o") == 3
    assert "mask_copy" in capsys.readouterr().err


def test_random_forest_learner_reports_not_implemented(synth_cli, tmp_path, capsys):
    cfg = tmp_path / "rf.json"
    cfg.write_text(json.dumps({"dml": {"learner": "random_forest"}}))
    assert run("dml", "--config", cfg, "--data-dir", synth_cli, "--out", tmp_path / "o") == 1
    assert "not implemented" in capsys.readouterr().err
