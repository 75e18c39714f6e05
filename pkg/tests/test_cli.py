import json
import os

import pandas as pd
import pytest

from conftest import experiment_document
from kdkit.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_FAILURE, EXIT_OK, build_parser, main


def _config_file(tmp_path, **overrides):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(experiment_document(out=str(tmp_path / "run"), **overrides)))
    return str(path)


def test_invalid_config_exits_with_every_problem(tmp_path, capsys):
    document = experiment_document(colour="blue")
    document["student"]["hidden_dim"] = 9
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(document))
    assert main(["distill", "--config", str(path)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "2 problem(s)" in err
    assert "colour" in err and "hidden_dim 9" in err


def test_missing_config_file_is_a_config_error(tmp_path):
    assert main(["train-teacher", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG


def test_size_from_flags(tmp_path, capsys):
    code = main(["size", "--budget-params", "6200000", "--depths", "2,12", "--out", str(tmp_path)])
    assert code == EXIT_OK
    table = pd.read_csv(tmp_path / "sizing.csv")
    assert table["dimension"].tolist() == [176, 128]
    assert "6368898" in capsys.readouterr().out


def test_report_on_missing_summary_fails(tmp_path, capsys):
    assert main(["report", str(tmp_path / "summary.csv")]) == EXIT_FAILURE
    assert "summary not found" in capsys.readouterr().err


def test_distill_honors_seed_and_out_overrides(tmp_path):
    out = tmp_path / "override"
    code = main(["distill", "--config", _config_file(tmp_path), "--seed", "3", "--out", str(out), "--quiet"])
    assert code == EXIT_OK
    summary = pd.read_csv(out / "summary.csv")
    assert summary["seed"].tolist() == [3]
    with open(out / "config_echo.json") as handle:
        assert json.load(handle)["seed"] == 3


def test_diverging_sweep_exits_three(tmp_path):
    document = experiment_document(out=str(tmp_path / "run"), optimizer={"lr": 1e300}, sweep={"axes": {"seed": [0]}})
    document["teacher"]["optimizer"] = {"lr": 1e-3}
    path = tmp_path / "diverge.json"
    path.write_text(json.dumps(document))
    assert main(["sweep", "--config", str(path), "--quiet"]) == EXIT_DIVERGED
    summary = pd.read_csv(tmp_path / "run" / "summary.csv")
    assert summary["status"].iloc[0].startswith("diverged")


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["size", "--depths", "two"])
