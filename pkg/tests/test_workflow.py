import os

import pandas as pd
import pytest

from conftest import experiment_document
from kdkit.config import parse_config
from kdkit.experiments import STUDENT_FILE, STUDENT_INIT_FILE, SUMMARY_FILE, TEACHER_FILE
from kdkit.workflow import run_pipeline, run_stage, verify_artifacts


def test_verify_artifacts(tmp_path, capsys):
    good = tmp_path / "rows.csv"
    pd.DataFrame([{"cell": "a"}]).to_csv(good, index=False)
    blob = tmp_path / "model.kdckpt"
    blob.write_bytes(b"KDCKPT01")
    assert verify_artifacts("stage", [str(good), str(blob)])
    assert "2 artifact(s) verified" in capsys.readouterr().out

    headers_only = tmp_path / "empty.csv"
    headers_only.write_text("cell\n")
    assert not verify_artifacts("stage", [str(headers_only)])
    assert not verify_artifacts("stage", [str(tmp_path / "absent.csv")])
    (tmp_path / "zero.kdckpt").write_bytes(b"")
    assert not verify_artifacts("stage", [str(tmp_path / "zero.kdckpt")])


def test_run_stage_reraises(capsys):
    assert run_stage("Adding", lambda: 1 + 1) == 2

    def boom():
        raise RuntimeError("disk full")

    with pytest.raises(RuntimeError):
        run_stage("Saving", boom)
    assert "Saving failed: disk full" in capsys.readouterr().out


def test_pipeline_produces_every_artifact(tmp_path):
    document = experiment_document(out=str(tmp_path / "pipe"), init={"scheme": "preload"})
    document["student"]["hidden_dim"] = 16
    config = parse_config(document)
    assert run_pipeline(config)
    for filename in (TEACHER_FILE, STUDENT_INIT_FILE, STUDENT_FILE, SUMMARY_FILE):
        assert os.path.exists(os.path.join(config.out, filename))
    summary = pd.read_csv(os.path.join(config.out, SUMMARY_FILE))
    assert summary["init"].tolist() == ["preload"]
