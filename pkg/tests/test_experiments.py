import os

import pandas as pd
import pytest

from conftest import experiment_document
from kdkit.checkpoint import load_model
from kdkit.compare import compare_summaries
from kdkit.config import SizeConfig, parse_config
from kdkit.errors import ConfigError, InputError
from kdkit.experiments import (METRICS_FILE, STUDENT_FILE, STUDENT_INIT_FILE, SUMMARY_FILE, TEACHER_FILE,
                               apply_axes, expand_sweep, run_distill, run_init_student, run_report, run_size,
                               run_sweep, run_train_teacher)
from kdkit.model import count_parameters


def _config(tmp_path, name="run", **overrides):
    return parse_config(experiment_document(out=str(tmp_path / name), **overrides))


@pytest.mark.parametrize("preset,count", [("grid", 24), ("single_match", 55), ("double_match", 155)])
def test_presets_expand_to_unique_cells(preset, count):
    cells = expand_sweep(parse_config(experiment_document(sweep={"preset": preset})))
    assert len(cells) == count
    assert len({cell.cell_id for cell in cells}) == count
    assert [cell.index for cell in cells] == list(range(count))


def test_declared_axes_follow_the_preset():
    document = experiment_document(sweep={"preset": "grid", "axes": {"seed": [0, 1]}})
    cells = expand_sweep(parse_config(document))
    assert len(cells) == 48
    assert list(cells[0].values) == ["temperature", "hard_weight", "seed"]
    assert cells[1].config.seed == 1 and cells[1].config.objective.temperature == 1.0


def test_single_match_soft_target_cell_has_no_terms():
    cells = expand_sweep(parse_config(experiment_document(sweep={"preset": "single_match"})))
    soft = [c for c in cells if c.values["kind"] == "soft_target"]
    assert len(soft) == 5
    assert all(not c.config.objective.terms for c in soft)


def test_apply_axes_rewrites_one_cell():
    base = experiment_document()
    data = apply_axes(base, {"strategy": "first", "weight": 2.0, "temperature": 4.0,
                             "student": {"hidden_dim": 16}, "init": "pretrain"})
    assert data["objective"]["terms"] == [{"kind": "hidden_mse", "strategy": "first", "weight": 2.0}]
    assert data["objective"]["temperature"] == 4.0
    assert data["student"]["hidden_dim"] == 16 and data["student"]["mlm_head"]
    assert data["init"]["scheme"] == "pretrain"
    assert base["objective"]["terms"][0]["strategy"] == "dilatation"

    pair = apply_axes(base, {"kinds": ["attention_mse", "value_relation"], "strategy": "last"})
    assert [t["kind"] for t in pair["objective"]["terms"]] == ["attention_mse", "value_relation"]
    assert all(t["strategy"] == "last" for t in pair["objective"]["terms"])


def test_student_axis_from_budget():
    budget = {"budget": {"params": 20_000}, "depths": [1, 2], "widths": [8, 16, 24, 32]}
    config = parse_config(experiment_document(sweep={"axes": {"student": {"from_budget": budget}}}))
    cells = expand_sweep(config)
    assert [c.config.student.num_layers for c in cells] == [1, 2]
    for cell in cells:
        assert count_parameters(cell.config.student)["total"] <= 20_000 * 1.05
    assert cells[0].config.student.hidden_dim >= cells[1].config.student.hidden_dim


def test_bad_sweeps_are_config_errors():
    with pytest.raises(ConfigError, match="unknown sweep preset"):
        expand_sweep(parse_config(experiment_document(sweep={"preset": "everything"})))
    with pytest.raises(ConfigError, match="unknown axis"):
        expand_sweep(parse_config(experiment_document(sweep={"axes": {"colour": ["red"]}})))
    with pytest.raises(ConfigError, match="no configuration fits"):
        expand_sweep(parse_config(experiment_document(
            sweep={"axes": {"student": {"from_budget": {"budget": {"params": 10}}}}})))


def test_teacher_and_student_stages_write_checkpoints(tmp_path):
    config = _config(tmp_path)
    teacher, metrics = run_train_teacher(config)
    assert os.path.exists(os.path.join(config.out, TEACHER_FILE))
    assert "dev_metric" in metrics
    reloaded = load_model(os.path.join(config.out, TEACHER_FILE))
    assert reloaded.config == config.teacher.model

    student, history = run_init_student(config, teacher)
    assert history.empty
    assert load_model(os.path.join(config.out, STUDENT_INIT_FILE)).config == student.config


def test_distillation_runs_are_reproducible(tmp_path):
    rows = []
    for name in ("a", "b"):
        config = _config(tmp_path, name)
        rows.append(run_distill(config))
        for filename in (TEACHER_FILE, STUDENT_FILE, METRICS_FILE, SUMMARY_FILE, "config_echo.json"):
            assert os.path.exists(os.path.join(config.out, filename))
        assert len(pd.read_csv(os.path.join(config.out, METRICS_FILE))) == 4
    assert rows[0] == rows[1]
    assert rows[0]["terms"] == "hidden_mse@1-2;hidden_mse@2-4"
    assert rows[0]["status"] == "ok"
    differences = compare_summaries(str(tmp_path / "a" / SUMMARY_FILE), str(tmp_path / "b" / SUMMARY_FILE))
    assert differences["identical"]


def test_sweep_trains_one_teacher_and_keeps_cell_order(tmp_path):
    config = _config(tmp_path, sweep={"axes": {"temperature": [1.0, 2.0], "seed": [0, 1]}})
    summary = run_sweep(config)
    assert len(summary) == 4
    assert summary["cell"].tolist() == [cell.cell_id for cell in expand_sweep(config)]
    assert (summary["status"] == "ok").all()
    assert summary["axis_temperature"].tolist() == ["1.0", "1.0", "2.0", "2.0"]
    assert os.path.isdir(os.path.join(config.out, "teachers", "teacher-0"))
    assert not os.path.exists(os.path.join(config.out, "teachers", "teacher-1"))
    on_disk = pd.read_csv(os.path.join(config.out, SUMMARY_FILE))
    assert on_disk["cell"].tolist() == summary["cell"].tolist()


def test_sweep_rejects_bad_job_counts(tmp_path):
    with pytest.raises(ConfigError, match="--jobs"):
        run_sweep(_config(tmp_path), jobs=0)


def test_run_size_writes_the_table(tmp_path):
    table = run_size(SizeConfig(depths=[2, 12]), out_dir=str(tmp_path), verbose=False)
    assert table["dimension"].tolist() == [176, 128]
    assert pd.read_csv(tmp_path / "sizing.csv")["layers"].tolist() == [2, 12]


def test_report(tmp_path, capsys):
    summary = tmp_path / "summary.csv"
    pd.DataFrame([
        {"cell": "x", "terms": "cos@1-1", "dev_metric": 0.6, "status": "ok"},
        {"cell": "y", "terms": "pkd@2-4", "dev_metric": 0.9, "status": "ok"},
    ]).to_csv(summary, index=False)
    report = run_report(str(summary), top=1)
    assert report["best"]["cell"].tolist() == ["y"]
    assert "pkd@2-4" in capsys.readouterr().out
    with pytest.raises(InputError):
        run_report(str(tmp_path / "absent.csv"))
    with pytest.raises(ConfigError, match="--export-task"):
        run_report(str(summary), export_path=str(tmp_path / "task.tsv"))

    config = _config(tmp_path)
    exported = run_report(str(summary), config=config, export_path=str(tmp_path / "task.tsv"))["export"]
    assert len(pd.read_csv(exported, sep="\t")) == 64 + 32
