"""
Experiment orchestration behind the CLI: teacher training, student
initialization, single distillation runs, sweeps, sizing tables and reports.

Every run writes into its ``out`` directory:

    config_echo.json       fully-resolved config (re-running it reproduces the run)
    teacher.kdckpt(.json)  trained teacher
    student_init.kdckpt    initialized student (init-student)
    student.kdckpt         distilled student (projections are not saved)
    metrics.csv            per-step loss breakdown and eval metric
    summary.csv            one row per run / sweep cell
"""
import copy
import itertools
import json
import os
from dataclasses import dataclass
from multiprocessing import Pool
from typing import Any, Dict, List, Mapping, Optional, Tuple

import pandas as pd
from tqdm import tqdm

from kdkit.checkpoint import load_model, save_model
from kdkit.compare import compare_summaries, print_comparison
from kdkit.config import ExperimentConfig, SizeConfig, parse_config, write_config_echo
from kdkit.errors import CheckpointError, ConfigError, DivergenceError, InputError, NumericalError
from kdkit.init_schemes import initialize_student, pretrain_mlm
from kdkit.losses import KnowledgeKind, ProjectionBank, double_match_combinations
from kdkit.matching import STRATEGIES
from kdkit.model import TransformerModel, count_parameters
from kdkit.objective import HARD_WEIGHT_GRID, TEMPERATURE_GRID
from kdkit.sizing import budget_student_axis, configs_at_budget, sizing_table
from kdkit.tasks import TaskDataset, export_dataset, generate_task, lm_corpus
from kdkit.trainer import distill, evaluate, train_task_model

TEACHER_FILE = "teacher.kdckpt"
STUDENT_INIT_FILE = "student_init.kdckpt"
STUDENT_FILE = "student.kdckpt"
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.csv"

PRESETS: Dict[str, Dict[str, List[Any]]] = {
    "grid": {"temperature": list(TEMPERATURE_GRID), "hard_weight": list(HARD_WEIGHT_GRID)},
    "single_match": {"strategy": list(STRATEGIES), "kind": [kind.value for kind in KnowledgeKind]},
    "double_match": {"strategy": list(STRATEGIES),
                     "kinds": [[a.value, b.value] for a, b in double_match_combinations()]},
}
AXES = ("teacher", "student", "init", "strategy", "kind", "kinds", "weight", "temperature", "hard_weight", "soft_weight",
        "seed")


def _say(config: ExperimentConfig, message: str) -> None:
    if config.verbose:
        print(message)


# ---------------------------------------------------------------------------
# Teacher
# ---------------------------------------------------------------------------

def run_train_teacher(config: ExperimentConfig, dataset: Optional[TaskDataset] = None,
                      out_dir: Optional[str] = None) -> Tuple[TransformerModel, Dict[str, float]]:
    """Train the teacher on the task's hard labels and save it as ``teacher.kdckpt``."""
    out_dir = out_dir or config.out
    os.makedirs(out_dir, exist_ok=True)
    dataset = dataset or generate_task(config.task)
    model_cfg = config.teacher.model
    _say(config, f"🚀 Training teacher (L={model_cfg.num_layers}, d={model_cfg.hidden_dim}) "
                 f"on '{config.task.name}'...")
    teacher = TransformerModel(model_cfg, seed=config.teacher_seed)
    schedule = config.teacher_schedule()
    if config.teacher.pretrain_steps:
        corpus = lm_corpus(model_cfg.vocab_size, config.task.seq_len, max(config.init.corpus_size, schedule.batch_size),
                           config.teacher_seed)
        pretrain_mlm(teacher, corpus, config.teacher.pretrain_steps, schedule, config.verbose)
    result = train_task_model(teacher, dataset, schedule, verbose=config.verbose)
    path = save_model(teacher, os.path.join(out_dir, TEACHER_FILE))
    result.history.to_csv(os.path.join(out_dir, "teacher_history.csv"), index=False)
    metric = result.metrics.get("dev_metric", float("nan"))
    _say(config, f"✅ Teacher trained: dev {config.task.metric} = {metric:.4f}")
    _say(config, f"💾 Saved {path}")
    return teacher, result.metrics


def load_teacher(config: ExperimentConfig, dataset: Optional[TaskDataset] = None) -> TransformerModel:
    """The configured teacher checkpoint, else ``<out>/teacher.kdckpt``, else a freshly trained teacher."""
    path = config.teacher.checkpoint or os.path.join(config.out, TEACHER_FILE)
    if os.path.exists(path):
        teacher = load_model(path)
        if teacher.config != config.teacher.model:
            raise ConfigError([f"teacher checkpoint {path} holds {teacher.config}, config asks for "
                               f"{config.teacher.model}"])
        return teacher
    if config.teacher.checkpoint:
        raise CheckpointError(f"teacher checkpoint not found: {path}")
    _say(config, "⚠️  No teacher checkpoint found, training one first")
    teacher, _ = run_train_teacher(config, dataset)
    return teacher


# ---------------------------------------------------------------------------
# Student
# ---------------------------------------------------------------------------

def run_init_student(config: ExperimentConfig, teacher: Optional[TransformerModel] = None,
                     save: bool = True) -> Tuple[TransformerModel, pd.DataFrame]:
    """Build the student and apply the configured init scheme (or load ``init.checkpoint``)."""
    if config.init.checkpoint:
        student = load_model(config.init.checkpoint)
        if student.config != config.student:
            raise ConfigError([f"init checkpoint {config.init.checkpoint} does not match the student config"])
        return student, pd.DataFrame()

    scheme = config.build_init()
    if scheme.needs_teacher and teacher is None:
        teacher = load_teacher(config)
    student = TransformerModel(config.student, seed=config.seed)
    _say(config, f"🚀 Initializing student (L={config.student.num_layers}, d={config.student.hidden_dim}) "
                 f"with '{scheme.name}'...")
    history = initialize_student(scheme, student, teacher, schedule=config.student_schedule(), verbose=config.verbose)
    if save:
        os.makedirs(config.out, exist_ok=True)
        path = save_model(student, os.path.join(config.out, STUDENT_INIT_FILE))
        if len(history):
            history.to_csv(os.path.join(config.out, "init_history.csv"), index=False)
        _say(config, f"💾 Saved {path}")
    return student, history


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------

def _term_summary(names: List[str]) -> str:
    return ";".join(names) if names else "soft_target"


def run_distill(config: ExperimentConfig, teacher: Optional[TransformerModel] = None,
                dataset: Optional[TaskDataset] = None, student: Optional[TransformerModel] = None) -> Dict[str, Any]:
    """
    One distillation run. Writes the student, metrics.csv and a one-row
    summary.csv. Without ``student`` the configured init scheme builds one.
    """
    os.makedirs(config.out, exist_ok=True)
    write_config_echo(config)
    dataset = dataset or generate_task(config.task)
    teacher = teacher or load_teacher(config, dataset)
    if student is None:
        student, _ = run_init_student(config, teacher, save=False)
    objective = config.build_objective()
    bank = ProjectionBank.for_models(teacher, student, init=config.objective.projection_init, seed=config.seed)

    _say(config, f"🚀 Distilling with {_term_summary(objective.term_names())} "
                 f"(T={objective.temperature}, alpha={objective.hard_weight})...")
    result = distill(teacher, student, dataset, objective, config.student_schedule(), bank,
                     auto_weight=config.objective.auto_weight, auto_weight_ratio=config.objective.auto_weight_ratio,
                     verbose=config.verbose)

    save_model(student, os.path.join(config.out, STUDENT_FILE))
    result.history.to_csv(os.path.join(config.out, METRICS_FILE), index=False)
    row = summary_row(config, dataset, teacher, student, result.objective, result.metrics)
    pd.DataFrame([row]).to_csv(os.path.join(config.out, SUMMARY_FILE), index=False)
    _say(config, f"✅ Student dev {config.task.metric} = {row['dev_metric']:.4f} "
                 f"(teacher {row['teacher_metric']:.4f})")
    _say(config, f"💾 Saved {os.path.join(config.out, STUDENT_FILE)} and {METRICS_FILE}")
    return row


def summary_row(config: ExperimentConfig, dataset: TaskDataset, teacher: TransformerModel, student: TransformerModel,
                objective, metrics: Mapping[str, float]) -> Dict[str, Any]:
    return {
        "cell": config.name,
        "teacher_layers": teacher.config.num_layers,
        "teacher_hidden": teacher.config.hidden_dim,
        "student_layers": student.config.num_layers,
        "student_hidden": student.config.hidden_dim,
        "student_params": count_parameters(student.config)["total"],
        "init": config.init.scheme,
        "temperature": objective.temperature,
        "hard_weight": objective.hard_weight,
        "soft_weight": objective.soft_weight,
        "terms": _term_summary(objective.term_names()),
        "steps": config.schedule.steps,
        "seed": config.seed,
        "metric": config.task.metric,
        "teacher_metric": evaluate(teacher, dataset),
        "initial_loss": metrics.get("initial_loss", float("nan")),
        "final_loss": metrics.get("final_loss", float("nan")),
        "dev_metric": metrics.get("dev_metric", float("nan")),
        "status": "ok",
    }


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepCell:
    index: int
    cell_id: str
    values: Dict[str, Any]
    config: ExperimentConfig


def _label(value: Any) -> str:
    if isinstance(value, Mapping):
        if "num_layers" in value or "hidden_dim" in value:
            return f"L{value.get('num_layers', '')}d{value.get('hidden_dim', '')}"
        return json.dumps(value, sort_keys=True)
    if isinstance(value, (list, tuple)):
        return "+".join(_label(v) for v in value)
    return str(value)


def _merge_model(section: Dict, overrides: Mapping) -> None:
    if "hidden_dim" in overrides and "ffn_dim" not in overrides:
        section.pop("ffn_dim", None)
    section.update(overrides)


def apply_axes(base: Mapping, values: Mapping[str, Any]) -> Dict:
    """A config document with one sweep cell's axis values written in."""
    data = copy.deepcopy(dict(base))
    objective = data.setdefault("objective", {})
    terms = objective.setdefault("terms", [])
    if "teacher" in values:
        _merge_model(data["teacher"].setdefault("model", {}), values["teacher"])
    if "student" in values:
        _merge_model(data.setdefault("student", {}), values["student"])
    if "init" in values:
        data.setdefault("init", {})["scheme"] = values["init"]
        if values["init"] in ("pretrain", "general_distillation"):
            data["student"]["mlm_head"] = True

    if "kind" in values or "kinds" in values:
        kinds = values["kinds"] if "kinds" in values else [values["kind"]]
        kinds = [k for k in kinds if KnowledgeKind.parse(k) is not KnowledgeKind.SOFT_TARGET]
        template = dict(terms[0]) if terms else {}
        template.pop("pairs", None)
        template["strategy"] = values.get("strategy", template.get("strategy", "last"))
        template["weight"] = values.get("weight", template.get("weight", 1.0))
        objective["terms"] = [dict(template, kind=k) for k in kinds]
    else:
        for term in terms:
            if "strategy" in values:
                term["strategy"] = values["strategy"]
                term.pop("pairs", None)
            if "weight" in values:
                term["weight"] = values["weight"]
    for key in ("temperature", "hard_weight", "soft_weight"):
        if key in values:
            objective[key] = values[key]
    if "seed" in values:
        data["seed"] = values["seed"]
    return data


def sweep_axes(config: ExperimentConfig) -> Dict[str, List[Any]]:
    """Preset axes followed by the declared ones, in declaration order."""
    preset = config.sweep.preset
    if preset is not None and preset not in PRESETS:
        raise ConfigError([f"unknown sweep preset '{preset}' (expected one of: {', '.join(PRESETS)})"])
    axes: Dict[str, List[Any]] = dict(PRESETS[preset]) if preset else {}
    problems = []
    for name, values in config.sweep.axes.items():
        if name not in AXES:
            problems.append(f"sweep: unknown axis '{name}' (expected one of: {', '.join(AXES)})")
            continue
        if name == "student" and isinstance(values, Mapping):
            budget = values.get("from_budget")
            if budget is None:
                problems.append("sweep.axes.student must be a list or {'from_budget': {...}}")
                continue
            size = SizeConfig.from_dict(budget)
            values = budget_student_axis(size.budget, size.depths, size.widths, size.tolerance,
                                         vocab_size=config.student.vocab_size,
                                         max_seq_len=config.student.max_seq_len,
                                         num_labels=config.student.num_labels)
            if not values:
                problems.append("sweep.axes.student: no configuration fits the budget")
                continue
        axes[name] = list(values)
    if problems:
        raise ConfigError(problems)
    return axes


def expand_sweep(config: ExperimentConfig) -> List[SweepCell]:
    """
    One cell per point of the Cartesian product of the sweep axes, each a
    fully validated config. Problems in any cell are reported together.
    """
    axes = sweep_axes(config)
    names = list(axes)
    base = config.to_dict()
    base["sweep"] = {"preset": None, "axes": {}}
    cells, problems = [], []
    for index, combo in enumerate(itertools.product(*(axes[n] for n in names))):
        values = dict(zip(names, combo))
        cell_id = "-".join([f"{index:04d}"] + [f"{n}={_label(v)}" for n, v in values.items()])
        data = apply_axes(base, values)
        data["out"] = os.path.join(config.out, "cells", cell_id)
        data["verbose"] = False
        try:
            cells.append(SweepCell(index, cell_id, values, parse_config(data)))
        except (ConfigError, KeyError) as exc:
            messages = exc.messages if isinstance(exc, ConfigError) else [f"missing key {exc}"]
            problems.extend(f"cell {cell_id}: {m}" for m in messages)
    if problems:
        raise ConfigError(problems)
    return cells


def _teacher_key(config: ExperimentConfig) -> str:
    return json.dumps({"task": config.task.to_dict(), "teacher": config.teacher.to_dict(),
                       "seed": config.teacher_seed}, sort_keys=True)


def prepare_teachers(config: ExperimentConfig, cells: List[SweepCell]) -> int:
    """Train each distinct teacher once and point every cell at its checkpoint. Returns the count trained."""
    trained: Dict[str, str] = {}
    for cell in cells:
        if cell.config.teacher.checkpoint:
            continue
        key = _teacher_key(cell.config)
        if key not in trained:
            out_dir = os.path.join(config.out, "teachers", f"teacher-{len(trained)}")
            teacher_cfg = copy.deepcopy(cell.config)
            teacher_cfg.verbose = config.verbose
            run_train_teacher(teacher_cfg, out_dir=out_dir)
            trained[key] = os.path.join(out_dir, TEACHER_FILE)
        cell.config.teacher.checkpoint = trained[key]
    return len(trained)


def _run_cell(payload: Tuple[str, Dict[str, Any], Dict]) -> Dict[str, Any]:
    cell_id, values, document = payload
    config = parse_config(document)
    labels = {f"axis_{name}": _label(value) for name, value in values.items()}
    try:
        row = run_distill(config)
    except (DivergenceError, NumericalError) as exc:
        row = {"status": f"diverged: {exc}"}
    row.pop("cell", None)
    return {"cell": cell_id, **labels, **row}


def run_sweep(config: ExperimentConfig, jobs: int = 1) -> pd.DataFrame:
    """
    Run every cell and write ``summary.csv`` with one row per cell in cell
    order, whatever order workers finish in.
    """
    if jobs < 1:
        raise ConfigError([f"--jobs must be at least 1, got {jobs}"])
    cells = expand_sweep(config)
    os.makedirs(config.out, exist_ok=True)
    write_config_echo(config)
    _say(config, f"🚀 Sweep '{config.name}': {len(cells)} cells, {jobs} job(s)")
    trained = prepare_teachers(config, cells)
    if trained:
        _say(config, f"✅ {trained} teacher(s) ready")

    payloads = [(cell.cell_id, cell.values, cell.config.to_dict()) for cell in cells]
    progress = dict(total=len(payloads), desc="sweep", disable=not config.verbose)
    if jobs == 1:
        rows = [_run_cell(p) for p in tqdm(payloads, **progress)]
    else:
        with Pool(processes=jobs) as pool:
            rows = list(tqdm(pool.imap(_run_cell, payloads), **progress))

    summary = pd.DataFrame(rows)
    path = os.path.join(config.out, SUMMARY_FILE)
    summary.to_csv(path, index=False)
    diverged = int((summary["status"] != "ok").sum()) if "status" in summary else 0
    _say(config, f"📊 Sweep summary: {len(summary)} rows")
    if diverged:
        _say(config, f"⚠️  {diverged} cell(s) diverged")
    _say(config, f"💾 Saved {path}")
    return summary


# ---------------------------------------------------------------------------
# Sizing and reports
# ---------------------------------------------------------------------------

def run_size(size: SizeConfig, out_dir: Optional[str] = None, verbose: bool = True) -> pd.DataFrame:
    """The widest config per depth under the budget, as a dimension/layers/params/flops table."""
    configs = configs_at_budget(size.budget, size.depths, size.widths, size.tolerance,
                                vocab_size=size.vocab_size, max_seq_len=size.max_seq_len)
    n = int(size.budget.get("n", size.n))
    table = sizing_table(configs, n)
    if verbose:
        print(f"📊 {len(table)} configuration(s) within {size.tolerance:.0%} of {size.budget}")
        if len(table):
            print(table.to_string(index=False))
        else:
            print("⚠️  No configuration fits the budget")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "sizing.csv")
        table.to_csv(path, index=False)
        if verbose:
            print(f"💾 Saved {path}")
    return table


def run_report(summary_path: str, compare_path: Optional[str] = None, config: Optional[ExperimentConfig] = None,
               export_path: Optional[str] = None, top: int = 5) -> Dict[str, Any]:
    """Print the best rows of a summary; optionally diff it against another and export the task data."""
    report: Dict[str, Any] = {}
    if not os.path.exists(summary_path):
        raise InputError(f"summary not found: {summary_path}")
    summary = pd.read_csv(summary_path)
    print(f"📊 {summary_path}: {len(summary)} row(s)")
    if "dev_metric" in summary and len(summary):
        best = summary.sort_values("dev_metric", ascending=False, kind="mergesort").head(top)
        columns = [c for c in ("cell", "terms", "temperature", "hard_weight", "dev_metric", "final_loss", "status")
                   if c in best.columns]
        print(best[columns].to_string(index=False))
        report["best"] = best
    if compare_path:
        differences = compare_summaries(summary_path, compare_path)
        print_comparison(differences)
        report["differences"] = differences
    if export_path:
        if config is None:
            raise ConfigError(["--export-task needs --config to know which task to export"])
        export_dataset(generate_task(config.task), export_path)
        print(f"💾 Exported task '{config.task.name}' to {export_path}")
        report["export"] = export_path
    return report
