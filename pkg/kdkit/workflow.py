"""
End-to-end pipeline: train teacher, initialize student, distill, report.
Each stage's artifacts are verified before the next stage starts.
"""
import os
from typing import Callable, List, TypeVar

import pandas as pd

from kdkit.config import ExperimentConfig
from kdkit.experiments import (METRICS_FILE, STUDENT_FILE, STUDENT_INIT_FILE, SUMMARY_FILE, TEACHER_FILE,
                               run_distill, run_init_student, run_report, run_train_teacher)

T = TypeVar("T")


def run_stage(description: str, stage: Callable[[], T]) -> T:
    print(f"🚀 {description}...")
    try:
        result = stage()
    except Exception as e:
        print(f"❌ {description} failed: {e}")
        raise
    print(f"✅ {description} completed successfully!")
    return result


def verify_artifacts(stage_name: str, paths: List[str]) -> bool:
    """Every expected file exists and is non-empty; CSVs must also hold at least one row."""
    for path in paths:
        if not os.path.exists(path) or os.path.getsize(path) == 0:
            print(f"❌ CRITICAL: {stage_name} did not produce {path}")
            return False
        if path.endswith(".csv"):
            try:
                rows = len(pd.read_csv(path))
            except Exception as e:
                print(f"❌ Error reading {path}: {e}")
                return False
            if rows == 0:
                print(f"❌ CRITICAL: {path} is empty after {stage_name}")
                return False
    print(f"✅ {stage_name}: {len(paths)} artifact(s) verified")
    return True


def run_pipeline(config: ExperimentConfig) -> bool:
    """
    Run the complete teacher -> student workflow in one output directory.
    Returns False when a stage's artifacts are missing.
    """
    print(f"🎯 Starting distillation pipeline '{config.name}'")
    print("=" * 50)
    out = config.out

    teacher, _ = run_stage("Teacher training", lambda: run_train_teacher(config))
    expected = [os.path.join(out, TEACHER_FILE), os.path.join(out, TEACHER_FILE + ".json")]
    if config.teacher.schedule.steps:
        expected.append(os.path.join(out, "teacher_history.csv"))
    if not verify_artifacts("Teacher training", expected):
        print("❌ Teacher training failed. Stopping workflow!")
        return False
    print()

    student, _ = run_stage("Student initialization", lambda: run_init_student(config, teacher))
    init_path = config.init.checkpoint or os.path.join(out, STUDENT_INIT_FILE)
    if not verify_artifacts("Student initialization", [init_path]):
        print("❌ Student initialization failed. Stopping workflow!")
        return False
    print()

    run_stage("Distillation", lambda: run_distill(config, teacher, student=student))
    expected = [os.path.join(out, STUDENT_FILE), os.path.join(out, SUMMARY_FILE)]
    if config.schedule.steps:
        expected.append(os.path.join(out, METRICS_FILE))
    if not verify_artifacts("Distillation", expected):
        print("❌ Distillation failed. Stopping workflow!")
        return False
    print()

    run_stage("Report", lambda: run_report(os.path.join(out, SUMMARY_FILE)))
    print("=" * 50)
    print("🎉 Pipeline complete!")
    return True
