"""
Mini-batch AdamW training: supervised fine-tuning of a task model and
task-specific distillation of a student from a frozen teacher.
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from kdkit.errors import ConfigError, DivergenceError, NumericalError
from kdkit.losses import ProjectionBank
from kdkit.model import TransformerModel
from kdkit.objective import DistillObjective, calibrate_weights, hard_label_loss, total_loss
from kdkit.optim import AdamW, linear_schedule
from kdkit.tasks import TaskDataset, iterate_batches, score_predictions
from kdkit.tensor import Tensor, backward, no_grad

StepFn = Callable[[np.ndarray], Tuple[Tensor, Dict[str, float]]]
HISTORY_HEAD = ["step", "total", "l_res", "l_hard"]


@dataclass
class TrainSchedule:
    steps: int = 200
    batch_size: int = 32
    lr: float = 5e-4
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    eval_every: int = 0
    seed: int = 0

    def problems(self) -> List[str]:
        problems = []
        if self.steps < 0:
            problems.append(f"steps must be non-negative, got {self.steps}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be positive, got {self.batch_size}")
        if self.lr < 0:
            problems.append(f"lr must be non-negative, got {self.lr}")
        if not 0.0 <= self.warmup_frac < 1.0:
            problems.append(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.eval_every < 0:
            problems.append(f"eval_every must be non-negative, got {self.eval_every}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            problems.append(f"betas must be two values in [0, 1), got {tuple(self.betas)}")
        if self.eps <= 0:
            problems.append(f"eps must be positive, got {self.eps}")
        return problems

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)


@dataclass
class TrainResult:
    model: TransformerModel
    history: pd.DataFrame
    metrics: Dict[str, float] = field(default_factory=dict)
    objective: Optional[DistillObjective] = None
    bank: Optional[ProjectionBank] = None


def _order_history(rows: List[Dict[str, float]]) -> pd.DataFrame:
    history = pd.DataFrame(rows)
    terms = [c for c in history.columns if c not in HISTORY_HEAD and c != "eval_metric"]
    return history.reindex(columns=HISTORY_HEAD + terms + ["eval_metric"])


def train_loop(params: Mapping[str, Tensor], step_fn: StepFn, num_examples: int, schedule: TrainSchedule,
               evaluate: Optional[Callable[[], float]] = None, desc: str = "train",
               verbose: bool = False) -> pd.DataFrame:
    """
    Run ``schedule.steps`` AdamW updates over ``params``. ``step_fn`` maps a
    batch of example indices to (loss, breakdown). Returns one history row
    per step; ``eval_metric`` is filled every ``eval_every`` steps.
    """
    optimizer = AdamW(params, lr=schedule.lr, betas=schedule.betas, eps=schedule.eps,
                      weight_decay=schedule.weight_decay)
    batches = iterate_batches(num_examples, schedule.batch_size, schedule.steps, schedule.seed)
    rows = []
    for step, index in enumerate(tqdm(batches, total=schedule.steps, desc=desc, disable=not verbose, leave=False)):
        optimizer.set_lr(linear_schedule(step, schedule.steps, schedule.lr, schedule.warmup_frac))
        optimizer.zero_grad()
        try:
            loss, breakdown = step_fn(index)
        except NumericalError as exc:
            raise DivergenceError(step + 1, exc.term or "forward", float("nan")) from exc
        for name, value in breakdown.items():
            if not math.isfinite(value):
                raise DivergenceError(step + 1, name, value)
        if loss.requires_grad:
            backward(loss)
        optimizer.step()
        row = {"step": step + 1, **breakdown}
        if evaluate is not None and schedule.eval_every and (step + 1) % schedule.eval_every == 0:
            row["eval_metric"] = evaluate()
        rows.append(row)
    return _order_history(rows)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def predict(model: TransformerModel, ids: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Output logits for every row of ``ids`` (eval mode, no tape)."""
    was_training = model.training
    model.eval()
    outputs = []
    with no_grad():
        for start in range(0, len(ids), batch_size):
            outputs.append(model(ids[start:start + batch_size]).logits.numpy().copy())
    model.train(was_training)
    if not outputs:
        return np.zeros((0, model.config.output_dim), dtype=model.dtype)
    return np.concatenate(outputs)


def evaluate(model: TransformerModel, dataset: TaskDataset, split: str = "dev") -> float:
    ids, labels = dataset.split(split)
    logits = predict(model, ids)
    preds = logits[:, 0] if dataset.is_regression else logits
    return score_predictions(dataset.spec, preds, labels)


# ---------------------------------------------------------------------------
# Supervised training
# ---------------------------------------------------------------------------

def train_task_model(model: TransformerModel, dataset: TaskDataset, schedule: TrainSchedule,
                     verbose: bool = False, desc: str = "teacher") -> TrainResult:
    """Fine-tune ``model`` on the hard labels of ``dataset``."""
    ids, labels = dataset.split("train")
    regression = dataset.is_regression

    def step(index: np.ndarray):
        trace = model(ids[index])
        loss = hard_label_loss(trace.logits, labels[index], regression)
        value = loss.item()
        return loss, {"total": value, "l_res": 0.0, "l_hard": value}

    model.train()
    history = train_loop(model.params, step, len(ids), schedule, lambda: evaluate(model, dataset),
                         desc=desc, verbose=verbose)
    model.eval()
    return TrainResult(model, history, _summarize(history, model, dataset))


def _summarize(history: pd.DataFrame, model: TransformerModel, dataset: TaskDataset) -> Dict[str, float]:
    metrics = {
        "initial_loss": float(history["total"].iloc[0]) if len(history) else float("nan"),
        "final_loss": float(history["total"].iloc[-1]) if len(history) else float("nan"),
    }
    metric = dataset.spec.metric
    minimum = 2 if metric == "pearson" else 1
    if metric is not None and len(dataset.dev_ids) >= minimum:
        metrics["dev_metric"] = evaluate(model, dataset)
    return metrics


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------

def distill(teacher: TransformerModel, student: TransformerModel, dataset: TaskDataset,
            objective: DistillObjective, schedule: TrainSchedule, bank: Optional[ProjectionBank] = None,
            auto_weight: bool = False, auto_weight_ratio: float = 0.1, verbose: bool = False) -> TrainResult:
    """
    Train ``student`` against the frozen ``teacher`` with ``objective``.

    Projections in ``bank`` (identity-initialized when not supplied) train
    jointly with the student under the same optimizer; they are returned on
    the result but never become part of the student's parameters. With
    ``auto_weight`` the term weights are first calibrated on the first batch.
    """
    objective.validate(teacher.config, student.config)
    if teacher.config.output_dim != student.config.output_dim:
        raise ConfigError([f"teacher and student heads differ: {teacher.config.num_labels} vs "
                           f"{student.config.num_labels} labels"])
    if bank is None:
        bank = ProjectionBank.for_models(teacher, student, seed=schedule.seed)
    objective.prepare_bank(bank)

    ids, labels = dataset.split("train")
    regression = dataset.is_regression
    teacher.eval()

    if auto_weight and objective.terms and schedule.steps > 0:
        first = next(iterate_batches(len(ids), schedule.batch_size, 1, schedule.seed))
        with no_grad():
            objective = calibrate_weights(objective, teacher(ids[first]), student(ids[first]), bank,
                                          regression, auto_weight_ratio)

    def step(index: np.ndarray):
        with no_grad():
            trace_t = teacher(ids[index])
        trace_s = student(ids[index])
        return total_loss(trace_t, trace_s, labels[index], objective, bank, regression)

    params = dict(student.params)
    params.update(bank.named_parameters())
    student.train()
    history = train_loop(params, step, len(ids), schedule, lambda: evaluate(student, dataset),
                         desc="distill", verbose=verbose)
    student.eval()
    return TrainResult(student, history, _summarize(history, student, dataset), objective, bank)
