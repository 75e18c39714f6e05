"""
Student initialization schemes: random, masked-LM pre-training, general
distillation (masked LM plus distillation terms) and pre-loading teacher
layers.
"""
from dataclasses import dataclass, replace
from typing import List, Optional, Union

import numpy as np
import pandas as pd

from kdkit.errors import ConfigError, InputError
from kdkit.losses import ProjectionBank
from kdkit.matching import LayerPairPlan, build_plan
from kdkit.model import ModelConfig, TransformerModel
from kdkit.objective import DistillObjective, hard_label_loss, total_loss
from kdkit.tasks import IGNORE_INDEX, lm_corpus, mask_tokens
from kdkit.tensor import Tensor, gather, no_grad, reshape
from kdkit.trainer import TrainSchedule, train_loop

INIT_SCHEMES = ("random", "pretrain", "general_distillation", "preload")
PRELOAD_FIELDS = ("hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len", "type_vocab_size", "activation")
HEAD_PREFIXES = ("pooler.", "classifier.", "mlm.")


@dataclass
class InitScheme:
    name: str = "random"
    seed: int = 0
    stddev: float = 0.02
    steps: int = 0
    corpus_size: int = 1024
    seq_len: int = 16
    strategy: Union[str, LayerPairPlan] = "dilatation"
    copy_heads: bool = False
    objective: Optional[DistillObjective] = None

    def problems(self) -> List[str]:
        problems = []
        if self.name not in INIT_SCHEMES:
            problems.append(f"unknown init scheme '{self.name}' (expected one of: {', '.join(INIT_SCHEMES)})")
        if self.stddev < 0:
            problems.append(f"init stddev must be non-negative, got {self.stddev}")
        if self.steps < 0 or self.corpus_size < 1:
            problems.append(f"init steps/corpus_size out of range: {self.steps}/{self.corpus_size}")
        return problems

    @property
    def needs_teacher(self) -> bool:
        return self.name in ("general_distillation", "preload")


def init_random(student: TransformerModel, seed: int, stddev: float = 0.02) -> None:
    student.reset_parameters(seed, stddev)


# ---------------------------------------------------------------------------
# Masked LM
# ---------------------------------------------------------------------------

def _require_mlm(model: TransformerModel, role: str) -> None:
    if not model.config.mlm_head:
        raise ConfigError([f"{role} needs a masked-LM head (mlm_head: true)"])


def masked_logits(model: TransformerModel, hidden: Tensor, positions: np.ndarray) -> Tensor:
    """Vocabulary logits at flat ``positions`` of a [B, n, d] hidden state."""
    batch, n, d = hidden.shape
    return model.mlm_logits(gather(reshape(hidden, (batch * n, d)), positions))


def _mlm_loop(student: TransformerModel, teacher: Optional[TransformerModel], corpus: np.ndarray,
              objective: Optional[DistillObjective], schedule: TrainSchedule,
              bank: Optional[ProjectionBank], desc: str, verbose: bool) -> pd.DataFrame:
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.ndim != 2 or len(corpus) < schedule.batch_size:
        raise InputError(f"corpus of shape {corpus.shape} cannot fill one batch of {schedule.batch_size}")
    vocab_size = student.config.vocab_size
    mask_rng = np.random.default_rng([schedule.seed, 1])

    def step(index: np.ndarray):
        masked, targets = mask_tokens(corpus[index], mask_rng, vocab_size)
        flat = targets.reshape(-1)
        positions = np.flatnonzero(flat != IGNORE_INDEX)
        trace_s = student(masked)
        z_s = masked_logits(student, trace_s.hiddens[-1], positions)
        if teacher is None:
            loss = hard_label_loss(z_s, flat[positions])
            value = loss.item()
            return loss, {"total": value, "l_res": 0.0, "l_hard": value}
        with no_grad():
            trace_t = teacher(masked)
            z_t = masked_logits(teacher, trace_t.hiddens[-1], positions) if teacher.config.mlm_head else z_s.detach()
        return total_loss(trace_t, trace_s, flat[positions], objective, bank, logits=(z_t, z_s))

    params = dict(student.params)
    if bank is not None:
        params.update(bank.named_parameters())
    student.train()
    history = train_loop(params, step, len(corpus), schedule, desc=desc, verbose=verbose)
    student.eval()
    return history


def pretrain_mlm(student: TransformerModel, corpus: np.ndarray, steps: int,
                 schedule: Optional[TrainSchedule] = None, verbose: bool = False) -> pd.DataFrame:
    """Masked-LM training (15% selection, 80/10/10 corruption) through the student's MLM head."""
    _require_mlm(student, "pre-training")
    schedule = replace(schedule or TrainSchedule(), steps=steps)
    return _mlm_loop(student, None, corpus, None, schedule, None, "pretrain", verbose)


def general_distill(student: TransformerModel, teacher: TransformerModel, corpus: np.ndarray, steps: int,
                    objective: DistillObjective, schedule: Optional[TrainSchedule] = None,
                    bank: Optional[ProjectionBank] = None, verbose: bool = False) -> pd.DataFrame:
    """
    Masked-LM training with distillation on unlabeled batches. The masked
    tokens are the hard labels (weighted by ``hard_weight``); the soft target
    compares vocabulary logits at the masked positions (weighted by
    ``soft_weight``, skipped at 0); layer terms act on the full traces.
    """
    _require_mlm(student, "general distillation")
    if objective.soft_weight > 0:
        _require_mlm(teacher, "a general-distillation teacher with a soft target")
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ConfigError([f"teacher and student vocabularies differ: {teacher.config.vocab_size} "
                           f"vs {student.config.vocab_size}"])
    objective.validate(teacher.config, student.config)
    schedule = replace(schedule or TrainSchedule(), steps=steps)
    if bank is None:
        bank = ProjectionBank.for_models(teacher, student, seed=schedule.seed)
    objective.prepare_bank(bank)
    teacher.eval()
    return _mlm_loop(student, teacher, corpus, objective, schedule, bank, "general-distill", verbose)


# ---------------------------------------------------------------------------
# Pre-load
# ---------------------------------------------------------------------------

def preload_problems(student: ModelConfig, teacher: ModelConfig) -> List[str]:
    problems = []
    for name in PRELOAD_FIELDS:
        s_value = getattr(student, name)
        t_value = getattr(teacher, name)
        if s_value != t_value:
            problems.append(f"pre-load needs equal {name}: student {s_value}, teacher {t_value}")
    return problems


def preload(student: TransformerModel, teacher: TransformerModel, plan: Union[str, LayerPairPlan],
            copy_heads: bool = False, seed: int = 0, stddev: float = 0.02) -> LayerPairPlan:
    """
    Copy the embeddings and, for every pair (s, r) of ``plan``, all of teacher
    layer r into student layer s. Output heads are re-initialized unless
    ``copy_heads`` is set and their shapes agree. ``plan`` may be a matching
    strategy name. The teacher is only read.
    """
    problems = preload_problems(student.config, teacher.config)
    if problems:
        raise ConfigError(problems)
    if isinstance(plan, str):
        plan = build_plan(teacher.config.num_layers, student.config.num_layers, plan)
    if plan.student_layers != student.config.num_layers or plan.teacher_layers != teacher.config.num_layers:
        raise ConfigError([f"plan covers L_S={plan.student_layers}/L_T={plan.teacher_layers}, models have "
                           f"{student.config.num_layers}/{teacher.config.num_layers} layers"])

    for name, tensor in student.params.items():
        if name.startswith("embeddings."):
            tensor.data[...] = teacher.params[name].data
    for s, r in plan:
        if s == 0:
            continue
        source = teacher.layer_params(r)
        for key, tensor in student.layer_params(s).items():
            tensor.data[...] = source[key].data

    heads = [name for name in student.params if name.startswith(HEAD_PREFIXES)]
    reinit = []
    for name in heads:
        source = teacher.params.get(name)
        if copy_heads and source is not None and source.shape == student.params[name].shape:
            student.params[name].data[...] = source.data
        else:
            reinit.append(name)
    if reinit:
        student.reset_parameters(seed, stddev, names=reinit)
    student.zero_grad()
    return plan


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def initialize_student(scheme: InitScheme, student: TransformerModel,
                       teacher: Optional[TransformerModel] = None, corpus: Optional[np.ndarray] = None,
                       schedule: Optional[TrainSchedule] = None, verbose: bool = False) -> pd.DataFrame:
    """Apply ``scheme``; returns the training history (empty for random and preload)."""
    problems = scheme.problems()
    if scheme.needs_teacher and teacher is None:
        problems.append(f"init scheme '{scheme.name}' needs a teacher")
    if problems:
        raise ConfigError(problems)

    init_random(student, scheme.seed, scheme.stddev)
    if scheme.name == "random":
        return pd.DataFrame()
    if scheme.name == "preload":
        preload(student, teacher, scheme.strategy, scheme.copy_heads, scheme.seed, scheme.stddev)
        return pd.DataFrame()

    if corpus is None:
        corpus = lm_corpus(student.config.vocab_size, min(scheme.seq_len, student.config.max_seq_len),
                           scheme.corpus_size, scheme.seed)
    schedule = replace(schedule or TrainSchedule(), seed=scheme.seed)
    if scheme.name == "pretrain":
        return pretrain_mlm(student, corpus, scheme.steps, schedule, verbose)
    objective = scheme.objective or DistillObjective(hard_weight=1.0)
    return general_distill(student, teacher, corpus, scheme.steps, objective, schedule, verbose=verbose)
