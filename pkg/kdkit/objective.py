"""
The combined distillation objective

    L = w_res * L_res + alpha * L_hard + sum_k sum_l beta_kl * L_kl

with L_res the soft-target loss, L_hard the supervised loss on ground-truth
labels and L_kl the feature/relation terms on matched layer pairs. w_res is
fixed at 1 except when general distillation switches the soft target off.
"""
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from kdkit.errors import ConfigError, NumericalError
from kdkit.losses import (KIND_INFO, KnowledgeKind, ProjectionBank, cross_entropy_rows,
                          knowledge_loss, mse, soft_target_loss)
from kdkit.matching import LayerPairPlan
from kdkit.model import FeatureTrace, ModelConfig
from kdkit.tensor import Tensor, no_grad, reduce_mean, reshape, scale, softmax_rows

# temperature and hard-label weight sweep grid
TEMPERATURE_GRID = (1.0, 2.0, 4.0, 8.0)
HARD_WEIGHT_GRID = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0)


@dataclass
class KnowledgeTerm:
    """One beta-weighted feature/relation loss on a (student, teacher) layer pair."""
    kind: KnowledgeKind
    student_layer: int
    teacher_layer: int
    weight: float = 1.0
    pair_mode: str = "self"

    def __post_init__(self):
        self.kind = KnowledgeKind.parse(self.kind)

    @property
    def pair(self) -> Tuple[int, int]:
        return self.student_layer, self.teacher_layer

    @property
    def name(self) -> str:
        return f"{self.kind.value}@{self.student_layer}-{self.teacher_layer}"


@dataclass
class DistillObjective:
    temperature: float = 1.0
    hard_weight: float = 0.0
    terms: List[KnowledgeTerm] = field(default_factory=list)
    soft_weight: float = 1.0
    # when both are given, layer pairs are checked against them on construction
    teacher: Optional[ModelConfig] = field(default=None, repr=False, compare=False)
    student: Optional[ModelConfig] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        problems = []
        if not self.temperature > 0:
            problems.append(f"temperature must be positive, got {self.temperature}")
        if self.hard_weight < 0:
            problems.append(f"hard_weight must be non-negative, got {self.hard_weight}")
        if self.soft_weight < 0:
            problems.append(f"soft_weight must be non-negative, got {self.soft_weight}")
        for term in self.terms:
            if term.kind is KnowledgeKind.SOFT_TARGET:
                problems.append("soft_target is the standing response loss and cannot be a layer term")
            if term.weight < 0:
                problems.append(f"{term.name}: weight must be non-negative, got {term.weight}")
        if self.teacher is not None and self.student is not None:
            problems.extend(self.problems(self.teacher, self.student))
        if problems:
            raise ConfigError(problems)

    @classmethod
    def from_plan(cls, kinds: Iterable, plan: LayerPairPlan, weight: float = 1.0, temperature: float = 1.0,
                  hard_weight: float = 0.0, pair_mode: str = "self", soft_weight: float = 1.0,
                  teacher: Optional[ModelConfig] = None, student: Optional[ModelConfig] = None) -> "DistillObjective":
        """Apply every kind to every pair of ``plan`` with the same beta."""
        terms = [KnowledgeTerm(KnowledgeKind.parse(kind), s, r, weight, pair_mode)
                 for kind in kinds for s, r in plan]
        return cls(temperature=temperature, hard_weight=hard_weight, terms=terms, soft_weight=soft_weight,
                   teacher=teacher, student=student)

    def problems(self, teacher: ModelConfig, student: ModelConfig) -> List[str]:
        """Cross-checks against the two architectures."""
        problems = []
        for term in self.terms:
            s, r = term.pair
            if not 0 <= s <= student.num_layers:
                problems.append(f"{term.name}: student layer {s} outside 0..{student.num_layers}")
            if not 0 <= r <= teacher.num_layers:
                problems.append(f"{term.name}: teacher layer {r} outside 0..{teacher.num_layers}")
            info = KIND_INFO[term.kind]
            if info.reads[0] in ("attentions", "queries", "keys", "values") and (s == 0 or r == 0):
                problems.append(f"{term.name}: the embedding layer has no {info.reads[0]}")
            if info.group == "qkv" and teacher.num_heads != student.num_heads:
                problems.append(f"{term.name}: needs equal head counts "
                                f"(teacher {teacher.num_heads}, student {student.num_heads})")
            if term.pair_mode not in ("self", "previous"):
                problems.append(f"{term.name}: unknown pair_mode '{term.pair_mode}'")
            elif term.pair_mode == "previous" and (s == 0 or r == 0):
                problems.append(f"{term.name}: pair_mode 'previous' needs layers >= 1")
        return problems

    def validate(self, teacher: ModelConfig, student: ModelConfig) -> "DistillObjective":
        problems = self.problems(teacher, student)
        if problems:
            raise ConfigError(problems)
        return self

    def scaled(self, factor: float) -> "DistillObjective":
        return replace(self, terms=[replace(t, weight=t.weight * factor) for t in self.terms])

    def term_names(self) -> List[str]:
        return [t.name for t in self.terms]

    def prepare_bank(self, bank: Optional[ProjectionBank]) -> None:
        """Create every projection this objective will use, so optimizers see them up front."""
        if bank is None:
            return
        for term in self.terms:
            if KIND_INFO[term.kind].needs_projection:
                bank.get(*term.pair)


def hard_label_loss(logits: Tensor, labels, regression: bool = False) -> Tensor:
    """CE against integer labels (classification) or MSE against targets (regression), batch mean."""
    labels = np.asarray(labels)
    if regression:
        predicted = reshape(logits, (logits.shape[0],))
        return mse(predicted, Tensor(labels.astype(logits.dtype)))
    one_hot = np.zeros(logits.shape, dtype=logits.dtype)
    one_hot[np.arange(labels.shape[0]), labels.astype(np.int64)] = 1.0
    return reduce_mean(cross_entropy_rows(Tensor(one_hot), softmax_rows(logits)))


def total_loss(trace_t: FeatureTrace, trace_s: FeatureTrace, labels, objective: DistillObjective,
               bank: Optional[ProjectionBank] = None, regression: bool = False,
               logits: Optional[Tuple[Tensor, Tensor]] = None) -> Tuple[Tensor, Dict[str, float]]:
    """
    Evaluate the objective. Returns the scalar loss and a breakdown of the
    weighted contributions (l_res, l_hard, one entry per term) whose values
    sum to ``total``. ``logits`` overrides the (teacher, student) logits, as
    general distillation does with vocabulary logits at masked positions.
    """
    z_t, z_s = logits if logits is not None else (trace_t.logits, trace_s.logits)
    jobs: List[Tuple[str, float, Callable[[], Tensor]]] = []
    if objective.soft_weight > 0:
        jobs.append(("l_res", objective.soft_weight,
                     lambda: soft_target_loss(z_t, z_s, objective.temperature, regression)))
    if objective.hard_weight > 0:
        jobs.append(("l_hard", objective.hard_weight, lambda: hard_label_loss(z_s, labels, regression)))
    for term in objective.terms:
        jobs.append((term.name, term.weight,
                     lambda term=term: knowledge_loss(term.kind, trace_t, trace_s, term.pair, bank, term.pair_mode)))

    parts: List[Tuple[str, Tensor]] = []
    for name, weight, evaluate in jobs:
        try:
            parts.append((name, scale(evaluate(), weight)))
        except NumericalError as exc:
            raise NumericalError(f"{name}: {exc}", term=name) from exc

    breakdown: Dict[str, float] = {"l_res": 0.0, "l_hard": 0.0}
    total: Optional[Tensor] = None
    for name, value in parts:
        breakdown[name] = breakdown.get(name, 0.0) + value.item()
        total = value if total is None else total + value
    if total is None:
        total = Tensor(np.zeros((), dtype=z_s.dtype))
    breakdown["total"] = total.item()
    return total, breakdown


def calibrate_weights(objective: DistillObjective, trace_t: FeatureTrace, trace_s: FeatureTrace,
                      bank: Optional[ProjectionBank] = None, regression: bool = False,
                      ratio: float = 0.1) -> DistillObjective:
    """
    Rescale each term's beta so its initial weighted value is ``ratio`` times
    the initial soft-target loss. Terms that start at ~0 keep their beta.
    """
    with no_grad():
        reference = soft_target_loss(trace_t.logits, trace_s.logits, objective.temperature, regression).item()
        terms = []
        for term in objective.terms:
            value = knowledge_loss(term.kind, trace_t, trace_s, term.pair, bank, term.pair_mode).item()
            if value > 1e-12 and math.isfinite(value):
                terms.append(replace(term, weight=ratio * reference / value))
            else:
                terms.append(term)
    return replace(objective, terms=terms)
