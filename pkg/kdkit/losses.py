"""
Knowledge losses between a teacher and a student FeatureTrace.

Response-based: soft targets. Feature-based: attention mse/ce, hidden mse,
cos, pkd. Relation-based: mmd, gram, query/key/value relation.

Teacher features are always detached; gradients reach the student trace and
the projections of a ``ProjectionBank``. All losses are mean-reduced over
batch, tokens and rows.
"""
from dataclasses import dataclass
from enum import Enum
from itertools import product
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from kdkit.errors import ConfigError, InputError, ParameterError, ShapeError
from kdkit.model import FeatureTrace, TransformerModel, truncated_normal
from kdkit.tensor import (Tensor, log, matmul, parameter, reduce_mean, reduce_sum, scale, softmax_rows,
                          sqrt, transpose)

LOG_EPS = 1e-12
NORM_EPS = 1e-8

LayerPair = Tuple[int, int]


class KnowledgeKind(str, Enum):
    SOFT_TARGET = "soft_target"
    ATTENTION_MSE = "attention_mse"
    ATTENTION_CE = "attention_ce"
    HIDDEN_MSE = "hidden_mse"
    COS = "cos"
    PKD = "pkd"
    MMD = "mmd"
    GRAM = "gram"
    QUERY_RELATION = "query_relation"
    KEY_RELATION = "key_relation"
    VALUE_RELATION = "value_relation"

    @classmethod
    def parse(cls, value) -> "KnowledgeKind":
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ConfigError([f"unknown knowledge kind '{value}' (expected one of: {names})"]) from None


@dataclass(frozen=True)
class KindInfo:
    family: str  # response | feature | relation
    group: str  # response | attention | hidden | qkv
    reads: Tuple[str, ...]
    needs_projection: bool


KIND_INFO: Dict[KnowledgeKind, KindInfo] = {
    KnowledgeKind.SOFT_TARGET: KindInfo("response", "response", ("logits",), False),
    KnowledgeKind.ATTENTION_MSE: KindInfo("feature", "attention", ("attentions",), False),
    KnowledgeKind.ATTENTION_CE: KindInfo("feature", "attention", ("attentions",), False),
    KnowledgeKind.HIDDEN_MSE: KindInfo("feature", "hidden", ("hiddens",), True),
    KnowledgeKind.COS: KindInfo("feature", "hidden", ("hiddens",), True),
    KnowledgeKind.PKD: KindInfo("feature", "hidden", ("hiddens",), True),
    KnowledgeKind.MMD: KindInfo("relation", "hidden", ("hiddens",), False),
    KnowledgeKind.GRAM: KindInfo("relation", "hidden", ("hiddens",), True),
    KnowledgeKind.QUERY_RELATION: KindInfo("relation", "qkv", ("queries",), False),
    KnowledgeKind.KEY_RELATION: KindInfo("relation", "qkv", ("keys",), False),
    KnowledgeKind.VALUE_RELATION: KindInfo("relation", "qkv", ("values",), False),
}

LAYER_KINDS: List[KnowledgeKind] = [k for k in KnowledgeKind if k is not KnowledgeKind.SOFT_TARGET]


def knowledge_groups() -> Dict[str, List[KnowledgeKind]]:
    groups: Dict[str, List[KnowledgeKind]] = {}
    for kind in LAYER_KINDS:
        groups.setdefault(KIND_INFO[kind].group, []).append(kind)
    return groups


def double_match_combinations() -> List[Tuple[KnowledgeKind, KnowledgeKind]]:
    """Every pair of kinds drawn from two different groups (attention/hidden/qkv)."""
    groups = knowledge_groups()
    names = ["attention", "hidden", "qkv"]
    combos = []
    for i, first in enumerate(names):
        for second in names[i + 1:]:
            combos.extend(product(groups[first], groups[second]))
    return combos


class ProjectionBank:
    """
    Trainable W_lr [d_T x d_S] maps, one per (student layer, teacher layer) pair,
    created on first use. ``init="identity"`` starts from the rectangular
    identity; ``init="random"`` from a truncated normal seeded per pair.
    """

    def __init__(self, teacher_dim: int, student_dim: int, dtype=np.float32, init: str = "identity",
                 seed: int = 0, stddev: float = 0.02):
        if init not in ("identity", "random"):
            raise ConfigError([f"projection init must be 'identity' or 'random', got '{init}'"])
        self.teacher_dim = teacher_dim
        self.student_dim = student_dim
        self.dtype = np.dtype(dtype)
        self.init = init
        self.seed = seed
        self.stddev = stddev
        self.projections: Dict[LayerPair, Tensor] = {}

    @classmethod
    def for_models(cls, teacher: TransformerModel, student: TransformerModel, **kwargs) -> "ProjectionBank":
        kwargs.setdefault("dtype", student.dtype)
        return cls(teacher.config.hidden_dim, student.config.hidden_dim, **kwargs)

    def get(self, student_layer: int, teacher_layer: int) -> Tensor:
        key = (student_layer, teacher_layer)
        if key not in self.projections:
            if self.init == "identity":
                values = np.eye(self.teacher_dim, self.student_dim)
            else:
                rng = np.random.default_rng([self.seed, student_layer, teacher_layer])
                values = truncated_normal(rng, (self.teacher_dim, self.student_dim), self.stddev)
            self.projections[key] = parameter(values.astype(self.dtype), name=self._name(key))
        return self.projections[key]

    @staticmethod
    def _name(key: LayerPair) -> str:
        return f"projection.{key[0]}.{key[1]}"

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for key in sorted(self.projections):
            yield self._name(key), self.projections[key]

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def __len__(self) -> int:
        return len(self.projections)

    def __contains__(self, key: LayerPair) -> bool:
        return tuple(key) in self.projections


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse operands differ: {a.shape} vs {b.shape}")
    diff = a - b
    return reduce_mean(diff * diff)


def row_norm(x: Tensor) -> Tensor:
    """Per-row L2 norm, smoothed by NORM_EPS so zero rows stay differentiable."""
    return sqrt(reduce_sum(x * x, axis=-1, keepdims=True) + NORM_EPS * NORM_EPS)


def normalize_rows(x: Tensor) -> Tensor:
    return x / row_norm(x)


def cross_entropy_rows(target: Tensor, predicted: Tensor) -> Tensor:
    """-sum_j t_j log p_j per row, ``target`` as the reference distribution."""
    return -reduce_sum(target * log(predicted, LOG_EPS), axis=-1)


def kl_rows(target: Tensor, predicted: Tensor) -> Tensor:
    """KL(target || predicted) per row."""
    return reduce_sum(target * (log(target, LOG_EPS) - log(predicted, LOG_EPS)), axis=-1)


def _swap_last(x: Tensor) -> Tensor:
    return transpose(x)


# ---------------------------------------------------------------------------
# Response-based
# ---------------------------------------------------------------------------

def soft_target_loss(z_t: Tensor, z_s: Tensor, temperature: float, regression: bool = False) -> Tensor:
    """
    T^2 * CE(softmax(z_t / T), softmax(z_s / T)), mean over the batch.
    For regression the logits are matched with MSE and T is ignored.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if z_t.shape != z_s.shape:
        raise ShapeError(f"soft target logits differ: teacher {z_t.shape} vs student {z_s.shape}")
    teacher = z_t.detach()
    if regression:
        return mse(z_s, teacher)
    targets = softmax_rows(teacher, temperature)
    ce = cross_entropy_rows(targets, softmax_rows(z_s, temperature))
    return scale(reduce_mean(ce), temperature * temperature)


# ---------------------------------------------------------------------------
# Feature-based
# ---------------------------------------------------------------------------

def attention_feature_loss(trace_t: FeatureTrace, trace_s: FeatureTrace, pair: LayerPair,
                           variant: str = "mse") -> Tensor:
    """
    mse: MSE between head-summed attention maps.
    ce: row-wise CE of head-averaged maps with the teacher as target, mean over rows.
    Head counts may differ since heads are collapsed first.
    """
    student_layer, teacher_layer = pair
    a_s = trace_s.attention(student_layer)
    a_t = trace_t.attention(teacher_layer).detach()
    if a_s.shape[-1] != a_t.shape[-1] or a_s.shape[:-3] != a_t.shape[:-3]:
        raise InputError(f"attention loss: student {a_s.shape} and teacher {a_t.shape} "
                         "cover different sequence lengths")
    if variant == "mse":
        return mse(reduce_sum(a_s, axis=-3), reduce_sum(a_t, axis=-3))
    if variant == "ce":
        return reduce_mean(cross_entropy_rows(reduce_mean(a_t, axis=-3), reduce_mean(a_s, axis=-3)))
    raise ParameterError(f"unknown attention loss variant '{variant}'")


def hidden_feature_loss(trace_t: FeatureTrace, trace_s: FeatureTrace, pair: LayerPair,
                        bank: ProjectionBank, variant: str = "hidden_mse") -> Tensor:
    """
    Compare H^S_l with the projected teacher state H^T_r W_lr.

    hidden_mse: plain MSE; cos: 1 - mean token cosine; pkd: MSE of
    per-token L2-normalized vectors.
    """
    student_layer, teacher_layer = pair
    h_s = trace_s.hidden(student_layer)
    h_t = trace_t.hidden(teacher_layer).detach()
    if h_s.shape[:-1] != h_t.shape[:-1]:
        raise InputError(f"hidden loss: student {h_s.shape} and teacher {h_t.shape} cover different tokens")
    projected = matmul(h_t, bank.get(student_layer, teacher_layer))
    if variant == "hidden_mse":
        return mse(h_s, projected)
    if variant == "cos":
        cosine = reduce_sum(h_s * projected, axis=-1, keepdims=True) / (row_norm(h_s) * row_norm(projected))
        return 1.0 - reduce_mean(cosine)
    if variant == "pkd":
        return mse(normalize_rows(h_s), normalize_rows(projected))
    raise ParameterError(f"unknown hidden loss variant '{variant}'")


# ---------------------------------------------------------------------------
# Relation-based
# ---------------------------------------------------------------------------

def _hidden_pair(trace: FeatureTrace, layer: int, pair_mode: str) -> Tuple[Tensor, Tensor]:
    if pair_mode == "self":
        h = trace.hidden(layer)
        return h, h
    if pair_mode == "previous":
        if layer < 1:
            raise ConfigError([f"pair_mode 'previous' needs layer >= 1, got {layer}"])
        return trace.hidden(layer - 1), trace.hidden(layer)
    raise ConfigError([f"unknown pair_mode '{pair_mode}' (expected 'self' or 'previous')"])


def relation_loss(trace_t: FeatureTrace, trace_s: FeatureTrace, pair: LayerPair,
                  bank: Optional[ProjectionBank] = None, variant: str = "mmd",
                  pair_mode: str = "self") -> Tensor:
    """
    mmd: MSE between token-similarity matrices H1 H2^T (n x n).
    gram: MSE between feature Gram matrices H1^T H2 (d_S x d_S), teacher
    states projected through W_lr first.
    query/key/value_relation: per-head R = softmax(X X^T / sqrt(d_k)),
    row-wise KL(R^T || R^S) averaged over rows, heads and batch.
    """
    student_layer, teacher_layer = pair
    if variant in ("mmd", "gram"):
        s1, s2 = _hidden_pair(trace_s, student_layer, pair_mode)
        t1, t2 = _hidden_pair(trace_t, teacher_layer, pair_mode)
        t1, t2 = t1.detach(), t2.detach()
        if s1.shape[:-1] != t1.shape[:-1]:
            raise InputError(f"{variant}: student {s1.shape} and teacher {t1.shape} cover different tokens")
        if variant == "mmd":
            return mse(matmul(t1, _swap_last(t2)), matmul(s1, _swap_last(s2)))
        if bank is None:
            raise ConfigError(["gram relation needs a projection bank"])
        w = bank.get(student_layer, teacher_layer)
        p1, p2 = matmul(t1, w), matmul(t2, w)
        return mse(matmul(_swap_last(p1), p2), matmul(_swap_last(s1), s2))

    sources = {"query_relation": "query", "key_relation": "key", "value_relation": "value"}
    if variant not in sources:
        raise ParameterError(f"unknown relation loss variant '{variant}'")
    x_s = trace_s.relation_source(sources[variant], student_layer)
    x_t = trace_t.relation_source(sources[variant], teacher_layer).detach()
    if x_s.shape[-3] != x_t.shape[-3]:
        raise ConfigError([f"{variant} needs equal head counts: student has {x_s.shape[-3]}, "
                           f"teacher has {x_t.shape[-3]}"])
    if x_s.shape[-2] != x_t.shape[-2] or x_s.shape[:-3] != x_t.shape[:-3]:
        raise InputError(f"{variant}: student {x_s.shape} and teacher {x_t.shape} cover different tokens")
    r_s = self_relation(x_s)
    r_t = self_relation(x_t)
    return reduce_mean(kl_rows(r_t, r_s))


def self_relation(x: Tensor) -> Tensor:
    """softmax(X X^T / sqrt(d_k)) over the trailing token axis."""
    return softmax_rows(scale(matmul(x, _swap_last(x)), 1.0 / np.sqrt(x.shape[-1])))


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def knowledge_loss(kind, trace_t: FeatureTrace, trace_s: FeatureTrace, pair: LayerPair,
                   bank: Optional[ProjectionBank] = None, pair_mode: str = "self") -> Tensor:
    """Evaluate one feature- or relation-based kind on a (student, teacher) layer pair."""
    kind = KnowledgeKind.parse(kind)
    if kind is KnowledgeKind.SOFT_TARGET:
        raise ConfigError(["soft_target is the response loss, not a layer-pair term"])
    if KIND_INFO[kind].needs_projection and bank is None:
        raise ConfigError([f"{kind.value} needs a projection bank"])
    if kind is KnowledgeKind.ATTENTION_MSE:
        return attention_feature_loss(trace_t, trace_s, pair, "mse")
    if kind is KnowledgeKind.ATTENTION_CE:
        return attention_feature_loss(trace_t, trace_s, pair, "ce")
    if kind in (KnowledgeKind.HIDDEN_MSE, KnowledgeKind.COS, KnowledgeKind.PKD):
        return hidden_feature_loss(trace_t, trace_s, pair, bank, kind.value)
    return relation_loss(trace_t, trace_s, pair, bank, kind.value, pair_mode)
