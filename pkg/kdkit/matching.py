"""
Layer matching strategies: which student layer learns from which teacher layer.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from kdkit.errors import ConfigError

STRATEGIES = ("first", "last", "dilatation", "first_1", "last_1")


@dataclass(frozen=True)
class LayerPairPlan:
    """
    Ordered (student_layer, teacher_layer) pairs, strictly increasing on both
    sides. Layer 0 (the embedding output) appears only when requested.
    """
    pairs: Tuple[Tuple[int, int], ...]
    student_layers: int
    teacher_layers: int

    def __post_init__(self):
        problems = []
        previous = (-1, -1)
        for s, r in self.pairs:
            if not (0 <= s <= self.student_layers and 0 <= r <= self.teacher_layers):
                problems.append(f"pair ({s}, {r}) outside student 0..{self.student_layers} / "
                                f"teacher 0..{self.teacher_layers}")
            if s <= previous[0] or r <= previous[1]:
                problems.append(f"pair ({s}, {r}) breaks monotone alignment after {previous}")
            previous = (s, r)
        if problems:
            raise ConfigError(problems)

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self.pairs

    @property
    def student(self) -> List[int]:
        return [s for s, _ in self.pairs]

    @property
    def teacher(self) -> List[int]:
        return [r for _, r in self.pairs]


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def build_plan(teacher_layers: int, student_layers: int, strategy: str, k: Optional[int] = None,
               include_embeddings: bool = False) -> LayerPairPlan:
    """
    first:      (i, i)                         i = 1..k
    last:       (L_S - k + i, L_T - k + i)     i = 1..k
    dilatation: (i, ceil(i * L_T / L_S))       i = 1..L_S
    first_1:    [(1, 1)]
    last_1:     [(L_S, L_T)]

    ``k`` defaults to L_S. ``include_embeddings`` prepends (0, 0) without
    counting towards k.
    """
    if strategy not in STRATEGIES:
        raise ConfigError([f"unknown matching strategy '{strategy}' (expected one of: {', '.join(STRATEGIES)})"])
    if k is None:
        k = student_layers
    problems = []
    if student_layers < 1 or teacher_layers < 1:
        problems.append(f"layer counts must be positive, got L_T={teacher_layers}, L_S={student_layers}")
    if student_layers > teacher_layers:
        problems.append(f"student has more layers ({student_layers}) than teacher ({teacher_layers})")
    if not 1 <= k <= student_layers:
        problems.append(f"k={k} must lie in 1..L_S={student_layers}")
    if problems:
        raise ConfigError(problems)

    if strategy == "first":
        pairs = [(i, i) for i in range(1, k + 1)]
    elif strategy == "last":
        pairs = [(student_layers - k + i, teacher_layers - k + i) for i in range(1, k + 1)]
    elif strategy == "dilatation":
        pairs = [(i, _ceil_div(i * teacher_layers, student_layers)) for i in range(1, student_layers + 1)]
    elif strategy == "first_1":
        pairs = [(1, 1)]
    else:
        pairs = [(student_layers, teacher_layers)]
    if include_embeddings:
        pairs = [(0, 0)] + pairs
    return LayerPairPlan(tuple(pairs), student_layers, teacher_layers)


def explicit_plan(pairs: Sequence[Sequence[int]], teacher_layers: int, student_layers: int) -> LayerPairPlan:
    """A hand-written plan, validated like the built-in strategies."""
    return LayerPairPlan(tuple((int(s), int(r)) for s, r in pairs), student_layers, teacher_layers)
