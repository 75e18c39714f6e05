"""
Desk-scale tasks, a toy tokenizer and the evaluation metrics.

Three generators stand in for a benchmark suite:

- ``patterns``: classification from planted token motifs. With two labels
  the label says whether motif A precedes motif B; with more labels it says
  which of K motifs was planted.
- ``score``: regression; the target is a smooth function of how many
  "positive" and "negative" marker tokens a sequence holds.
- ``lm-stream``: an unlabeled corpus drawn from a seeded Markov grammar, for
  masked-LM pre-training and general distillation.

Every sequence is ``[CLS] content... [SEP]`` of a fixed length, so any subset
of a split stacks into an equal-length batch.
"""
import math
import os
import warnings
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from kdkit.errors import ConfigError, InputError
from kdkit.model import CLS_ID, MASK_ID, NUM_RESERVED_IDS, SEP_ID

TASK_NAMES = ("patterns", "score", "lm-stream")
IGNORE_INDEX = -100
RESERVED_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]")

MOTIF_LENGTH = 2
MARKERS_PER_SIDE = 4
MARKER_RATE = 0.3
GRAMMAR_BRANCHING = 3


@dataclass
class TaskSpec:
    name: str = "patterns"
    num_labels: int = 2
    seed: int = 0
    n_train: int = 1024
    n_dev: int = 256
    seq_len: int = 16
    vocab_size: int = 64

    @property
    def kind(self) -> str:
        return {"patterns": "classification", "score": "regression"}.get(self.name, "corpus")

    @property
    def metric(self) -> Optional[str]:
        return {"patterns": "accuracy", "score": "pearson"}.get(self.name)

    @property
    def model_labels(self) -> Union[int, str]:
        """The ModelConfig.num_labels value matching this task."""
        return "regression" if self.name == "score" else self.num_labels

    def problems(self) -> List[str]:
        problems = []
        if self.name not in TASK_NAMES:
            problems.append(f"unknown task '{self.name}' (expected one of: {', '.join(TASK_NAMES)})")
        if self.n_train < 1 or self.n_dev < 0:
            problems.append(f"split sizes must be positive, got train={self.n_train} dev={self.n_dev}")
        if self.seq_len < 2 * MOTIF_LENGTH + 4:
            problems.append(f"seq_len must be at least {2 * MOTIF_LENGTH + 4}, got {self.seq_len}")
        if self.name == "patterns":
            if self.num_labels < 2:
                problems.append(f"patterns needs at least 2 labels, got {self.num_labels}")
            motifs = 2 if self.num_labels == 2 else self.num_labels
            needed = NUM_RESERVED_IDS + motifs * MOTIF_LENGTH + 2
            if self.vocab_size < needed:
                problems.append(f"vocab_size {self.vocab_size} too small for {motifs} motifs (need {needed})")
        elif self.vocab_size < NUM_RESERVED_IDS + 2 * MARKERS_PER_SIDE + 2:
            problems.append(f"vocab_size {self.vocab_size} too small for task '{self.name}'")
        return problems

    def validate(self) -> "TaskSpec":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TaskDataset:
    spec: TaskSpec
    train_ids: np.ndarray
    train_labels: np.ndarray
    dev_ids: np.ndarray
    dev_labels: np.ndarray

    def split(self, name: str):
        if name == "train":
            return self.train_ids, self.train_labels
        if name == "dev":
            return self.dev_ids, self.dev_labels
        raise InputError(f"unknown split '{name}' (expected 'train' or 'dev')")

    @property
    def is_regression(self) -> bool:
        return self.spec.kind == "regression"

    def __len__(self) -> int:
        return len(self.train_ids)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

class _UniqueSampler:
    """Draws sequences until they are new across both splits."""

    def __init__(self, draw, limit: int):
        self.draw = draw
        self.seen = set()
        self.limit = limit

    def __call__(self, *args) -> np.ndarray:
        for _ in range(self.limit):
            sequence = self.draw(*args)
            key = sequence.tobytes()
            if key not in self.seen:
                self.seen.add(key)
                return sequence
        raise InputError("task generator ran out of distinct sequences; raise vocab_size or seq_len")


def _wrap(content: np.ndarray) -> np.ndarray:
    return np.concatenate([[CLS_ID], content, [SEP_ID]]).astype(np.int64)


def _patterns(spec: TaskSpec, rng: np.random.Generator, count: int, sampler_limit: int = 1000):
    content_len = spec.seq_len - 2
    num_motifs = 2 if spec.num_labels == 2 else spec.num_labels
    content_ids = np.arange(NUM_RESERVED_IDS, spec.vocab_size)
    motif_tokens = rng.choice(content_ids, size=num_motifs * MOTIF_LENGTH, replace=False)
    motifs = motif_tokens.reshape(num_motifs, MOTIF_LENGTH)
    background = np.setdiff1d(content_ids, motif_tokens)

    def draw(label: int) -> np.ndarray:
        content = rng.choice(background, size=content_len)
        if spec.num_labels == 2:
            first = rng.integers(0, content_len - 2 * MOTIF_LENGTH + 1)
            second = rng.integers(first + MOTIF_LENGTH, content_len - MOTIF_LENGTH + 1)
            early, late = (motifs[0], motifs[1]) if label == 1 else (motifs[1], motifs[0])
            content[first:first + MOTIF_LENGTH] = early
            content[second:second + MOTIF_LENGTH] = late
        else:
            start = rng.integers(0, content_len - MOTIF_LENGTH + 1)
            content[start:start + MOTIF_LENGTH] = motifs[label]
        return _wrap(content)

    labels = rng.permutation(np.arange(count) % spec.num_labels)
    sampler = _UniqueSampler(draw, sampler_limit)
    ids = np.stack([sampler(int(label)) for label in labels])
    return ids, labels.astype(np.int64)


def _score(spec: TaskSpec, rng: np.random.Generator, count: int, sampler_limit: int = 1000):
    content_len = spec.seq_len - 2
    content_ids = np.arange(NUM_RESERVED_IDS, spec.vocab_size)
    markers = rng.choice(content_ids, size=2 * MARKERS_PER_SIDE, replace=False)
    positive, negative = markers[:MARKERS_PER_SIDE], markers[MARKERS_PER_SIDE:]
    background = np.setdiff1d(content_ids, markers)

    def draw() -> np.ndarray:
        content = rng.choice(background, size=content_len)
        marked = rng.random(content_len) < MARKER_RATE
        content[marked] = rng.choice(markers, size=int(marked.sum()))
        return _wrap(content)

    sampler = _UniqueSampler(draw, sampler_limit)
    ids = np.stack([sampler() for _ in range(count)])
    balance = np.isin(ids, positive).sum(axis=1) - np.isin(ids, negative).sum(axis=1)
    labels = np.tanh(balance / math.sqrt(content_len * MARKER_RATE))
    return ids, labels.astype(np.float64)


def _lm_stream(spec: TaskSpec, rng: np.random.Generator, count: int, sampler_limit: int = 1000):
    content_len = spec.seq_len - 2
    content_ids = np.arange(NUM_RESERVED_IDS, spec.vocab_size)
    successors = np.stack([rng.choice(content_ids, size=GRAMMAR_BRANCHING, replace=False)
                           for _ in content_ids])
    weights = rng.dirichlet(np.ones(GRAMMAR_BRANCHING), size=len(content_ids))

    def draw() -> np.ndarray:
        content = np.empty(content_len, dtype=np.int64)
        content[0] = rng.choice(content_ids)
        for i in range(1, content_len):
            row = content[i - 1] - NUM_RESERVED_IDS
            content[i] = successors[row][rng.choice(GRAMMAR_BRANCHING, p=weights[row])]
        return _wrap(content)

    sampler = _UniqueSampler(draw, sampler_limit)
    ids = np.stack([sampler() for _ in range(count)])
    return ids, np.zeros(count, dtype=np.int64)


_GENERATORS = {"patterns": _patterns, "score": _score, "lm-stream": _lm_stream}


def generate_task(spec: TaskSpec) -> TaskDataset:
    """Build train and dev splits; a pure function of ``spec``. The splits share no sequence."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    ids, labels = _GENERATORS[spec.name](spec, rng, spec.n_train + spec.n_dev)
    cut = spec.n_train
    return TaskDataset(spec, ids[:cut], labels[:cut], ids[cut:], labels[cut:])


def lm_corpus(vocab_size: int = 64, seq_len: int = 16, size: int = 1024, seed: int = 0) -> np.ndarray:
    """Token-id matrix of an ``lm-stream`` corpus."""
    spec = TaskSpec("lm-stream", seed=seed, n_train=size, n_dev=0, seq_len=seq_len, vocab_size=vocab_size)
    return generate_task(spec).train_ids


def export_dataset(dataset: TaskDataset, path: str) -> str:
    """
    Write one tab-separated record per example: split, space-joined token
    ids, label. Train rows come first.
    """
    frames = []
    for split in ("train", "dev"):
        ids, labels = dataset.split(split)
        frames.append(pd.DataFrame({
            "split": split,
            "ids": [" ".join(str(int(t)) for t in row) for row in ids],
            "label": labels,
        }))
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    pd.concat(frames, ignore_index=True).to_csv(path, sep="\t", index=False)
    return path


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

class ToyTokenizer:
    """Whitespace tokenizer over the synthetic vocabulary ``w4 .. w{V-1}``."""

    def __init__(self, vocab_size: int = 64):
        if vocab_size <= NUM_RESERVED_IDS:
            raise InputError(f"vocab_size must exceed the {NUM_RESERVED_IDS} reserved ids, got {vocab_size}")
        self.vocab_size = vocab_size
        self.tokens = list(RESERVED_TOKENS) + [f"w{i}" for i in range(NUM_RESERVED_IDS, vocab_size)]
        self.ids = {token: i for i, token in enumerate(self.tokens)}

    def encode(self, text: str, max_len: Optional[int] = None) -> np.ndarray:
        body = []
        for word in text.split():
            if word not in self.ids:
                raise InputError(f"unknown token '{word}'")
            body.append(self.ids[word])
        ids = [CLS_ID] + body + [SEP_ID]
        if max_len is not None and len(ids) > max_len:
            raise InputError(f"encoded length {len(ids)} exceeds max_len {max_len}")
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> str:
        words = []
        for token_id in ids:
            token_id = int(token_id)
            if not 0 <= token_id < self.vocab_size:
                raise InputError(f"token id {token_id} is outside the vocabulary [0, {self.vocab_size})")
            if skip_special and token_id < NUM_RESERVED_IDS:
                continue
            words.append(self.tokens[token_id])
        return " ".join(words)


# ---------------------------------------------------------------------------
# Masked-LM corruption
# ---------------------------------------------------------------------------

def mask_tokens(ids, seed: Union[int, np.random.Generator], vocab_size: int, prob: float = 0.15):
    """
    Select ``prob`` of the content positions; of those 80% become [MASK],
    10% a random content id and 10% stay. Returns (masked ids, targets) with
    targets equal to IGNORE_INDEX outside the selected positions. Reserved
    ids ([PAD], [CLS], [SEP], [MASK]) are never selected. A batch with
    content but no selection gets one forced selection.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = np.asarray(ids, dtype=np.int64)
    candidates = ids >= NUM_RESERVED_IDS
    selected = (rng.random(ids.shape) < prob) & candidates
    if not selected.any() and candidates.any():
        flat = np.flatnonzero(candidates)
        selected.reshape(-1)[rng.choice(flat)] = True

    action = rng.random(ids.shape)
    random_ids = rng.integers(NUM_RESERVED_IDS, vocab_size, size=ids.shape)
    masked = ids.copy()
    masked[selected & (action < 0.8)] = MASK_ID
    swap = selected & (action >= 0.8) & (action < 0.9)
    masked[swap] = random_ids[swap]
    targets = np.where(selected, ids, IGNORE_INDEX)
    return masked, targets


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def accuracy(preds, labels) -> float:
    """Fraction of matches; ``preds`` may be class ids or a [B, K] score matrix."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.ndim == 2:
        preds = preds.argmax(axis=-1)
    if preds.shape != labels.shape or labels.size == 0:
        raise InputError(f"accuracy needs equal non-empty inputs, got {preds.shape} and {labels.shape}")
    return float(np.mean(preds == labels))


def pearson(preds, labels) -> float:
    """Sample Pearson correlation; 0 with a RuntimeWarning when either side is constant."""
    x = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if x.shape != y.shape or x.size < 2:
        raise InputError(f"pearson needs two equal-length inputs of length >= 2, got {x.size} and {y.size}")
    x = x - x.mean()
    y = y - y.mean()
    sx = math.sqrt(float(x @ x) / (x.size - 1))
    sy = math.sqrt(float(y @ y) / (y.size - 1))
    if sx == 0.0 or sy == 0.0:
        warnings.warn("pearson: zero-variance input, correlation defined as 0", RuntimeWarning)
        return 0.0
    r = float(x @ y) / (x.size - 1) / (sx * sy)
    return max(-1.0, min(1.0, r))


METRICS = {"accuracy": accuracy, "pearson": pearson}


def score_predictions(spec: TaskSpec, preds, labels) -> float:
    if spec.metric is None:
        raise InputError(f"task '{spec.name}' has no evaluation metric")
    return METRICS[spec.metric](preds, labels)


def iterate_batches(num_examples: int, batch_size: int, steps: int, seed: int) -> Iterator[np.ndarray]:
    """``steps`` index batches from reshuffled passes over the examples; short tails are dropped."""
    if batch_size < 1:
        raise InputError(f"batch_size must be positive, got {batch_size}")
    if num_examples < batch_size:
        raise InputError(f"{num_examples} examples cannot fill one batch of {batch_size}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(num_examples)
    cursor = 0
    for _ in range(steps):
        if cursor + batch_size > num_examples:
            order = rng.permutation(num_examples)
            cursor = 0
        yield order[cursor:cursor + batch_size]
        cursor += batch_size
