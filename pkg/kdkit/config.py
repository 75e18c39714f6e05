"""
Experiment configuration: a JSON document with nested sections.

    {
      "name": "...", "seed": 0, "out": "runs/...", "verbose": true,
      "task":      {"name": "patterns", "num_labels": 2, ...},
      "teacher":   {"model": {...}, "checkpoint": null, "pretrain_steps": 0,
                    "schedule": {...}, "optimizer": {...}},
      "student":   {"num_layers": 2, "hidden_dim": 32, "num_heads": 2, ...},
      "init":      {"scheme": "random", "steps": 0, "strategy": "dilatation", ...},
      "objective": {"temperature": 1.0, "hard_weight": 0.0,
                    "terms": [{"kind": "hidden_mse", "strategy": "last", "weight": 1.0}]},
      "optimizer": {"lr": 5e-4, "weight_decay": 0.01, "warmup_frac": 0.1},
      "schedule":  {"steps": 200, "batch_size": 32, "eval_every": 0},
      "sweep":     {"preset": "grid", "axes": {...}},
      "size":      {"budget": {"params": 6200000}, "depths": [...], "widths": [...]}
    }

Model sections inherit ``vocab_size`` and ``num_labels`` from the task and
``max_seq_len`` = 32 unless they set them. Every section is read with
defaults; problems from all sections and all cross-field checks are
collected and raised together as one ConfigError before any compute.
"""
import copy
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from kdkit.errors import ConfigError
from kdkit.init_schemes import INIT_SCHEMES, InitScheme, preload_problems
from kdkit.losses import KnowledgeKind
from kdkit.matching import STRATEGIES, LayerPairPlan, build_plan, explicit_plan
from kdkit.model import ModelConfig
from kdkit.objective import DistillObjective, KnowledgeTerm
from kdkit.sizing import DEFAULT_DEPTHS, DEFAULT_TOLERANCE, DEFAULT_WIDTHS
from kdkit.tasks import TaskSpec
from kdkit.trainer import TrainSchedule

DEFAULT_MAX_SEQ_LEN = 32
ECHO_FILE = "config_echo.json"
SECTIONS = ("task", "teacher", "student", "init", "objective", "optimizer", "schedule", "sweep", "size")
TOP_LEVEL = ("name", "seed", "out", "verbose") + SECTIONS


def _unknown(section: str, data: Mapping, known: Sequence[str]) -> List[str]:
    return [f"{section}: unknown key '{key}'" for key in sorted(set(data) - set(known))]


@dataclass
class TermConfig:
    kind: str
    strategy: str = "last"
    k: Optional[int] = None
    weight: float = 1.0
    pair_mode: str = "self"
    include_embeddings: bool = False
    pairs: Optional[List[Tuple[int, int]]] = None

    @classmethod
    def from_dict(cls, data: Mapping, section: str = "objective") -> "TermConfig":
        problems = _unknown(f"{section}.terms", data, [f for f in cls.__dataclass_fields__])
        if "kind" not in data:
            problems.append(f"{section}.terms: every term needs a 'kind'")
        if problems:
            raise ConfigError(problems)
        pairs = data.get("pairs")
        term = cls(kind=str(data["kind"]), strategy=data.get("strategy", "last"), k=data.get("k"),
                   weight=float(data.get("weight", 1.0)), pair_mode=data.get("pair_mode", "self"),
                   include_embeddings=bool(data.get("include_embeddings", False)),
                   pairs=[tuple(p) for p in pairs] if pairs is not None else None)
        problems = term.problems()
        if problems:
            raise ConfigError([f"{section}: term {term.kind}: {m}" for m in problems])
        return term

    def problems(self) -> List[str]:
        """Checks that need no architecture: kind, strategy, weight, pair mode."""
        problems = []
        try:
            if KnowledgeKind.parse(self.kind) is KnowledgeKind.SOFT_TARGET:
                problems.append("soft_target is the standing response loss and cannot be a layer term")
        except ConfigError as exc:
            problems.extend(exc.messages)
        if self.pairs is None and self.strategy not in STRATEGIES:
            problems.append(f"unknown matching strategy '{self.strategy}' (expected one of: {', '.join(STRATEGIES)})")
        if self.weight < 0:
            problems.append(f"weight must be non-negative, got {self.weight}")
        if self.pair_mode not in ("self", "previous"):
            problems.append(f"unknown pair_mode '{self.pair_mode}'")
        return problems

    def plan(self, teacher: ModelConfig, student: ModelConfig) -> LayerPairPlan:
        if self.pairs is not None:
            return explicit_plan(self.pairs, teacher.num_layers, student.num_layers)
        return build_plan(teacher.num_layers, student.num_layers, self.strategy, self.k, self.include_embeddings)

    def to_dict(self) -> Dict:
        data = asdict(self)
        if self.pairs is not None:
            data["pairs"] = [list(p) for p in self.pairs]
        return data


@dataclass
class ObjectiveConfig:
    temperature: float = 1.0
    hard_weight: float = 0.0
    soft_weight: float = 1.0
    terms: List[TermConfig] = field(default_factory=list)
    auto_weight: bool = False
    auto_weight_ratio: float = 0.1
    projection_init: str = "identity"

    @classmethod
    def from_dict(cls, data: Optional[Mapping], section: str = "objective") -> "ObjectiveConfig":
        data = data or {}
        problems = _unknown(section, data, [f for f in cls.__dataclass_fields__])
        terms = []
        for raw in data.get("terms", []):
            try:
                terms.append(TermConfig.from_dict(raw, section))
            except ConfigError as exc:
                problems.extend(exc.messages)
        objective = cls(temperature=float(data.get("temperature", 1.0)),
                        hard_weight=float(data.get("hard_weight", 0.0)),
                        soft_weight=float(data.get("soft_weight", 1.0)), terms=terms,
                        auto_weight=bool(data.get("auto_weight", False)),
                        auto_weight_ratio=float(data.get("auto_weight_ratio", 0.1)),
                        projection_init=data.get("projection_init", "identity"))
        problems.extend(f"{section}: {m}" for m in objective.problems())
        if problems:
            raise ConfigError(problems)
        return objective

    def problems(self) -> List[str]:
        problems = []
        if not self.temperature > 0:
            problems.append(f"temperature must be positive, got {self.temperature}")
        if self.hard_weight < 0:
            problems.append(f"hard_weight must be non-negative, got {self.hard_weight}")
        if self.soft_weight < 0:
            problems.append(f"soft_weight must be non-negative, got {self.soft_weight}")
        if self.projection_init not in ("identity", "random"):
            problems.append(f"projection_init must be 'identity' or 'random', got '{self.projection_init}'")
        if self.auto_weight_ratio <= 0:
            problems.append(f"auto_weight_ratio must be positive, got {self.auto_weight_ratio}")
        return problems

    def build(self, teacher: ModelConfig, student: ModelConfig) -> DistillObjective:
        """Resolve every term's layer plan into concrete KnowledgeTerms and validate them."""
        problems = self.problems()
        terms = []
        for term in self.terms:
            try:
                kind = KnowledgeKind.parse(term.kind)
                for s, r in term.plan(teacher, student):
                    terms.append(KnowledgeTerm(kind, s, r, term.weight, term.pair_mode))
            except ConfigError as exc:
                problems.extend(f"term {term.kind}: {m}" for m in exc.messages)
        if problems:
            raise ConfigError(problems)
        return DistillObjective(self.temperature, self.hard_weight, terms, self.soft_weight,
                                teacher=teacher, student=student)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["terms"] = [t.to_dict() for t in self.terms]
        return data


@dataclass
class OptimizerConfig:
    lr: float = 5e-4
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_frac: float = 0.1

    @classmethod
    def from_dict(cls, data: Optional[Mapping], base: Optional["OptimizerConfig"] = None,
                  section: str = "optimizer") -> "OptimizerConfig":
        data = data or {}
        base = base or cls()
        problems = _unknown(section, data, [f for f in cls.__dataclass_fields__])
        if problems:
            raise ConfigError(problems)
        return cls(lr=float(data.get("lr", base.lr)), weight_decay=float(data.get("weight_decay", base.weight_decay)),
                   betas=tuple(data.get("betas", base.betas)), eps=float(data.get("eps", base.eps)),
                   warmup_frac=float(data.get("warmup_frac", base.warmup_frac)))

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data


@dataclass
class ScheduleConfig:
    steps: int = 200
    batch_size: int = 32
    eval_every: int = 0

    @classmethod
    def from_dict(cls, data: Optional[Mapping], base: Optional["ScheduleConfig"] = None,
                  section: str = "schedule") -> "ScheduleConfig":
        data = data or {}
        base = base or cls()
        problems = _unknown(section, data, [f for f in cls.__dataclass_fields__])
        if problems:
            raise ConfigError(problems)
        return cls(steps=int(data.get("steps", base.steps)), batch_size=int(data.get("batch_size", base.batch_size)),
                   eval_every=int(data.get("eval_every", base.eval_every)))

    def to_dict(self) -> Dict:
        return asdict(self)


def make_schedule(schedule: ScheduleConfig, optimizer: OptimizerConfig, seed: int) -> TrainSchedule:
    return TrainSchedule(steps=schedule.steps, batch_size=schedule.batch_size, lr=optimizer.lr,
                         warmup_frac=optimizer.warmup_frac, weight_decay=optimizer.weight_decay,
                         betas=tuple(optimizer.betas), eps=optimizer.eps, eval_every=schedule.eval_every, seed=seed)


@dataclass
class TeacherConfig:
    model: ModelConfig
    checkpoint: Optional[str] = None
    pretrain_steps: int = 0
    seed: Optional[int] = None
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def to_dict(self) -> Dict:
        return {"model": self.model.to_dict(), "checkpoint": self.checkpoint, "pretrain_steps": self.pretrain_steps,
                "seed": self.seed,
                "schedule": self.schedule.to_dict(), "optimizer": self.optimizer.to_dict()}


@dataclass
class InitConfig:
    scheme: str = "random"
    stddev: float = 0.02
    steps: int = 0
    corpus_size: int = 1024
    strategy: str = "dilatation"
    copy_heads: bool = False
    checkpoint: Optional[str] = None
    objective: Optional[ObjectiveConfig] = None

    @classmethod
    def from_dict(cls, data: Optional[Mapping]) -> "InitConfig":
        data = data or {}
        problems = _unknown("init", data, [f for f in cls.__dataclass_fields__])
        objective = None
        if data.get("objective") is not None:
            try:
                objective = ObjectiveConfig.from_dict(data["objective"], "init.objective")
            except ConfigError as exc:
                problems.extend(exc.messages)
        init = cls(scheme=data.get("scheme", "random"), stddev=float(data.get("stddev", 0.02)),
                   steps=int(data.get("steps", 0)), corpus_size=int(data.get("corpus_size", 1024)),
                   strategy=data.get("strategy", "dilatation"), copy_heads=bool(data.get("copy_heads", False)),
                   checkpoint=data.get("checkpoint"), objective=objective)
        if init.scheme not in INIT_SCHEMES:
            problems.append(f"init: unknown scheme '{init.scheme}' (expected one of: {', '.join(INIT_SCHEMES)})")
        if init.scheme == "preload" and init.strategy not in STRATEGIES:
            problems.append(f"init: unknown preload strategy '{init.strategy}'")
        if init.stddev < 0:
            problems.append(f"init: stddev must be non-negative, got {init.stddev}")
        if init.steps < 0:
            problems.append(f"init: steps must be non-negative, got {init.steps}")
        if problems:
            raise ConfigError(problems)
        return init

    def build(self, seed: int, seq_len: int, teacher: ModelConfig, student: ModelConfig) -> InitScheme:
        objective = None
        if self.scheme == "general_distillation":
            objective = (self.objective or ObjectiveConfig(hard_weight=1.0)).build(teacher, student)
        return InitScheme(name=self.scheme, seed=seed, stddev=self.stddev, steps=self.steps,
                          corpus_size=self.corpus_size, seq_len=seq_len, strategy=self.strategy,
                          copy_heads=self.copy_heads, objective=objective)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["objective"] = self.objective.to_dict() if self.objective is not None else None
        return data


@dataclass
class SweepConfig:
    preset: Optional[str] = None
    axes: Dict[str, List[Any]] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {"preset": self.preset, "axes": copy.deepcopy(self.axes)}


@dataclass
class SizeConfig:
    budget: Dict[str, float] = field(default_factory=lambda: {"params": 6_200_000})
    depths: List[int] = field(default_factory=lambda: list(DEFAULT_DEPTHS))
    widths: List[int] = field(default_factory=lambda: list(DEFAULT_WIDTHS))
    tolerance: float = DEFAULT_TOLERANCE
    vocab_size: int = 30522
    max_seq_len: int = 512
    n: int = 128

    @classmethod
    def from_dict(cls, data: Optional[Mapping]) -> "SizeConfig":
        data = data or {}
        problems = _unknown("size", data, [f for f in cls.__dataclass_fields__])
        if problems:
            raise ConfigError(problems)
        base = cls()
        return cls(budget=dict(data.get("budget", base.budget)), depths=list(data.get("depths", base.depths)),
                   widths=list(data.get("widths", base.widths)), tolerance=float(data.get("tolerance", base.tolerance)),
                   vocab_size=int(data.get("vocab_size", base.vocab_size)),
                   max_seq_len=int(data.get("max_seq_len", base.max_seq_len)), n=int(data.get("n", base.n)))

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class ExperimentConfig:
    task: TaskSpec
    teacher: TeacherConfig
    student: ModelConfig
    name: str = "experiment"
    seed: int = 0
    out: str = "runs/experiment"
    verbose: bool = True
    init: InitConfig = field(default_factory=InitConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    size: SizeConfig = field(default_factory=SizeConfig)

    # -- derived objects ----------------------------------------------------
    def build_objective(self) -> DistillObjective:
        return self.objective.build(self.teacher.model, self.student)

    def build_init(self) -> InitScheme:
        return self.init.build(self.seed, self.task.seq_len, self.teacher.model, self.student)

    def student_schedule(self) -> TrainSchedule:
        return make_schedule(self.schedule, self.optimizer, self.seed)

    @property
    def teacher_seed(self) -> int:
        """The teacher's own seed when set, so seed sweeps can share one teacher."""
        return self.seed if self.teacher.seed is None else int(self.teacher.seed)

    def teacher_schedule(self) -> TrainSchedule:
        return make_schedule(self.teacher.schedule, self.teacher.optimizer, self.teacher_seed)

    # -- (de)serialization --------------------------------------------------
    def to_dict(self) -> Dict:
        return {
            "name": self.name, "seed": self.seed, "out": self.out, "verbose": self.verbose,
            "task": self.task.to_dict(), "teacher": self.teacher.to_dict(), "student": self.student.to_dict(),
            "init": self.init.to_dict(), "objective": self.objective.to_dict(),
            "optimizer": self.optimizer.to_dict(), "schedule": self.schedule.to_dict(),
            "sweep": self.sweep.to_dict(), "size": self.size.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        return parse_config(data)

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                       verbose: Optional[bool] = None) -> "ExperimentConfig":
        data = self.to_dict()
        if seed is not None:
            data["seed"] = int(seed)
        if out is not None:
            data["out"] = out
        if verbose is not None:
            data["verbose"] = verbose
        return parse_config(data)


def _model_section(data: Optional[Mapping], task: Optional[TaskSpec], section: str) -> ModelConfig:
    data = dict(data or {})
    if task is not None:
        data.setdefault("vocab_size", task.vocab_size)
        data.setdefault("num_labels", task.model_labels)
    data.setdefault("max_seq_len", DEFAULT_MAX_SEQ_LEN)
    try:
        return ModelConfig.from_dict(data)
    except ConfigError as exc:
        raise ConfigError([f"{section}: {m}" for m in exc.messages]) from None
    except TypeError as exc:
        raise ConfigError([f"{section}: {exc}"]) from None


def _collect(problems: List[str], build, *args):
    try:
        return build(*args)
    except ConfigError as exc:
        problems.extend(exc.messages)
    except (TypeError, ValueError) as exc:
        problems.append(str(exc))
    return None


def _task_section(data: Optional[Mapping]) -> TaskSpec:
    data = dict(data or {})
    problems = _unknown("task", data, [f for f in TaskSpec.__dataclass_fields__])
    if problems:
        raise ConfigError(problems)
    spec = TaskSpec(**data)
    problems = spec.problems()
    if problems:
        raise ConfigError([f"task: {m}" for m in problems])
    return spec


def _teacher_section(data: Optional[Mapping], task: Optional[TaskSpec], schedule: ScheduleConfig,
                     optimizer: OptimizerConfig) -> TeacherConfig:
    data = dict(data or {})
    problems = _unknown("teacher", data, ("model", "checkpoint", "pretrain_steps", "seed", "schedule", "optimizer"))
    if problems:
        raise ConfigError(problems)
    model = _model_section(data.get("model"), task, "teacher.model")
    return TeacherConfig(model=model, checkpoint=data.get("checkpoint"),
                         pretrain_steps=int(data.get("pretrain_steps", 0)),
                         seed=data.get("seed"),
                         schedule=ScheduleConfig.from_dict(data.get("schedule"), schedule, "teacher.schedule"),
                         optimizer=OptimizerConfig.from_dict(data.get("optimizer"), optimizer, "teacher.optimizer"))


def _sweep_section(data: Optional[Mapping]) -> SweepConfig:
    data = dict(data or {})
    problems = _unknown("sweep", data, ("preset", "axes"))
    axes = data.get("axes", {}) or {}
    if not isinstance(axes, Mapping):
        problems.append("sweep.axes must be an object mapping axis names to value lists")
        axes = {}
    for name, values in axes.items():
        if not isinstance(values, (list, dict)) or (isinstance(values, list) and not values):
            problems.append(f"sweep.axes.{name} must be a non-empty list")
    if problems:
        raise ConfigError(problems)
    return SweepConfig(preset=data.get("preset"), axes=dict(axes))


def parse_config(data: Mapping) -> ExperimentConfig:
    """Build and cross-validate an ExperimentConfig, reporting every problem at once."""
    if not isinstance(data, Mapping):
        raise ConfigError(["config document must be a JSON object"])
    problems = [f"unknown top-level key '{key}'" for key in sorted(set(data) - set(TOP_LEVEL))]

    task = _collect(problems, _task_section, data.get("task"))
    optimizer = _collect(problems, OptimizerConfig.from_dict, data.get("optimizer")) or OptimizerConfig()
    schedule = _collect(problems, ScheduleConfig.from_dict, data.get("schedule")) or ScheduleConfig()
    teacher = _collect(problems, _teacher_section, data.get("teacher"), task, schedule, optimizer)
    student_data = dict(data.get("student") or {})
    init = _collect(problems, InitConfig.from_dict, data.get("init")) or InitConfig()
    if init.scheme in ("pretrain", "general_distillation"):
        student_data.setdefault("mlm_head", True)
    student = _collect(problems, _model_section, student_data, task, "student")
    objective = _collect(problems, ObjectiveConfig.from_dict, data.get("objective")) or ObjectiveConfig()
    sweep = _collect(problems, _sweep_section, data.get("sweep")) or SweepConfig()
    size = _collect(problems, SizeConfig.from_dict, data.get("size")) or SizeConfig()

    _collect(problems, make_schedule, schedule, optimizer, 0)
    if teacher is not None:
        _collect(problems, make_schedule, teacher.schedule, teacher.optimizer, 0)
        problems.extend(teacher_problems(teacher, init))
    if task is not None and teacher is not None and student is not None:
        problems.extend(cross_problems(task, teacher, student, init, objective))
    for key in ("seed",):
        if key in data and (not isinstance(data[key], int) or data[key] < 0):
            problems.append(f"seed must be a non-negative integer, got {data[key]!r}")
    if problems:
        raise ConfigError(problems)

    return ExperimentConfig(task=task, teacher=teacher, student=student, name=str(data.get("name", "experiment")),
                            seed=int(data.get("seed", 0)), out=str(data.get("out", "runs/experiment")),
                            verbose=bool(data.get("verbose", True)), init=init, objective=objective,
                            optimizer=optimizer, schedule=schedule, sweep=sweep, size=size)


def cross_problems(task: TaskSpec, teacher: TeacherConfig, student: ModelConfig, init: InitConfig,
                   objective: ObjectiveConfig) -> List[str]:
    """Checks spanning sections: shared vocabulary, sequence lengths, layer plans, pre-load dims."""
    problems = []
    t_model = teacher.model
    for role, model in (("teacher", t_model), ("student", student)):
        if model.vocab_size != task.vocab_size:
            problems.append(f"{role}.vocab_size {model.vocab_size} != task.vocab_size {task.vocab_size}")
        if model.max_seq_len < task.seq_len:
            problems.append(f"{role}.max_seq_len {model.max_seq_len} < task.seq_len {task.seq_len}")
        if task.kind != "corpus" and model.num_labels != task.model_labels:
            problems.append(f"{role}.num_labels {model.num_labels!r} does not fit task '{task.name}' "
                            f"({task.model_labels!r})")
    try:
        objective.build(t_model, student)
    except ConfigError as exc:
        problems.extend(f"objective: {m}" for m in exc.messages)

    if init.scheme == "preload":
        problems.extend(f"init: {m}" for m in preload_problems(student, t_model))
        if student.num_layers > t_model.num_layers:
            problems.append(f"init: cannot pre-load {student.num_layers} student layers from "
                            f"{t_model.num_layers} teacher layers")
    if init.scheme == "general_distillation":
        init_objective = init.objective or ObjectiveConfig(hard_weight=1.0)
        try:
            init_objective.build(t_model, student)
        except ConfigError as exc:
            problems.extend(f"init.objective: {m}" for m in exc.messages)
    return problems


def teacher_problems(teacher: TeacherConfig, init: InitConfig) -> List[str]:
    """Uses of the teacher's MLM head; needs no student."""
    problems = []
    if init.scheme == "general_distillation":
        init_objective = init.objective or ObjectiveConfig(hard_weight=1.0)
        if init_objective.soft_weight > 0 and not teacher.model.mlm_head:
            problems.append("init: general distillation with a soft target needs teacher.model.mlm_head: true")
    if not teacher.model.mlm_head and teacher.pretrain_steps > 0:
        problems.append("teacher.pretrain_steps needs teacher.model.mlm_head: true")
    return problems


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    return parse_config(data)


def write_config_echo(config: ExperimentConfig, out_dir: Optional[str] = None) -> str:
    """Write the fully-resolved config; loading it back reproduces the run."""
    out_dir = out_dir or config.out
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, ECHO_FILE)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(config.to_dict(), handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path
