"""kdkit: knowledge distillation for transformer encoders."""
from kdkit.errors import (CheckpointError, ConfigError, ContractError, DivergenceError, InputError, KDError,
                          NumericalError, ParameterError, ShapeError)
from kdkit.losses import KnowledgeKind, ProjectionBank
from kdkit.matching import STRATEGIES, build_plan
from kdkit.model import ModelConfig, TransformerModel, count_parameters, estimate_flops
from kdkit.objective import DistillObjective, KnowledgeTerm, total_loss

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "ContractError", "DivergenceError", "InputError", "KDError",
    "NumericalError", "ParameterError", "ShapeError",
    "KnowledgeKind", "ProjectionBank", "STRATEGIES", "build_plan",
    "ModelConfig", "TransformerModel", "count_parameters", "estimate_flops",
    "DistillObjective", "KnowledgeTerm", "total_loss",
]
