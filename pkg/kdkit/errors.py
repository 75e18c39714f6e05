"""
Exception hierarchy shared by every kdkit layer.
"""
from typing import Iterable, List, Optional


class KDError(Exception):
    """Base class for all kdkit errors."""


class ShapeError(KDError):
    """Operand shapes do not fit the operation."""


class ParameterError(KDError):
    """A scalar parameter is outside its valid range (e.g. temperature <= 0)."""


class InputError(KDError):
    """Bad input data: out-of-vocab ids, over-long sequences, tiny corpora."""


class ContractError(KDError):
    """An API was called in a state it does not support."""


class NumericalError(KDError):
    """A forward operation produced NaN or Inf from finite inputs."""

    def __init__(self, message: str, term: Optional[str] = None):
        self.term = term
        super().__init__(message)

    def __reduce__(self):
        return type(self), (str(self), self.term)


class CheckpointError(KDError):
    """A checkpoint file is malformed or does not match the model."""


class ConfigError(KDError):
    """One or more configuration problems, reported together."""

    def __init__(self, messages: Iterable[str]):
        self.messages: List[str] = [str(m) for m in messages] or ["invalid configuration"]
        super().__init__("; ".join(self.messages))

    def __reduce__(self):
        return type(self), (self.messages,)


class DivergenceError(KDError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, term: str, value: float):
        self.step = step
        self.term = term
        self.value = value
        super().__init__(f"loss diverged at step {step}: term '{term}' = {value}")

    def __reduce__(self):
        return type(self), (self.step, self.term, self.value)
