"""
AdamW with decoupled weight decay and a linear warmup/decay schedule.
"""
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from kdkit.errors import ParameterError
from kdkit.tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 5e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        beta1, beta2 = self.betas
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ParameterError(f"invalid AdamW settings lr={self.lr} eps={self.eps} "
                                 f"weight_decay={self.weight_decay}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ParameterError(f"AdamW betas must lie in [0, 1), got {self.betas}")


def init_state(params: Mapping[str, Tensor], **settings) -> OptimizerState:
    state = OptimizerState(**settings)
    for name, tensor in params.items():
        state.m[name] = np.zeros(tensor.shape, dtype=np.float64)
        state.v[name] = np.zeros(tensor.shape, dtype=np.float64)
    return state


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, Optional[np.ndarray]],
               state: OptimizerState) -> None:
    """
    m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + lambda * theta)

    A missing gradient counts as zero. Moments are kept in float64.
    """
    beta1, beta2 = state.betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, tensor in params.items():
        grad = grads.get(name)
        grad = np.zeros(tensor.shape) if grad is None else np.asarray(grad, dtype=np.float64)
        if name not in state.m:
            state.m[name] = np.zeros(tensor.shape, dtype=np.float64)
            state.v[name] = np.zeros(tensor.shape, dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        update = state.lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * tensor.data)
        tensor.data -= update.astype(tensor.dtype)


class AdamW:
    """Binds ``adamw_step`` to a fixed set of named parameters."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params: Dict[str, Tensor] = dict(params)
        self.state = init_state(self.params, lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def set_lr(self, lr: float) -> None:
        self.state.lr = lr

    def step(self) -> None:
        adamw_step(self.params, {name: t.grad for name, t in self.params.items()}, self.state)


def linear_schedule(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.1) -> float:
    """Learning rate for 0-based ``step``: linear warmup over ``warmup_frac`` of training, then linear decay to 0."""
    if total_steps <= 0:
        return base_lr
    warmup = int(round(warmup_frac * total_steps))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    remaining = total_steps - warmup
    return base_lr * max(0.0, (total_steps - step) / remaining)

