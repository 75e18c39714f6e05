"""
Dense tensor arithmetic with reverse-mode automatic differentiation.

Every operation returns a new ``Tensor`` whose backward rule maps the upstream
gradient to one gradient per input. ``backward(loss)`` walks the operations in
reverse topological order (the ``Tape``) and accumulates gradients into every
reachable tensor.

The primitive set is deliberately small: matmul, transpose, add, multiply,
scalar-multiply, divide, concat, split, reshape, embedding-gather,
reduce-sum/mean, log, exp, sqrt, tanh, softmax, layer-norm and activation.
Every distillation loss is composed from these.
"""
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from kdkit.errors import ContractError, InputError, NumericalError, ParameterError, ShapeError

Number = Union[int, float]
GradRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run the block without recording operations (teacher forwards, evaluation)."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    """
    A dense numeric array with an optional gradient and tape identity.

    ``data`` holds the values (float64 in tests, float32 allowed for training),
    ``grad`` is populated by ``backward`` with the same shape as ``data``.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if array.dtype.kind != "f":
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._rule: Optional[GradRule] = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._rule is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{label})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method forms --------------------------------------------------
    def transpose(self, axes: Optional[Sequence[int]] = None) -> "Tensor":
        return transpose(self, axes)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self, eps: float = 0.0) -> "Tensor":
        return log(self, eps)

    def sqrt(self) -> "Tensor":
        return sqrt(self)


def parameter(data, name: Optional[str] = None, dtype=None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], rule: GradRule, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._rule = rule
    out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")

    def rule(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), rule, "div")


def scale(x: Tensor, factor: Number) -> Tensor:
    """Multiply by a Python scalar."""
    factor = float(factor)
    return _result(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# Linear algebra and structure
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def rule(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(data, (a, b), rule, "matmul")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {original} as {tuple(shape)}") from None
    return _result(data, (x,), lambda g: (g.reshape(original),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, rule, "concat")


def split(x: Tensor, sections: Union[int, Sequence[int]], axis: int = -1) -> List[Tensor]:
    """numpy.split semantics: equal sections or cut indices along ``axis``."""
    extent = x.shape[axis]
    if isinstance(sections, int):
        if sections <= 0 or extent % sections:
            raise ShapeError(f"split: axis of length {extent} is not divisible into {sections}")
        step = extent // sections
        cuts = [i * step for i in range(1, sections)]
    else:
        cuts = list(sections)
    edges = [0] + cuts + [extent]
    return [_slice(x, start, stop, axis) for start, stop in zip(edges[:-1], edges[1:])]


def _slice(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def rule(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result(x.data[index], (x,), rule, "split")


def gather(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of a 2-D ``table`` selected by integer ``ids``."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"gather needs a 2-D table, got {table.shape}")
    if ids.dtype.kind not in "iu":
        raise InputError(f"gather needs integer ids, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError(f"gather: ids must lie in [0, {table.shape[0]}), got range "
                         f"[{ids.min()}, {ids.max()}]")

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), rule, "gather")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _expand(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def rule(g):
        return (np.array(_expand(g, shape, axis, keepdims)),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), rule, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))

    def rule(g):
        return (np.array(_expand(g, shape, axis, keepdims)) / count,)

    return _result(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), rule, "mean")


# ---------------------------------------------------------------------------
# Elementwise functions
# ---------------------------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(x.data)
    return _result(data, (x,), lambda g: (g * data,), "exp")


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log; with ``eps > 0`` the input is clamped from below at ``eps``."""
    if eps > 0:
        clamped = np.maximum(x.data, eps)
        live = x.data > eps
        with np.errstate(divide="ignore"):
            data = np.log(clamped)
        return _result(data, (x,), lambda g: (g * live / clamped,), "log")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)
    return _result(data, (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        data = np.sqrt(x.data)
    return _result(data, (x,), lambda g: (g * 0.5 / data,), "sqrt")


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)
    return _result(data, (x,), lambda g: (g * (1.0 - data * data),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def activation(x: Tensor, kind: str = "gelu") -> Tensor:
    """ReLU or GELU (tanh form) applied elementwise."""
    if kind == "relu":
        live = x.data > 0
        return _result(np.where(live, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * live,), "relu")
    if kind == "gelu":
        v = x.data
        u = _GELU_C * (v + 0.044715 * v ** 3)
        t = np.tanh(u)
        data = 0.5 * v * (1.0 + t)
        slope = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return _result(data, (x,), lambda g: (g * slope,), "gelu")
    raise ParameterError(f"unknown activation '{kind}' (expected 'relu' or 'gelu')")


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the trailing axis of ``x / temperature``, max-stabilized."""
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / np.sum(e, axis=-1, keepdims=True)

    def rule(g):
        inner = np.sum(g * data, axis=-1, keepdims=True)
        return (data * (g - inner) / temperature,)

    return _result(data, (x,), rule, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize each trailing-axis row to mean 0 / variance 1, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match rows of {x.shape}")
    centered = x.data - np.mean(x.data, axis=-1, keepdims=True)
    variance = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(variance + eps)
    normed = centered * inv
    data = normed * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def rule(g):
        dnormed = g * gamma.data
        dx = inv * (dnormed
                    - np.mean(dnormed, axis=-1, keepdims=True)
                    - normed * np.mean(dnormed * normed, axis=-1, keepdims=True))
        return dx, np.sum(g * normed, axis=lead), np.sum(g, axis=lead)

    return _result(data, (x, gamma, beta), rule, "layer_norm")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

class Tape:
    """
    The operations reachable from a root, in topological order (inputs first).
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, finished = stack.pop()
            if finished:
                self.nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def run(self, seed: np.ndarray) -> None:
        pending = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._rule is None:
                continue
            for parent, parent_grad in zip(node._parents, node._rule(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every tensor reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not on the tape (no input requires grad)")
    Tape(loss).run(np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_difference_gradient(f: Callable[[], Union[Tensor, float]], x: Union[Tensor, np.ndarray],
                               h: float = 1e-5) -> np.ndarray:
    """
    Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of ``x``.

    ``f`` is re-evaluated with ``x`` perturbed in place and must read ``x``
    each time it is called.
    """
    if not h > 0:
        raise ParameterError(f"finite-difference step must be positive, got {h}")
    values = x.data if isinstance(x, Tensor) else x
    grad = np.zeros(values.shape, dtype=np.float64)
    with no_grad():
        for index in np.ndindex(values.shape):
            original = values[index]
            values[index] = original + h
            upper = _scalar(f())
            values[index] = original - h
            lower = _scalar(f())
            values[index] = original
            grad[index] = (upper - lower) / (2.0 * h)
    return grad


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(max |a|, max |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale_ = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale_)


def check_gradient(f: Callable[[], Tensor], inputs: Iterable[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between ``backward`` and central differences over ``inputs``."""
    inputs = list(inputs)
    for tensor in inputs:
        tensor.zero_grad()
    backward(f())
    worst = 0.0
    for tensor in inputs:
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        numeric = finite_difference_gradient(f, tensor, h)
        worst = max(worst, gradient_relative_error(analytic, numeric))
    return worst
