"""
Width/depth trade-off tooling: the widest encoder per depth that fits a
parameter or FLOP budget.
"""
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import pandas as pd

from kdkit.errors import ConfigError
from kdkit.model import ModelConfig, count_parameters, estimate_flops

DEFAULT_DEPTHS = (2, 3, 4, 8, 12)
DEFAULT_WIDTHS = tuple(range(8, 1025, 8))
DEFAULT_TOLERANCE = 0.05
SIZING_COLUMNS = ["dimension", "layers", "params", "flops"]


def head_count(width: int) -> int:
    """The divisor of ``width`` nearest to max(2, width / 64); ties go to the smaller."""
    if width < 1:
        raise ConfigError([f"width must be positive, got {width}"])
    target = max(2.0, width / 64.0)
    divisors = [h for h in range(1, width + 1) if width % h == 0]
    return min(divisors, key=lambda h: (abs(h - target), h))


def sized_config(layers: int, width: int, **overrides) -> ModelConfig:
    """A ModelConfig with heads assigned by ``head_count`` and d_ff = 4d."""
    return ModelConfig(num_layers=layers, hidden_dim=width, num_heads=head_count(width), **overrides)


def _budget_measure(budget: Mapping) -> str:
    if "params" in budget:
        return "params"
    if "flops" in budget:
        if "n" not in budget:
            raise ConfigError(["a flops budget needs the sequence length 'n'"])
        return "flops"
    raise ConfigError([f"budget must name 'params' or 'flops', got keys {sorted(budget)}"])


def configs_at_budget(budget: Mapping, depths: Iterable[int] = DEFAULT_DEPTHS,
                      widths: Iterable[int] = DEFAULT_WIDTHS, tolerance: float = DEFAULT_TOLERANCE,
                      **overrides) -> List[ModelConfig]:
    """
    For each depth, the widest width whose parameter count (or forward FLOPs
    at length ``n``) is at most ``budget * (1 + tolerance)``. Depths with no
    feasible width are left out, so an infeasible budget returns ``[]``.
    ``overrides`` go to every ModelConfig (vocab_size, max_seq_len, ...).
    """
    depths = sorted(set(int(d) for d in depths))
    widths = sorted(set(int(w) for w in widths), reverse=True)
    if not depths or not widths:
        raise ConfigError(["configs_at_budget needs non-empty depth and width ranges"])
    measure = _budget_measure(budget)
    limit = float(budget[measure]) * (1.0 + tolerance)

    found = []
    for depth in depths:
        for width in widths:
            config = sized_config(depth, width, **overrides)
            if measure == "params":
                value = count_parameters(config)["total"]
            else:
                value = estimate_flops(config, int(budget["n"]))
            if value <= limit:
                found.append(config)
                break
    return found


def sizing_table(configs: Sequence[ModelConfig], n: int = 128) -> pd.DataFrame:
    """One row per config: dimension, layers, params, flops (at length ``n``)."""
    rows = [{
        "dimension": c.hidden_dim,
        "layers": c.num_layers,
        "params": count_parameters(c)["total"],
        "flops": estimate_flops(c, n),
    } for c in configs]
    return pd.DataFrame(rows, columns=SIZING_COLUMNS)


def embedding_fraction(config: ModelConfig) -> float:
    counts = count_parameters(config)
    return counts["embedding"] / counts["total"]


def budget_student_axis(budget: Mapping, depths: Optional[Iterable[int]] = None,
                        widths: Optional[Iterable[int]] = None, tolerance: float = DEFAULT_TOLERANCE,
                        **overrides) -> List[Dict]:
    """configs_at_budget output as sweep-axis entries (layer count, width, heads)."""
    configs = configs_at_budget(budget, depths or DEFAULT_DEPTHS, widths or DEFAULT_WIDTHS, tolerance, **overrides)
    return [{"num_layers": c.num_layers, "hidden_dim": c.hidden_dim, "num_heads": c.num_heads,
             "ffn_dim": c.ffn_dim} for c in configs]
