import pytest

from kdkit.errors import ConfigError
from kdkit.model import count_parameters
from kdkit.sizing import (SIZING_COLUMNS, budget_student_axis, configs_at_budget, head_count, sizing_table)


def test_six_million_budget_widths_per_depth():
    configs = configs_at_budget({"params": 6_200_000})
    widths = {c.num_layers: c.hidden_dim for c in configs}
    assert widths == {2: 176, 3: 168, 4: 160, 8: 144, 12: 128}
    for config in configs:
        assert count_parameters(config)["total"] <= 6_200_000 * 1.05


def test_width_never_grows_with_depth():
    configs = configs_at_budget({"params": 3_000_000}, depths=range(1, 13))
    widths = [c.hidden_dim for c in configs]
    assert widths == sorted(widths, reverse=True)


def test_budget_below_embedding_table_is_infeasible():
    assert configs_at_budget({"params": 100_000}, widths=range(8, 65, 8)) == []


def test_flops_budget():
    configs = configs_at_budget({"flops": 1e9, "n": 128}, depths=[2, 4], vocab_size=1000)
    assert [c.num_layers for c in configs] == [2, 4]
    assert configs[0].hidden_dim > configs[1].hidden_dim
    with pytest.raises(ConfigError, match="'n'"):
        configs_at_budget({"flops": 1e9})
    with pytest.raises(ConfigError):
        configs_at_budget({"memory": 1})


def test_head_rule():
    assert head_count(128) == 2
    assert head_count(768) == 12
    assert head_count(176) == 2
    assert head_count(1024) == 16
    assert head_count(8) == 2
    assert head_count(3) == 1
    for width in range(8, 1025, 8):
        assert width % head_count(width) == 0


def test_sizing_table_columns():
    table = sizing_table(configs_at_budget({"params": 6_200_000}, depths=[12]), n=128)
    assert list(table.columns) == SIZING_COLUMNS
    assert table.iloc[0]["params"] == 6_368_898


def test_student_axis_entries():
    axis = budget_student_axis({"params": 6_200_000}, depths=[4, 12])
    assert axis == [
        {"num_layers": 4, "hidden_dim": 160, "num_heads": 2, "ffn_dim": 640},
        {"num_layers": 12, "hidden_dim": 128, "num_heads": 2, "ffn_dim": 512},
    ]
