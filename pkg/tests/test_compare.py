import pandas as pd
import pytest

from kdkit.compare import compare_summaries, print_comparison
from kdkit.errors import InputError


def _write(path, rows):
    pd.DataFrame(rows).to_csv(path, index=False)
    return str(path)


ROWS = [
    {"cell": "0000-temperature=1.0", "dev_metric": 0.75, "status": "ok"},
    {"cell": "0001-temperature=2.0", "dev_metric": 0.8125, "status": "ok"},
]


def test_identical_summaries(tmp_path, capsys):
    a = _write(tmp_path / "a.csv", ROWS)
    b = _write(tmp_path / "b.csv", ROWS)
    differences = compare_summaries(a, b)
    assert differences["identical"]
    assert differences["row_count_change"] == 0
    print_comparison(differences)
    assert "identical" in capsys.readouterr().out


def test_changed_added_and_removed_cells(tmp_path, capsys):
    a = _write(tmp_path / "a.csv", ROWS)
    new_rows = [
        {"cell": "0000-temperature=1.0", "dev_metric": 0.5, "status": "diverged: loss diverged at step 3"},
        {"cell": "0002-temperature=4.0", "dev_metric": 0.9, "status": "ok"},
    ]
    b = _write(tmp_path / "b.csv", new_rows)
    differences = compare_summaries(a, b)
    assert not differences["identical"]
    assert differences["added"] == ["0002-temperature=4.0"]
    assert differences["removed"] == ["0001-temperature=2.0"]
    [changed] = differences["changed"]
    assert changed["cell"] == "0000-temperature=1.0"
    assert [c["column"] for c in changed["changes"]] == ["dev_metric", "status"]
    assert changed["changes"][0]["before"] == "0.75"
    print_comparison(differences)
    out = capsys.readouterr().out
    assert "Changed cells: 1" in out and "0002-temperature=4.0" in out


def test_column_changes_break_identity(tmp_path):
    a = _write(tmp_path / "a.csv", ROWS)
    b = _write(tmp_path / "b.csv", [dict(row, seed=0) for row in ROWS])
    differences = compare_summaries(a, b)
    assert differences["columns_added"] == ["seed"]
    assert not differences["identical"]


def test_missing_inputs(tmp_path):
    a = _write(tmp_path / "a.csv", ROWS)
    with pytest.raises(InputError, match="not found"):
        compare_summaries(a, str(tmp_path / "absent.csv"))
    keyless = _write(tmp_path / "keyless.csv", [{"dev_metric": 0.5}])
    with pytest.raises(InputError, match="'cell'"):
        compare_summaries(keyless, a)
