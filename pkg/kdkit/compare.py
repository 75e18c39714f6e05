"""
Compare two sweep summaries and report which cells were added, removed or
changed. Identical files report no differences, which is how reruns are
checked for reproducibility.
"""
from typing import Any, Dict, List

import pandas as pd

from kdkit.errors import InputError

KEY_COLUMN = "cell"


def _read_summary(path: str) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise InputError(f"summary not found: {path}") from None
    if KEY_COLUMN not in df.columns:
        raise InputError(f"{path}: summary has no '{KEY_COLUMN}' column")
    return df.set_index(KEY_COLUMN, drop=False)


def compare_summaries(original_path: str, new_path: str) -> Dict[str, Any]:
    """Cell-keyed diff of two summary CSVs. Values are compared as their written text."""
    df_original = _read_summary(original_path)
    df_new = _read_summary(new_path)

    original_cells = set(df_original.index)
    new_cells = set(df_new.index)
    differences: Dict[str, Any] = {
        "row_count_change": len(df_new) - len(df_original),
        "added": sorted(new_cells - original_cells),
        "removed": sorted(original_cells - new_cells),
        "changed": [],
        "columns_added": sorted(set(df_new.columns) - set(df_original.columns)),
        "columns_removed": sorted(set(df_original.columns) - set(df_new.columns)),
    }

    shared_columns = [c for c in df_original.columns if c in df_new.columns and c != KEY_COLUMN]
    for cell in sorted(original_cells & new_cells):
        before = df_original.loc[cell]
        after = df_new.loc[cell]
        changes: List[Dict[str, str]] = []
        for column in shared_columns:
            if before[column] != after[column]:
                changes.append({"column": column, "before": before[column], "after": after[column]})
        if changes:
            differences["changed"].append({"cell": cell, "changes": changes})

    differences["identical"] = not (differences["added"] or differences["removed"] or differences["changed"]
                                    or differences["columns_added"] or differences["columns_removed"])
    return differences


def print_comparison(differences: Dict[str, Any], limit: int = 10) -> None:
    print("🔍 Comparing sweep summaries...")
    if differences["identical"]:
        print("✅ Summaries are identical")
        return
    print(f"📊 Row count change: {differences['row_count_change']:+d}")
    for label, key in (("Added cells", "added"), ("Removed cells", "removed")):
        if differences[key]:
            print(f"   {label}: {len(differences[key])}")
            for cell in differences[key][:limit]:
                print(f"     • {cell}")
    if differences["columns_added"] or differences["columns_removed"]:
        print(f"   Columns added: {differences['columns_added']}, removed: {differences['columns_removed']}")
    if differences["changed"]:
        print(f"⚠️  Changed cells: {len(differences['changed'])}")
        for entry in differences["changed"][:limit]:
            detail = ", ".join(f"{c['column']}: {c['before']} → {c['after']}" for c in entry["changes"][:3])
            print(f"     • {entry['cell']}: {detail}")
