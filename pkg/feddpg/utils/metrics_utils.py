"""
Summary statistics over experiment result rows
"""

import math
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np


def finite_values(values: Iterable[Any]) -> List[float]:
    """Numeric, non-NaN entries of ``values`` as floats"""
    out = []
    for value in values:
        if isinstance(value, bool) or not isinstance(value, (int, float, np.floating, np.integer)):
            continue
        value = float(value)
        if not math.isnan(value):
            out.append(value)
    return out


def summarize_values(values: Iterable[Any]) -> Dict[str, float]:
    """
    Mean, population std, min and max of the numeric entries

    Returns NaN statistics (and count 0) when nothing numeric is present.
    """
    numeric = finite_values(values)
    if not numeric:
        nan = float("nan")
        return {"count": 0, "mean": nan, "std": nan, "min": nan, "max": nan}
    arr = np.asarray(numeric, dtype=np.float64)
    return {
        "count": int(arr.size),
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "min": float(arr.min()),
        "max": float(arr.max()),
    }


def group_summary(
    rows: Sequence[Dict[str, Any]], axis: str, value: str
) -> List[Dict[str, Any]]:
    """
    Statistics of ``value`` for every distinct ``axis`` entry, sorted by axis value

    Each output row is ``{"axis": axis, "value": <axis value>, mean, std, ...}``.
    """
    groups: Dict[Any, List[Any]] = {}
    for row in rows:
        groups.setdefault(row[axis], []).append(row.get(value))
    return [
        {"axis": axis, "value": key, **summarize_values(groups[key])}
        for key in sorted(groups)
    ]
