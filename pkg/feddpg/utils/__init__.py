"""
Utilities module initialization
"""

from feddpg.utils.format_utils import format_change_safe, format_metrics_safe
from feddpg.utils.metrics_io import append_jsonl, read_jsonl, write_csv, write_json
from feddpg.utils.metrics_utils import finite_values, group_summary, summarize_values
from feddpg.utils.seeding import derive_seed

__all__ = [
    "format_metrics_safe",
    "format_change_safe",
    "append_jsonl",
    "read_jsonl",
    "write_csv",
    "write_json",
    "finite_values",
    "group_summary",
    "summarize_values",
    "derive_seed",
]
