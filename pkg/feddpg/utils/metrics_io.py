"""
Utilities for writing experiment metrics to disk
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

logger = logging.getLogger(__name__)


def _as_dict(row: Any) -> Dict[str, Any]:
    return row.to_dict() if hasattr(row, "to_dict") else dict(row)


def append_jsonl(row: Any, output_path: Union[str, Path]) -> None:
    """
    Append one JSON object as a line and flush it

    Rows already on disk survive an aborted run.

    Args:
        row: Mapping, or an object with a to_dict() method
        output_path: Path of the JSON-lines file
    """
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "a") as f:
        json.dump(_as_dict(row), f, sort_keys=True)
        f.write("\n")
        f.flush()


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """Load every non-blank line of a JSON-lines file"""
    rows = []
    with open(path, "r") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def write_csv(
    rows: Sequence[Any],
    output_path: Union[str, Path],
    fieldnames: Optional[Sequence[str]] = None,
) -> None:
    """
    Write rows as CSV with a header line

    Args:
        rows: Mappings (or objects with to_dict()) sharing the same keys
        output_path: Path of the CSV file
        fieldnames: Column order; defaults to the keys of the first row
    """
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    dict_rows = [_as_dict(r) for r in rows]
    if fieldnames is None:
        fieldnames = list(dict_rows[0].keys()) if dict_rows else []

    with open(output_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), extrasaction="ignore")
        writer.writeheader()
        for row in dict_rows:
            writer.writerow(
                {k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in row.items()}
            )

    logger.info(f"Wrote {len(dict_rows)} rows to {output_path}")


def write_json(data: Dict[str, Any], output_path: Union[str, Path]) -> None:
    """Write a JSON document with sorted keys"""
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
