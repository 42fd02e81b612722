"""
Utility functions for formatting output
"""

from typing import Any, Dict


def format_metrics_safe(metrics: Dict[str, Any]) -> str:
    """
    Safely format a metrics dictionary for logging

    Floats get four decimals; ints, bools, None, lists and strings are printed
    as they are.

    Args:
        metrics: Dictionary of metric names to values

    Returns:
        Formatted string representation of metrics
    """
    if not metrics:
        return ""

    formatted_parts = []
    for name, value in metrics.items():
        if isinstance(value, float):
            try:
                formatted_parts.append(f"{name}={value:.4f}")
            except (ValueError, TypeError):
                formatted_parts.append(f"{name}={value}")
        else:
            formatted_parts.append(f"{name}={value}")

    return ", ".join(formatted_parts)


def format_change_safe(before: Dict[str, Any], after: Dict[str, Any]) -> str:
    """
    Format the change of every numeric metric present in both dictionaries

    Args:
        before: Metrics before an operation (e.g. unlearning)
        after: Metrics after it

    Returns:
        ``name=+0.0123`` style parts joined by commas
    """
    if not before or not after:
        return ""

    parts = []
    for metric, after_value in after.items():
        if metric not in before:
            continue
        before_value = before[metric]
        if isinstance(after_value, bool) or isinstance(before_value, bool):
            continue
        if isinstance(after_value, (int, float)) and isinstance(before_value, (int, float)):
            parts.append(f"{metric}={after_value - before_value:+.4f}")

    return ", ".join(parts)
