"""
Hash-based seeds for independent random streams
"""

import hashlib


def derive_seed(base_seed: int, label: str) -> int:
    """
    Stable 31-bit seed for the component named ``label``

    Independent of PYTHONHASHSEED and of process identity, so worker
    processes derive the same seeds as the parent.
    """
    digest = hashlib.md5(str(base_seed).encode("utf-8") + label.encode("utf-8")).hexdigest()
    return int(digest[:8], 16) % (2**31)
