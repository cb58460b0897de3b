"""CSV tables (17 significant digits) and plain-text summary blocks."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.17g}"
    return str(value)


def write_rows(path, rows: list[dict], columns: list[str] | None = None):
    """Write dictionaries as CSV; columns default to first-seen key order."""
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])
    return Path(path)


def write_columns(path, columns: dict):
    """Write equal-length arrays as CSV columns."""
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    size = {a.size for a in arrays}
    if len(size) != 1:
        raise ValueError("columns differ in length")
    rows = [dict(zip(names, vals)) for vals in zip(*arrays)]
    return write_rows(path, rows, names)


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summary_block(title: str, items) -> str:
    """Aligned 'key: value' lines under a title."""
    items = list(items.items()) if isinstance(items, dict) else list(items)
    width = max((len(k) for k, _ in items), default=0)
    lines = [title, "-" * len(title)]
    lines += [f"{k.ljust(width)} : {fmt(v)}" for k, v in items]
    return "\n".join(lines) + "\n"
