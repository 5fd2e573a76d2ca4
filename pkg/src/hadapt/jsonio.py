"""Deterministic JSON and CSV writers for run artifacts.

Reports must be byte-identical across reruns, so everything here sorts
keys, converts numpy scalars to plain Python numbers, and never emits
timestamps. Wall-clock measurements belong in a separate sidecar file
that determinism checks ignore.
"""

from __future__ import annotations

import csv
import json

import numpy as np


def to_builtin(obj):
    """Recursively convert numpy scalars/arrays into JSON-safe builtins."""
    if isinstance(obj, dict):
        return {str(k): to_builtin(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_builtin(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_builtin(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def dump_json(path, obj) -> None:
    text = json.dumps(to_builtin(obj), indent=2, sort_keys=True, allow_nan=False)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([to_builtin(v) for v in row])
