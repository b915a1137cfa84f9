"""Delimited and JSON outputs with embedded metadata.

CSV files start with one comment line ``# {json}`` holding the resolved
config, version and file-specific metadata, followed by a header row.
Timings never go into these headers so reruns compare byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import subprocess
from functools import lru_cache
from importlib import metadata
from pathlib import Path

import numpy as np

__all__ = ["version_string", "write_csv", "read_csv", "write_json", "write_cell_field", "read_cell_field"]


@lru_cache(maxsize=1)
def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0.0.0"
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{base}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, rows: list[dict], meta: dict, columns: list[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    buf.write("# " + json.dumps(meta, sort_keys=True, default=_default) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"{path}: missing metadata header")
    meta = json.loads(lines[0][2:])
    rows = list(csv.DictReader(lines[1:]))
    return meta, rows


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n")
    return path


def write_cell_field(path, values: np.ndarray, meta: dict) -> Path:
    """``cell,value`` rows for a cellwise field."""
    rows = [{"cell": i, "value": float(v)} for i, v in enumerate(values)]
    return write_csv(path, rows, meta, ["cell", "value"])


def read_cell_field(path) -> tuple[dict, np.ndarray]:
    meta, rows = read_csv(path)
    return meta, np.array([float(r["value"]) for r in rows])
