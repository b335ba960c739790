"""Versioned CSV tables.

Every file starts with one comment line naming the schema version, the
table, and the hash of the configuration that produced it::

    # adasmooth-csv v1 table=<name> config=<hash>

Floats are written with ``repr`` so values round-trip exactly and reruns
produce identical bytes.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

from ..errors import FormatError

SCHEMA = "adasmooth-csv v1"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):
        return _cell(v.item())
    return str(v)


def write_table(path: str | Path, table: str, config_hash: str, columns: Sequence[str],
                rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SCHEMA} table={table} config={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise ValueError(f"row has {len(row)} cells, table {table} has {len(columns)} columns")
            w.writerow([_cell(v) for v in row])
    return path


def read_table(path: str | Path) -> tuple[dict, list[dict]]:
    """Return the header fields and the rows as dicts of strings."""
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if not first.startswith(f"# {SCHEMA} "):
            raise FormatError(f"{path}: missing or unsupported schema line")
        meta = dict(kv.split("=", 1) for kv in first[len(SCHEMA) + 3:].split())
        rows = list(csv.DictReader(fh))
    return meta, rows


def as_float(cell: str) -> float | None:
    return None if cell == "" else float(cell)
