"""CSV output: every file starts with a header whose first column is ``schema_version``."""

from __future__ import annotations

import csv
from pathlib import Path


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def write_csv(path, schema: str, columns: list, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["schema_version", *columns])
        for r in rows:
            w.writerow([schema, *(_fmt(r[c]) for c in columns)])
    return path
