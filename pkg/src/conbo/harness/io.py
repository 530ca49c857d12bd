"""Run files: one CSV row per opportunity-cost record."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import astuple, dataclass, fields
from pathlib import Path

HEADER = ("problem", "algorithm", "seed", "iteration", "n_evals", "oc", "wall_ms")


@dataclass(frozen=True)
class RunRecord:
    problem: str
    algorithm: str
    seed: int
    iteration: int
    n_evals: int
    oc: float
    wall_ms: float


def fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.9g}"
    return str(v)


def _rows_text(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in records:
        w.writerow([fmt(v) for v in astuple(r)])
    return buf.getvalue()


def start_run_file(path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(",".join(HEADER) + "\n", encoding="utf-8")


def append_records(path, records) -> None:
    """Append one replication's rows in a single write."""
    text = _rows_text(records)
    with open(path, "a", encoding="utf-8", newline="") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())


def write_records(path, records) -> None:
    start_run_file(path)
    append_records(path, records)


def read_records(path) -> list[RunRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if tuple(head or ()) != HEADER:
            raise ValueError(f"{path}: not a run file (header {head})")
        out = []
        for row in reader:
            kinds = [f.type for f in fields(RunRecord)]
            vals = []
            for raw, kind in zip(row, kinds):
                vals.append(int(raw) if kind == "int" else float(raw) if kind == "float" else raw)
            out.append(RunRecord(*vals))
    return out
