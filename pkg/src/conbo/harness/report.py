"""Summaries of run files: median and interquartile OC per iteration."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from .io import fmt, read_records

SUMMARY_HEADER = ("problem", "algorithm", "iteration", "n", "median_oc", "q25_oc", "q75_oc")


def summarize(records):
    """Rows of (problem, algorithm, iteration, n, median, q25, q75); failure rows are skipped."""
    groups = defaultdict(list)
    for r in records:
        if not math.isnan(r.oc):
            groups[(r.problem, r.algorithm, r.iteration)].append(r.oc)
    rows = []
    for key in sorted(groups):
        v = np.array(groups[key])
        q25, med, q75 = np.percentile(v, [25, 50, 75])
        rows.append((*key, len(v), float(med), float(q25), float(q75)))
    return rows


def collect(in_dir) -> list:
    paths = sorted(Path(in_dir).glob("*.csv"))
    if not paths:
        raise FileNotFoundError(f"no run files in {in_dir}")
    records = []
    for p in paths:
        records += read_records(p)
    return records


def write_summary(rows, out_path) -> None:
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def final_medians(records) -> dict:
    """Median OC at each (problem, algorithm)'s last recorded iteration."""
    last = {}
    for row in summarize(records):
        key = row[:2]
        if key not in last or row[2] > last[key][2]:
            last[key] = row
    return {k: v[4] for k, v in last.items()}
