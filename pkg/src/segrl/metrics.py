"""Versioned metrics CSV, parameter snapshots and the run manifest."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .engine import METRIC_COLUMNS
from .errors import InputError
from .policy import PolicyParams

SCHEMA_VERSION = 1
# v0 logs had no version line and only the core columns
V0_COLUMNS = METRIC_COLUMNS[:10]
INT_COLUMNS = {"step", "experience_pool_size", "unfinished_pool_size", "dropped_groups", "retained_groups", "completed", "truncated"}


def _fmt(name, value) -> str:
    if name in INT_COLUMNS:
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "nan"
    return repr(value)


class MetricsWriter:
    """Append-only CSV writer; the header is written on open."""

    def __init__(self, path, ratio_mode: str, checker_id: str):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._fh.write(f"# segrl-metrics v{SCHEMA_VERSION} ratio_mode={ratio_mode} checker={checker_id}\n")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(METRIC_COLUMNS)
        self._fh.flush()

    def write(self, row: dict):
        self._writer.writerow([_fmt(c, row[c]) for c in METRIC_COLUMNS])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics(path, rows, ratio_mode: str, checker_id: str):
    with MetricsWriter(path, ratio_mode, checker_id) as w:
        for row in rows:
            w.write(row)


def read_metrics(path) -> tuple:
    """Return ``(meta, rows)``; understands v1 and the unversioned v0 layout."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    lines_all = lines
    meta = {"version": 0}
    if lines and lines[0].startswith("#"):
        parts = lines[0].lstrip("#").split()
        if len(parts) < 2 or parts[0] != "segrl-metrics" or not parts[1].startswith("v"):
            raise InputError(f"{path}: unrecognised metrics header {lines[0]!r}")
        meta["version"] = int(parts[1][1:])
        for kv in parts[2:]:
            key, _, value = kv.partition("=")
            meta[key] = value
        lines = lines[1:]
    if not lines:
        raise InputError(f"{path}: missing column header")
    header = next(csv.reader([lines[0]]))
    expected = V0_COLUMNS if meta["version"] == 0 else METRIC_COLUMNS
    if tuple(header) != tuple(expected):
        raise InputError(f"{path}: columns {header} do not match schema v{meta['version']}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=len(lines_all) - len(lines) + 2):
        if not line.strip():
            continue
        values = next(csv.reader([line]))
        if len(values) != len(header):
            raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(values)}")
        try:
            row = {name: int(raw) if name in INT_COLUMNS else float(raw) for name, raw in zip(header, values)}
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from None
        rows.append(row)
    return meta, rows


def save_snapshot(path, params: PolicyParams, step: int):
    np.savez(path, weights=params.weights, context_width=params.context_width, version=params.version, step=step)


def load_snapshot(path) -> PolicyParams:
    with np.load(path) as data:
        return PolicyParams(data["weights"].copy(), int(data["context_width"]), int(data["version"]))


def write_manifest(path, manifest: dict):
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
