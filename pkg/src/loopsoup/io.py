"""Run-directory artifacts: JSON-lines records and versioned loop snapshots.

Snapshot layout (``snapshot.v1``), text, one record per line::

    loopsoup-snapshot v1
    {"beta": ..., "d": ..., "m": ..., ...}      header, sorted-key JSON
    <j> <x_0> <x_1> ...                         one loop per line

Coordinates are written with ``float.__repr__``, which round-trips every
binary64 value, so write -> read -> write is byte-identical.
"""

from __future__ import annotations

import json
import os
from typing import Iterable

import numpy as np

from .configuration import Configuration
from .paths import Loop, TimeGrid

__all__ = [
    "OBSERVABLES_SCHEMA",
    "SNAPSHOT_MAGIC",
    "SnapshotError",
    "dumps_snapshot",
    "loads_snapshot",
    "write_snapshot",
    "read_snapshot",
    "JsonlSink",
    "record_line",
]

OBSERVABLES_SCHEMA = "observables.v1"
SNAPSHOT_MAGIC = "loopsoup-snapshot v1"


class SnapshotError(ValueError):
    pass


def dumps_snapshot(eta: Configuration, grid: TimeGrid, header: dict | None = None) -> str:
    d = eta[0].d if len(eta) else int((header or {}).get("d", 3))
    head = {"format": "snapshot.v1", "beta": grid.beta, "m": grid.m, "d": d, "loops": len(eta)}
    if header:
        head.update({k: v for k, v in header.items() if k not in head})
    lines = [SNAPSHOT_MAGIC, json.dumps(head, sort_keys=True)]
    for w in eta:
        coords = " ".join(repr(float(v)) for v in w.points.ravel())
        lines.append(f"{w.j} {coords}")
    return "\n".join(lines) + "\n"


def loads_snapshot(text: str) -> tuple[Configuration, TimeGrid, dict]:
    lines = text.split("\n")
    if not lines or lines[0] != SNAPSHOT_MAGIC:
        raise SnapshotError("not a snapshot.v1 file")
    if lines[-1] != "":
        raise SnapshotError("snapshot must end with a newline")
    try:
        head = json.loads(lines[1])
        grid = TimeGrid(float(head["beta"]), int(head["m"]))
        d = int(head["d"])
    except (IndexError, KeyError, ValueError) as exc:
        raise SnapshotError(f"bad snapshot header: {exc}") from None
    loops = []
    for k, line in enumerate(lines[2:-1]):
        parts = line.split(" ")
        try:
            j = int(parts[0])
            pts = np.array([float(v) for v in parts[1:]], dtype=float).reshape(j * grid.m, d)
            loops.append(Loop(j, pts, grid))
        except ValueError as exc:
            raise SnapshotError(f"bad loop record {k}: {exc}") from None
    if len(loops) != head.get("loops", len(loops)):
        raise SnapshotError("loop count differs from header")
    return Configuration(loops), grid, head


def write_snapshot(path: str, eta: Configuration, grid: TimeGrid, header: dict | None = None, cap_bytes: int | None = None) -> bool:
    """Write a snapshot unless it would exceed ``cap_bytes``; returns whether it was written."""
    text = dumps_snapshot(eta, grid, header)
    data = text.encode("utf-8")
    if cap_bytes is not None and len(data) > cap_bytes:
        return False
    with open(path, "wb") as fh:
        fh.write(data)
    return True


def read_snapshot(path: str) -> tuple[Configuration, TimeGrid, dict]:
    with open(path, "rb") as fh:
        return loads_snapshot(fh.read().decode("utf-8"))


def record_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, allow_nan=False) + "\n"


class JsonlSink:
    """Single-writer line-delimited JSON file."""

    def __init__(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._fh = open(path, "w", encoding="utf-8")

    def write(self, rec: dict) -> None:
        self._fh.write(record_line(rec))

    def write_all(self, recs: Iterable[dict]) -> None:
        for r in recs:
            self.write(r)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
