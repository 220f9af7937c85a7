"""Sampled simulation traces and the CSV schema shared by all simulators.

A :class:`TraceSet` holds a strictly increasing time grid and named columns
``<element>.<field>``.  Fields that refer to one class of flow at a buffer
are named ``<field>.<class>``, e.g. ``b1.out.u2``.
"""

from __future__ import annotations

import csv
import os
from bisect import bisect_right
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

__all__ = ["TraceSet", "TraceRecorder", "cumulative_count", "max_deviation", "read_csv"]

TIME_COLUMN = "time_s"


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


class TraceSet:
    """Time-indexed columns plus run metadata.

    ``crossings`` (packet simulator only) maps a node label such as
    ``"b1+"`` or ``"b1+.u2"`` to the sorted instants at which packets crossed
    it; ``events`` is a list of ``(time, element, kind)`` tuples.
    """

    def __init__(self, name: str, time, columns: Mapping[str, np.ndarray], *, meta: dict | None = None,
                 events: Iterable | None = None, crossings: Mapping[str, list] | None = None):
        self.name = name
        self.time = np.asarray(time, dtype=float)
        self.columns = {k: np.asarray(v, dtype=float) for k, v in columns.items()}
        for k, v in self.columns.items():
            if v.shape != self.time.shape:
                raise ValueError(f"column {k!r} has {v.shape[0]} rows, time has {self.time.shape[0]}")
        self.meta = dict(meta or {})
        self.events = list(events or [])
        self.crossings = dict(crossings or {})

    def __getitem__(self, key: str) -> np.ndarray:
        if key == TIME_COLUMN:
            return self.time
        try:
            return self.columns[key]
        except KeyError:
            raise KeyError(f"trace {self.name!r} has no column {key!r}") from None

    def __contains__(self, key: str) -> bool:
        return key == TIME_COLUMN or key in self.columns

    def __repr__(self):
        return f"TraceSet({self.name!r}, {len(self.time)} rows, {len(self.columns)} columns)"

    @property
    def elements(self) -> list[str]:
        seen: dict[str, None] = {}
        for k in self.columns:
            seen.setdefault(k.split(".", 1)[0], None)
        return list(seen)

    def element_columns(self, element: str) -> list[str]:
        return [k for k in self.columns if k.split(".", 1)[0] == element]

    def at(self, key: str, t: float) -> float:
        """Value of ``key`` at the last sample with time <= ``t``."""
        i = bisect_right(self.time, t + 1e-12) - 1
        if i < 0:
            raise ValueError(f"t={t!r} precedes the trace start {self.time[0]!r}")
        return float(self[key][i])

    def window(self, t0: float, t1: float = np.inf) -> np.ndarray:
        return (self.time >= t0 - 1e-12) & (self.time <= t1 + 1e-12)

    def events_of(self, element: str, kind: str | None = None) -> list[float]:
        return [t for t, e, k in self.events if e == element and (kind is None or k == kind)]

    # -- CSV ----------------------------------------------------------------

    def write_csv(self, path, columns: Iterable[str] | None = None) -> Path:
        path = Path(path)
        cols = list(columns) if columns is not None else list(self.columns)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([TIME_COLUMN, *cols])
            data = [self.columns[c] for c in cols]
            for i, t in enumerate(self.time):
                w.writerow([_fmt(t), *(_fmt(d[i]) for d in data)])
        return path

    def to_csv(self, out_dir) -> list[Path]:
        """Write one combined file plus one file per element into ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [self.write_csv(out / "all.csv")]
        for elem in self.elements:
            written.append(self.write_csv(out / f"{elem}.csv", self.element_columns(elem)))
        if self.events:
            ev = out / "events.csv"
            with open(ev, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow([TIME_COLUMN, "element", "event"])
                for t, e, k in sorted(self.events, key=lambda r: r[0]):
                    w.writerow([_fmt(t), e, k])
            written.append(ev)
        return written


def read_csv(path, name: str | None = None) -> TraceSet:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != TIME_COLUMN:
        raise ValueError(f"{path}: first column must be {TIME_COLUMN!r}")
    arr = np.array([[float(x) for x in r] for r in body], dtype=float).reshape(len(body), len(header))
    cols = {h: arr[:, j] for j, h in enumerate(header[1:], start=1)}
    return TraceSet(name or os.path.splitext(os.path.basename(str(path)))[0], arr[:, 0], cols)


class TraceRecorder:
    """Preallocated row storage used inside the stepping loops."""

    def __init__(self, columns: list[str], n_rows: int):
        self.names = list(columns)
        self.index = {c: j for j, c in enumerate(self.names)}
        self.data = np.full((n_rows, len(self.names)), np.nan)
        self.time = np.full(n_rows, np.nan)
        self.n = 0

    def row(self, t: float, values: list[float]) -> None:
        i = self.n
        self.time[i] = t
        self.data[i, :] = values
        self.n = i + 1

    def build(self, name: str, **kw) -> TraceSet:
        n = self.n
        cols = {c: self.data[:n, j].copy() for c, j in self.index.items()}
        return TraceSet(name, self.time[:n].copy(), cols, **kw)


def cumulative_count(trace: TraceSet, node: str, t: float) -> float:
    """Packets that crossed ``node`` by time ``t``.

    For packet traces this is the stair count of recorded crossings.  For
    fluid traces the ``<element>.cum_<side>[.<class>]`` columns are used,
    where ``node`` is written ``b1+`` / ``b1-`` with an optional ``.class``.
    """
    if node in trace.crossings:
        return float(bisect_right(trace.crossings[node], t))
    base, _, cls = node.partition(".")
    side = base[-1:]
    if side not in "+-" or not side:
        raise KeyError(f"node {node!r} must end in '+' or '-'")
    field = "cum_out" if side == "+" else "cum_in"
    col = f"{base[:-1]}.{field}" + (f".{cls}" if cls else "")
    if col not in trace:
        raise KeyError(f"node {node!r} is not traced in {trace.name!r}")
    return trace.at(col, t)


def max_deviation(a: TraceSet, b: TraceSet, column: str, t0: float = 0.0, t1: float = np.inf,
                  column_b: str | None = None) -> float:
    """Max ``|a - b|`` over ``a``'s samples in ``[t0, t1]``; ``b`` is interpolated."""
    mask = a.window(t0, t1)
    ta = a.time[mask]
    va = a[column][mask]
    vb = np.interp(ta, b.time, b[column_b or column])
    if ta.size == 0:
        return 0.0
    return float(np.max(np.abs(va - vb)))
