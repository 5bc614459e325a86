"""Step-level run traces and their CSV form."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

SCHEMA = 1
COLUMNS = ("t", "k", "m", "h", "s", "a", "cost", "s_next", "dummy", "epoch", "B_t", "event")
_INT_COLS = ("t", "k", "m", "h", "s", "a", "s_next", "dummy", "epoch")


class StepRecord(NamedTuple):
    t: int
    k: int
    m: int
    h: int
    s: int
    a: int
    cost: float
    s_next: int
    dummy: bool
    epoch: int
    B_t: float
    event: str


class TraceRecorder:
    """Append-only column buffers; ``finish`` freezes them into a RunTrace."""

    def __init__(self):
        self._cols = {name: [] for name in COLUMNS}
        self.meta: dict = {}

    def __len__(self):
        return len(self._cols["t"])

    def append(self, k, m, h, s, a, cost, s_next, dummy, epoch=1, B_t=float("nan"), event=""):
        cols = self._cols
        cols["t"].append(len(cols["t"]) + 1)
        cols["k"].append(k)
        cols["m"].append(m)
        cols["h"].append(h)
        cols["s"].append(s)
        cols["a"].append(a)
        cols["cost"].append(cost)
        cols["s_next"].append(s_next)
        cols["dummy"].append(dummy)
        cols["epoch"].append(epoch)
        cols["B_t"].append(B_t)
        cols["event"].append(event)

    def tag_last(self, event: str):
        ev = self._cols["event"]
        ev[-1] = event if not ev[-1] else ev[-1] + ";" + event

    def finish(self, **meta) -> "RunTrace":
        arrays = {}
        for name in COLUMNS:
            vals = self._cols[name]
            if name == "event":
                arrays[name] = np.array(vals, dtype=object)
            elif name == "dummy":
                arrays[name] = np.array(vals, dtype=bool)
            elif name in _INT_COLS:
                arrays[name] = np.array(vals, dtype=np.int64)
            else:
                arrays[name] = np.array(vals, dtype=float)
        merged = dict(self.meta)
        merged.update(meta)
        return RunTrace(arrays, merged)


@dataclass
class RunTrace:
    """Columnar step log plus run metadata (completion flag, intervals, epochs, events)."""

    columns: dict
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.columns["t"])

    def __getitem__(self, name):
        return self.columns[name]

    @property
    def complete(self) -> bool:
        return bool(self.meta.get("complete", False))

    def records(self):
        cols = [self.columns[n] for n in COLUMNS]
        for row in zip(*cols):
            yield StepRecord(*(v.item() if hasattr(v, "item") else v for v in row))

    @property
    def real(self) -> np.ndarray:
        return ~self.columns["dummy"]

    def interval_slices(self):
        """Yield (m, index array) for every interval present in the trace."""
        m = self.columns["m"]
        if m.size == 0:
            return
        bounds = np.flatnonzero(np.diff(m)) + 1
        starts = np.concatenate([[0], bounds])
        ends = np.concatenate([bounds, [m.size]])
        for a, b in zip(starts, ends):
            yield int(m[a]), np.arange(a, b)

    def to_csv(self, path) -> None:
        path = Path(path)
        cols = self.columns
        lines = [f"# schema={SCHEMA}", ",".join(COLUMNS)]
        for i in range(len(self)):
            lines.append(
                f"{cols['t'][i]},{cols['k'][i]},{cols['m'][i]},{cols['h'][i]},{cols['s'][i]},{cols['a'][i]},"
                f"{float(cols['cost'][i])!r},{cols['s_next'][i]},{int(cols['dummy'][i])},{cols['epoch'][i]},"
                f"{float(cols['B_t'][i])!r},{cols['event'][i]}"
            )
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path, meta=None) -> "RunTrace":
        rec = TraceRecorder()
        with open(path) as fh:
            first = fh.readline().strip()
            if first != f"# schema={SCHEMA}":
                raise ValueError(f"{path}: unsupported trace schema line {first!r}")
            header = fh.readline().strip().split(",")
            if tuple(header) != COLUMNS:
                raise ValueError(f"{path}: unexpected header {header}")
            for line in fh:
                f = line.rstrip("\n").split(",", len(COLUMNS) - 1)
                rec.append(int(f[1]), int(f[2]), int(f[3]), int(f[4]), int(f[5]), float(f[6]), int(f[7]),
                           bool(int(f[8])), int(f[9]), float(f[10]), f[11])
        return rec.finish(**(meta or {}))
