"""Timestamped (direction, length) records captured at a tap; CSV ``t_us,dir,len``."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable


@dataclass
class TrafficTrace:
    records: list[tuple[int, int, int]] = field(default_factory=list)

    def append(self, t_us: int, direction: int, length: int) -> None:
        if direction not in (1, -1):
            raise ValueError(f"direction must be +1 or -1, got {direction}")
        if self.records and t_us < self.records[-1][0]:
            raise ValueError("trace timestamps must be nondecreasing")
        self.records.append((int(t_us), direction, int(length)))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def shifted(self, dt_us: int) -> TrafficTrace:
        return TrafficTrace([(t + dt_us, d, n) for t, d, n in self.records])

    def window(self, t0_us: int, t1_us: int) -> TrafficTrace:
        return TrafficTrace([r for r in self.records if t0_us <= r[0] <= t1_us])

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["t_us", "dir", "len"])
        w.writerows(self.records)
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> TrafficTrace:
        rows = csv.reader(io.StringIO(text))
        header = next(rows, None)
        if header != ["t_us", "dir", "len"]:
            raise ValueError(f"unexpected trace header {header}")
        trace = cls()
        for row in rows:
            if row:
                trace.append(int(row[0]), int(row[1]), int(row[2]))
        return trace

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path: str | Path) -> TrafficTrace:
        return cls.from_csv(Path(path).read_text())


def concat(traces: Iterable[TrafficTrace]) -> TrafficTrace:
    out = TrafficTrace()
    for t in traces:
        for r in t:
            out.append(*r)
    return out
