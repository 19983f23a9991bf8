"""Target-KPI series handling (the analyst's response-time/throughput curve).

Interchange format is CSV with a `ts,value` header; timestamps are seconds
(floats accepted) relative to the same epoch as the metric store and are
converted to nanoseconds. An optional constant offset can re-align a series
captured on a different clock.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple


class KpiFormatError(ValueError):
    pass


@dataclass
class KpiSeries:
    name: str = "kpi"
    unit: str = ""
    points: List[Tuple[int, float]] = field(default_factory=list)  # (ts_ns, value)
    offset_ns: int = 0

    def to_json(self) -> dict:
        return {"name": self.name, "unit": self.unit, "offset_ns": self.offset_ns,
                "points": [[ts, val] for ts, val in self.points]}


def parse_kpi_csv(text: str, name: str = "kpi", unit: str = "",
                  offset_ns: int = 0) -> KpiSeries:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise KpiFormatError("empty KPI file")
    header = [c.strip().lower() for c in lines[0].split(",")]
    if header[:2] != ["ts", "value"]:
        raise KpiFormatError("KPI file must start with a 'ts,value' header")
    points: List[Tuple[int, float]] = []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) < 2:
            raise KpiFormatError(f"KPI line {i}: expected 'ts,value'")
        try:
            ts_ns = int(round(float(parts[0]) * 1e9)) + offset_ns
            value = float(parts[1])
        except ValueError:
            raise KpiFormatError(f"KPI line {i}: non-numeric field") from None
        points.append((ts_ns, value))
    for (a, _), (b, _) in zip(points, points[1:]):
        if b < a:
            raise KpiFormatError("KPI timestamps must be ascending")
    return KpiSeries(name=name, unit=unit, points=points, offset_ns=offset_ns)
