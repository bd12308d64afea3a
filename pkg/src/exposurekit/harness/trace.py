"""GPS trace ingestion for rows of ``id,timestamp,longitude,latitude``.

Timestamps may be unix seconds or ``YYYY-MM-DD HH:MM:SS`` (UTC), the form
used by the T-Drive taxi dataset.
"""

from __future__ import annotations

import calendar
import csv
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from ..enclave.logs import LocationLog


@dataclass(frozen=True)
class TracePoint:
    t: float
    lat: float
    lon: float


@dataclass
class TraceIngest:
    trajectories: dict[str, list[TracePoint]]
    rows: int = 0
    skipped: int = 0
    skipped_lines: list[int] = field(default_factory=list)

    def location_logs(self, log_id_source=None) -> list[LocationLog]:
        """One location log per entity, ready for upload to the enclave."""
        return [LocationLog.new(eid, [(p.lat, p.lon, p.t) for p in pts],
                                log_id=log_id_source(16) if log_id_source else None)
                for eid, pts in sorted(self.trajectories.items())]


def _parse_time(raw: str) -> float:
    raw = raw.strip()
    try:
        value = float(raw)
    except ValueError:
        return float(calendar.timegm(time.strptime(raw, "%Y-%m-%d %H:%M:%S")))
    if not math.isfinite(value):
        raise ValueError("non-finite timestamp")
    return value


def _parse_row(row: list[str]) -> tuple[str, TracePoint]:
    if len(row) != 4:
        raise ValueError("expected 4 columns")
    eid, ts, lon_s, lat_s = row
    lon, lat = float(lon_s), float(lat_s)
    if not (math.isfinite(lat) and math.isfinite(lon) and -90 <= lat <= 90 and -180 <= lon <= 180):
        raise ValueError("coordinate out of range")
    if not eid.strip():
        raise ValueError("empty id")
    return eid.strip(), TracePoint(_parse_time(ts), lat, lon)


def ingest_trace(csv_path: str | Path) -> TraceIngest:
    """Parse a trace file; malformed rows are counted and skipped.

    A header row naming the columns is accepted and not counted as malformed.
    Raises OSError if the file cannot be read.
    """
    by_id: dict[str, list[TracePoint]] = defaultdict(list)
    result = TraceIngest({})
    with open(csv_path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 1 and row[0].strip().lower() in ("id", "taxi_id", "entity"):
                continue
            result.rows += 1
            try:
                eid, point = _parse_row(row)
            except ValueError:
                result.skipped += 1
                result.skipped_lines.append(lineno)
                continue
            by_id[eid].append(point)
    result.trajectories = {eid: sorted(pts, key=lambda p: p.t) for eid, pts in sorted(by_id.items())}
    return result
