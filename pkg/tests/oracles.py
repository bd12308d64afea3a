"""Independent reference computations used as test oracles.

Nothing here calls into the code paths it is used to check beyond the
single-interval primitives named in each docstring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from exposurekit.protocol import INTERVALS_PER_DAY, derive_rpi, derive_rpik


@dataclass
class Contact:
    rpi: bytes
    first_seen: float


def per_interval_rpis(tek):
    """RPIs for a TEK's day, one derive_rpi call per interval."""
    rpik = derive_rpik(tek)
    return [derive_rpi(rpik, tek.valid_from + k) for k in range(INTERVALS_PER_DAY)]


def brute_force_matches(published, contacts, tolerance):
    """Compare every (tek, interval, contact) triple; returns a set of
    (tek_index, contact_index, interval)."""
    if not published or not contacts:
        return set()
    tek_rpis = np.array(
        [[np.frombuffer(r, dtype="<u8") for r in per_interval_rpis(p.tek)] for p in published],
        dtype="<u8",
    )  # (T, 144, 2)
    intervals = np.array([[p.tek.valid_from + k for k in range(INTERVALS_PER_DAY)] for p in published])
    c_rpis = np.array([np.frombuffer(c.rpi, dtype="<u8") for c in contacts], dtype="<u8")  # (C, 2)
    c_int = np.array([math.floor(c.first_seen / 600) for c in contacts])
    same = (tek_rpis[:, :, None, 0] == c_rpis[None, None, :, 0]) & (
        tek_rpis[:, :, None, 1] == c_rpis[None, None, :, 1]
    )
    close = np.abs(intervals[:, :, None] - c_int[None, None, :]) <= tolerance
    t_idx, i_idx, c_idx = np.nonzero(same & close)
    return {(int(t), int(c), int(intervals[t, i])) for t, i, c in zip(t_idx, i_idx, c_idx)}


def nested_loop_matches(published, contacts, tolerance):
    """Plain-Python triple loop, for small instances."""
    out = set()
    for t, p in enumerate(published):
        rpis = per_interval_rpis(p.tek)
        for k, rpi in enumerate(rpis):
            for c, contact in enumerate(contacts):
                ci = math.floor(contact.first_seen / 600)
                if rpi == contact.rpi and abs(p.tek.valid_from + k - ci) <= tolerance:
                    out.add((t, c, p.tek.valid_from + k))
    return out


def brute_force_grid(logs, day, grid, exclude_ids=()):
    """Count points per cell by testing every cell's bounds against every point.

    ``grid`` supplies integer micro-degree origin/cell size and the shape.
    Bounds are materialised per row and column, so no floor division on
    coordinates is involved (the runtime uses floor division).
    """
    rows, cols = grid.rows, grid.cols
    lat0, lon0, size = grid.origin_lat_micro, grid.origin_lon_micro, grid.cell_micro
    lat_lo = lat0 + size * np.arange(rows, dtype=np.int64)
    lon_lo = lon0 + size * np.arange(cols, dtype=np.int64)
    pts = [(la, lo) for log in logs if log.log_id not in exclude_ids
           for la, lo, t in log.quantized_points() if int(t) // 86400 == day]
    if not pts:
        return [[0] * cols for _ in range(rows)]
    arr = np.array(pts, dtype=np.int64)
    in_row = (arr[:, :1] >= lat_lo[None, :]) & (arr[:, :1] < lat_lo[None, :] + size)  # (P, R)
    in_col = (arr[:, 1:] >= lon_lo[None, :]) & (arr[:, 1:] < lon_lo[None, :] + size)  # (P, C)
    counts = in_row.astype(np.int64).T @ in_col.astype(np.int64)
    return counts.tolist()


def nested_loop_grid(logs, day, grid):
    """Pure-Python equivalent of brute_force_grid for small grids."""
    rows, cols = grid.rows, grid.cols
    lat0, lon0, size = grid.origin_lat_micro, grid.origin_lon_micro, grid.cell_micro
    counts = [[0] * cols for _ in range(rows)]
    for log in logs:
        for lat_u, lon_u, t in log.quantized_points():
            if int(t) // 86400 != day:
                continue
            for r in range(rows):
                for c in range(cols):
                    if (lat0 + r * size <= lat_u < lat0 + (r + 1) * size
                            and lon0 + c * size <= lon_u < lon0 + (c + 1) * size):
                        counts[r][c] += 1
    return counts
