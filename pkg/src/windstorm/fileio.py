"""Portable file formats: binary field stacks, CSV track and catalog files.

Field stack layout (little-endian throughout):
  bytes 0-7   magic ``WSFSTK01``
  u32 n_x, u32 n_y, f64 cell_size, f64 origin_lon, f64 origin_lat,
  u32 n_t, u8 scale_tag
  n_t rasters, each n_y * n_x float32, row-major.

scale_tag: 0 = observed, 1 = exp1, 2 = gauss, 255 = mask (0/1 rasters).
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .core import MASK_TAG, CellMask, FieldStack, Grid, StormTrack, TrackPoint
from .extract import Ellipse, FootprintFeatures, FootprintStep, WindstormRecord

MAGIC = b"WSFSTK01"
_HEADER = struct.Struct("<IIdddIB")
_TAG_CODES = {"observed": 0, "exp1": 1, "gauss": 2}
_TAG_NAMES = {v: k for k, v in _TAG_CODES.items()}


class FormatError(ValueError):
    """Malformed or truncated file; message names the byte offset."""


def write_field_stack(path, stack: FieldStack) -> None:
    path = Path(path)
    tag = _TAG_CODES[stack.scale_tag]
    _write_raster_file(path, stack.grid, stack.values, len(stack.times), tag,
                       times=stack.times)


def _write_raster_file(path, grid: Grid, values, n_t, tag, times=None):
    if times is not None and (len(times) != n_t or
                              (n_t > 1 and not np.all(np.diff(times) > 0))):
        raise ValueError("times must be strictly increasing and match n_t")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(grid.n_x, grid.n_y, grid.cell_size,
                              grid.origin_lon, grid.origin_lat, n_t, tag))
        data = np.ascontiguousarray(values, dtype="<f4")
        fh.write(data.tobytes())


def read_field_stack(path) -> FieldStack:
    grid, values, tag = _read_raster_file(path)
    if tag == MASK_TAG:
        raise FormatError(f"{path}: scale_tag 255 is a mask file; use read_mask")
    return FieldStack(grid, np.arange(1, len(values) + 1), values, _TAG_NAMES[tag])


def _read_raster_file(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0")
    header_end = 8 + _HEADER.size
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    n_x, n_y, cell_size, olon, olat, n_t, tag = _HEADER.unpack(raw[8:header_end])
    if tag not in _TAG_NAMES and tag != MASK_TAG:
        raise FormatError(f"{path}: unknown scale_tag {tag} at byte offset {header_end - 1}")
    try:
        grid = Grid(n_x, n_y, cell_size, olon, olat)
    except ValueError as exc:
        raise FormatError(f"{path}: invalid grid header: {exc}") from exc
    expected = n_t * n_y * n_x * 4
    if len(raw) - header_end != expected:
        raise FormatError(
            f"{path}: payload is {len(raw) - header_end} bytes at byte offset "
            f"{header_end}, expected {expected}"
        )
    values = np.frombuffer(raw[header_end:], dtype="<f4").reshape(n_t, n_y, n_x)
    return grid, values.copy(), tag


def write_mask(path, mask: CellMask) -> None:
    values = mask.included[None].astype("<f4")
    _write_raster_file(path, mask.grid, values, 1, MASK_TAG)


def read_mask(path) -> CellMask:
    grid, values, tag = _read_raster_file(path)
    if tag != MASK_TAG:
        raise FormatError(f"{path}: not a mask file (scale_tag {tag})")
    return CellMask(grid, values[0] > 0.5)


# ---------------------------------------------------------------------------
# Track CSV
# ---------------------------------------------------------------------------

TRACK_HEADER = ["track_id", "t", "lon", "lat", "vorticity"]


def write_tracks(path, tracks) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACK_HEADER)
        for track in tracks:
            for p in track.points:
                writer.writerow([track.id, p.t, f"{p.lon:.9g}", f"{p.lat:.9g}",
                                 f"{p.vorticity:.9g}"])


def read_tracks(path) -> list[StormTrack]:
    """Read tracks grouped by id; each track's steps must already be 1..duration."""
    path = Path(path)
    by_id: dict[str, list[TrackPoint]] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACK_HEADER:
            raise FormatError(f"{path}: bad header {header!r}, expected {TRACK_HEADER!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            tid = row[0]
            try:
                t = int(row[1])
                lon, lat, vort = float(row[2]), float(row[3]), float(row[4])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric field: {exc}") from exc
            if vort <= 0:
                raise FormatError(f"{path}:{lineno}: vorticity must be > 0, got {vort}")
            if tid not in by_id:
                by_id[tid] = []
                order.append(tid)
            by_id[tid].append(TrackPoint(t, lon, lat, vort))

    tracks = []
    for tid in order:
        points = sorted(by_id[tid], key=lambda p: p.t)
        ts = [p.t for p in points]
        if ts != list(range(1, len(ts) + 1)):
            raise FormatError(f"{path}: track {tid}: non-consecutive time steps {ts}")
        tracks.append(StormTrack(tid, points))
    return tracks


# ---------------------------------------------------------------------------
# Footprint catalog CSV
# ---------------------------------------------------------------------------

CATALOG_HEADER = ["track_id", "t", "active", "A", "B", "W", "R_E", "Theta_E",
                  "R_W", "Theta_W", "Gamma", "cx", "cy", "Exx", "Exy", "Eyy"]


def write_catalog(path, records) -> None:
    """One row per track step; inactive steps carry active=0 and blank fields."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CATALOG_HEADER)
        for record in records:
            for t in range(1, record.duration + 1):
                step = record.steps.get(t)
                if step is None:
                    writer.writerow([record.track_id, t, 0] + [""] * 13)
                    continue
                f, e = step.features, step.ellipse
                fields = [f.a, f.b, f.w, f.r_e, f.theta_e, f.r_w, f.theta_w,
                          f.gamma, e.centre[0], e.centre[1],
                          e.shape[0, 0], e.shape[0, 1], e.shape[1, 1]]
                writer.writerow([record.track_id, t, 1]
                                + [f"{v:.9g}" for v in fields])


def read_catalog(path) -> list[WindstormRecord]:
    path = Path(path)
    records: dict[str, WindstormRecord] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CATALOG_HEADER:
            raise FormatError(f"{path}: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CATALOG_HEADER):
                raise FormatError(f"{path}:{lineno}: expected "
                                  f"{len(CATALOG_HEADER)} fields")
            tid, t, active = row[0], int(row[1]), int(row[2])
            if tid not in records:
                records[tid] = WindstormRecord(tid, 0)
                order.append(tid)
            record = records[tid]
            record.duration = max(record.duration, t)
            if not active:
                continue
            try:
                vals = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric field: {exc}") from exc
            a, b, w, r_e, th_e, r_w, th_w, gamma, cx, cy, exx, exy, eyy = vals
            features = FootprintFeatures(t, a, b, w, r_e, th_e, r_w, th_w, gamma)
            ellipse = Ellipse(np.array([cx, cy]),
                              np.array([[exx, exy], [exy, eyy]]))
            record.steps[t] = FootprintStep(ellipse, features)
    return [records[tid] for tid in order]
