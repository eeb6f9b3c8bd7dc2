"""Reading and writing point clouds and correspondence tables (CSV / JSON)."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .constellations import PointCloud
from .synthbench import fmt

CLOUD_COLUMNS = ["id", "x", "y", "z", "frames_seen"]
MATCH_COLUMNS = ["query_id", "map_id", "stage"]


class CloudFormatError(ValueError):
    """A cloud or correspondence file could not be parsed."""


def _int(value: str, what: str, line: int) -> int:
    try:
        v = int(value)
    except (TypeError, ValueError):
        raise CloudFormatError(f"line {line}: {what} {value!r} is not an integer") from None
    return v


def _real(value: str, what: str, line: int) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise CloudFormatError(f"line {line}: {what} {value!r} is not a number") from None
    if not math.isfinite(v):
        raise CloudFormatError(f"line {line}: {what} must be finite")
    return v


def _build(ids, pos, frames, source_id, metric) -> PointCloud:
    seen = set()
    for i in ids:
        if i in seen:
            raise CloudFormatError(f"duplicate fruit id {i}")
        seen.add(i)
    try:
        return PointCloud(ids, np.array(pos, dtype=float).reshape(-1, 3), frames, source_id, metric)
    except ValueError as exc:
        raise CloudFormatError(str(exc)) from exc


def parse_cloud_csv(text: str, source_id: str = "", metric: bool = True) -> PointCloud:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != CLOUD_COLUMNS:
        raise CloudFormatError(f"header must be {','.join(CLOUD_COLUMNS)}")
    ids, pos, frames = [], [], []
    for ln, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(CLOUD_COLUMNS):
            raise CloudFormatError(f"line {ln}: expected {len(CLOUD_COLUMNS)} fields, got {len(row)}")
        fid = _int(row[0], "id", ln)
        if fid < 0:
            raise CloudFormatError(f"line {ln}: id must be non-negative")
        ids.append(fid)
        pos.append([_real(row[j], CLOUD_COLUMNS[j], ln) for j in (1, 2, 3)])
        frames.append(_int(row[4], "frames_seen", ln))
    return _build(ids, pos, frames, source_id, metric)


def parse_cloud_json(text: str, source_id: str = "", metric: bool | None = None) -> PointCloud:
    try:
        doc = json.loads(text)
        fruits = doc["fruits"]
        ids = [int(f["id"]) for f in fruits]
        pos = [[float(f["x"]), float(f["y"]), float(f["z"])] for f in fruits]
        frames = [int(f.get("frames_seen", 0)) for f in fruits]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CloudFormatError(f"invalid cloud JSON: {exc}") from exc
    if not all(math.isfinite(c) for p in pos for c in p):
        raise CloudFormatError("coordinates must be finite")
    m = bool(doc.get("metric", True)) if metric is None else metric
    return _build(ids, pos, frames, str(doc.get("source_id", source_id)), m)


def read_cloud(path, metric: bool | None = None) -> PointCloud:
    """Load a cloud from ``.csv`` or ``.json``; ``metric=None`` means file default (CSV: metric)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise CloudFormatError(f"{path}: not UTF-8") from exc
    if path.suffix.lower() == ".json":
        return parse_cloud_json(text, path.stem, metric)
    return parse_cloud_csv(text, path.stem, True if metric is None else metric)


def cloud_csv(cloud: PointCloud) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CLOUD_COLUMNS)
    for i, (x, y, z), f in zip(cloud.ids, cloud.positions, cloud.frames_seen):
        w.writerow([int(i), fmt(x), fmt(y), fmt(z), int(f)])
    return buf.getvalue()


def write_cloud(cloud: PointCloud, path) -> None:
    Path(path).write_text(cloud_csv(cloud), encoding="utf-8")


def read_pairs(path) -> list[tuple[int, int]]:
    """Ground-truth CSV with header ``query_id,map_id`` (extra columns ignored)."""
    rows = list(csv.reader(io.StringIO(Path(path).read_text(encoding="utf-8"))))
    if not rows or [c.strip() for c in rows[0][:2]] != ["query_id", "map_id"]:
        raise CloudFormatError("ground-truth header must start with query_id,map_id")
    out = []
    for ln, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        out.append((_int(row[0], "query_id", ln), _int(row[1], "map_id", ln)))
    return out


def matches_csv(correspondences) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MATCH_COLUMNS)
    for q, m, stage in correspondences:
        w.writerow([int(q), int(m), stage])
    return buf.getvalue()
