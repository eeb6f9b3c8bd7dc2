"""
Constellation map: descriptor index over hashed constellations plus the
fruit table they refer to, with a deterministic JSON file format.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .constellations import ConstellationTable, EnumerationParams, PointCloud, build_table, eligible
from .errors import (
    ChecksumError,
    DimensionMismatchError,
    InsufficientPointsError,
    MalformedMapError,
    VersionMismatchError,
)
from .starhash import Descriptor

FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class MapEntry:
    descriptor: Descriptor
    member_ids: tuple[int, ...]
    anchor_id: int


class ConstellationMap:
    """Hashed constellations of one cloud, queryable by descriptor."""

    def __init__(self, params: EnumerationParams, fruits: PointCloud, table: ConstellationTable,
                 format_version: int = FORMAT_VERSION):
        if table.k != params.k:
            raise ValueError("table k does not match params")
        known = set(int(i) for i in fruits.ids)
        if len(table) and not set(np.unique(table.members).tolist()) <= known:
            raise ValueError("entries reference fruit ids missing from the fruit table")
        self.format_version = format_version
        self.params = params
        self.fruits = fruits
        self.table = table

    @property
    def k(self) -> int:
        return self.params.k

    @property
    def source_id(self) -> str:
        return self.fruits.source_id

    @property
    def metric(self) -> bool:
        return self.fruits.metric

    def __len__(self):
        return len(self.table)

    @property
    def entries(self) -> list[MapEntry]:
        t = self.table
        return [
            MapEntry(Descriptor(c, self.k), tuple(int(i) for i in m), int(a))
            for c, m, a in zip(t.codes, t.members, t.anchors)
        ]

    @cached_property
    def index(self) -> cKDTree:
        return cKDTree(self.table.codes if len(self.table) else np.empty((0, 3 * (self.k - 2))))

    def __eq__(self, other):
        if not isinstance(other, ConstellationMap):
            return NotImplemented
        a, b = self, other
        return (
            a.format_version == b.format_version
            and a.params == b.params
            and a.source_id == b.source_id
            and a.metric == b.metric
            and np.array_equal(a.fruits.ids, b.fruits.ids)
            and np.array_equal(a.fruits.positions, b.fruits.positions)
            and np.array_equal(a.fruits.frames_seen, b.fruits.frames_seen)
            and np.array_equal(a.table.members, b.table.members)
            and np.array_equal(a.table.anchors, b.table.anchors)
            and np.array_equal(a.table.codes, b.table.codes)
        )

    __hash__ = None

    def __repr__(self):
        return f"ConstellationMap(source_id={self.source_id!r}, k={self.k}, entries={len(self)})"


def build_map(cloud: PointCloud, params: EnumerationParams = EnumerationParams()) -> ConstellationMap:
    """Hash every constellation of ``cloud`` into a new map."""
    if len(eligible(cloud, params.min_frames)) < params.k:
        raise InsufficientPointsError(
            f"need at least k={params.k} points seen in >= {params.min_frames} frames"
        )
    return ConstellationMap(params, cloud, build_table(cloud, params))


def _check_query(cmap: ConstellationMap, codes: np.ndarray):
    if codes.shape[-1] != 3 * (cmap.k - 2):
        raise DimensionMismatchError(
            f"descriptor length {codes.shape[-1]} does not match map k={cmap.k}"
        )


def query_codes(cmap: ConstellationMap, codes: np.ndarray, tau: float, m: int = 1):
    """Batched nearest-entry lookup.

    Returns ``(dist, idx)`` of shape ``(Q, m)``; misses have ``idx == len(cmap)``
    and ``dist == inf``. Matches satisfy ``dist <= tau`` and are sorted by
    ascending ``(dist, idx)``.
    """
    codes = np.atleast_2d(np.asarray(codes, dtype=float))
    _check_query(cmap, codes)
    if tau < 0 or m < 1:
        raise ValueError("tau must be >= 0 and m >= 1")
    E = len(cmap)
    if E == 0 or len(codes) == 0:
        return np.full((len(codes), m), np.inf), np.full((len(codes), m), E, dtype=np.int64)
    kq = min(m + 1, E)
    dist, idx = cmap.index.query(codes, k=kq, distance_upper_bound=np.nextafter(tau, np.inf))
    dist = dist.reshape(len(codes), kq)
    idx = idx.reshape(len(codes), kq)
    miss = ~(dist <= tau)
    dist[miss], idx[miss] = np.inf, E
    order = np.lexsort((idx, dist), axis=1)
    dist = np.take_along_axis(dist, order, axis=1)[:, :m]
    idx = np.take_along_axis(idx, order, axis=1)[:, :m]
    if kq < m:
        pad = m - kq
        dist = np.pad(dist, ((0, 0), (0, pad)), constant_values=np.inf)
        idx = np.pad(idx, ((0, 0), (0, pad)), constant_values=E)
    return dist, idx


def query_nearest(cmap: ConstellationMap, d: Descriptor, tau: float, m: int = 1) -> list[tuple[MapEntry, float]]:
    """Up to ``m`` entries within descriptor distance ``tau``, nearest first."""
    if d.k != cmap.k:
        raise DimensionMismatchError(f"descriptor k={d.k} does not match map k={cmap.k}")
    dist, idx = query_codes(cmap, d.code[None], tau, m)
    t = cmap.table
    out = []
    for dd, i in zip(dist[0], idx[0]):
        if i >= len(cmap):
            break
        entry = MapEntry(Descriptor(t.codes[i], cmap.k), tuple(int(x) for x in t.members[i]), int(t.anchors[i]))
        out.append((entry, float(dd)))
    return out


# -- persistence -------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, allow_nan=False, separators=(",", ":"))


def _payload(cmap: ConstellationMap) -> dict:
    p = cmap.params
    f = cmap.fruits
    t = cmap.table
    return {
        "format_version": cmap.format_version,
        "params": {"k": p.k, "n": p.n, "min_frames": p.min_frames, "max_per_anchor": p.max_per_anchor},
        "source": {"source_id": cmap.source_id, "metric": cmap.metric},
        "fruits": [
            {"id": i, "x": x, "y": y, "z": z, "frames_seen": n}
            for i, (x, y, z), n in zip(f.ids.tolist(), f.positions.tolist(), f.frames_seen.tolist())
        ],
        "entries": [
            {"anchor": a, "members": m, "code": code}
            for a, m, code in zip(t.anchors.tolist(), t.members.tolist(), t.codes.tolist())
        ],
    }


def dumps(cmap: ConstellationMap) -> str:
    body = _dumps(_payload(cmap))
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    # checksum is the last key, so splice it in rather than serialise twice
    return body[:-1] + f',"checksum":"{digest}"}}\n'


def save(cmap: ConstellationMap, destination) -> None:
    """Write ``cmap`` as JSON. Output is byte-identical for identical maps."""
    text = dumps(cmap)
    if hasattr(destination, "write"):
        destination.write(text)
        return
    path = Path(destination)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def loads(text: str) -> ConstellationMap:
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedMapError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise MalformedMapError("missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise VersionMismatchError(
            f"map format_version {doc['format_version']!r}, this build reads {FORMAT_VERSION}"
        )
    checksum = doc.pop("checksum", None)
    if not isinstance(checksum, str):
        raise MalformedMapError("missing checksum")
    if hashlib.sha256(_dumps(doc).encode("utf-8")).hexdigest() != checksum:
        raise ChecksumError("map checksum does not match its contents")
    try:
        p = doc["params"]
        params = EnumerationParams(int(p["k"]), int(p["n"]), int(p["min_frames"]), p.get("max_per_anchor"))
        src = doc["source"]
        fr = doc["fruits"]
        fruits = PointCloud(
            [f["id"] for f in fr],
            np.array([[f["x"], f["y"], f["z"]] for f in fr], dtype=float).reshape(-1, 3),
            [f["frames_seen"] for f in fr],
            source_id=str(src["source_id"]),
            metric=bool(src["metric"]),
        )
        ent = doc["entries"]
        k = params.k
        members = np.array([e["members"] for e in ent], dtype=np.int64).reshape(-1, k)
        codes = np.array([e["code"] for e in ent], dtype=float).reshape(-1, 3 * (k - 2))
        anchors = np.array([e["anchor"] for e in ent], dtype=np.int64)
        if not (len(members) == len(codes) == len(anchors) == len(ent)):
            raise ValueError("inconsistent entry lengths")
        return ConstellationMap(params, fruits, ConstellationTable(members, anchors, codes, k))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedMapError(f"invalid map document: {exc}") from exc


def load(source) -> ConstellationMap:
    """Read a map written by :func:`save`."""
    if hasattr(source, "read"):
        return loads(source.read())
    try:
        text = Path(source).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedMapError(f"not UTF-8: {exc}") from exc
    return loads(text)
