"""
Semantic point clouds and constellation enumeration.

Each anchor fruit is combined with every ``(k - 1)``-subset of its ``n``
nearest neighbours; the resulting groups are de-duplicated as id sets,
degenerate ones are dropped and the survivors are hashed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations

import numpy as np
from scipy.spatial import cKDTree

from . import starhash
from .errors import InsufficientPointsError
from .geom import point_line_distance


@dataclass(frozen=True)
class FruitPoint:
    id: int
    position: tuple[float, float, float]
    frames_seen: int = 0


class PointCloud:
    """Sparse cloud of identified 3D centroids.

    Stored column-wise (``ids``, ``positions``, ``frames_seen`` arrays) so the
    numeric code never loops over :class:`FruitPoint` objects.
    """

    def __init__(self, ids, positions, frames_seen=None, source_id: str = "", metric: bool = True):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        if frames_seen is None:
            frames_seen = np.zeros(len(ids), dtype=np.int64)
        frames_seen = np.asarray(frames_seen, dtype=np.int64).reshape(-1)
        if not (len(ids) == len(positions) == len(frames_seen)):
            raise ValueError("ids, positions and frames_seen must have equal length")
        if len(np.unique(ids)) != len(ids):
            uniq, counts = np.unique(ids, return_counts=True)
            raise ValueError(f"duplicate fruit id {int(uniq[counts > 1][0])}")
        if np.any(ids < 0) or np.any(frames_seen < 0):
            raise ValueError("ids and frames_seen must be non-negative")
        if not np.all(np.isfinite(positions)):
            raise ValueError("positions must be finite")
        for a in (ids, positions, frames_seen):
            a.setflags(write=False)
        self.ids = ids
        self.positions = positions
        self.frames_seen = frames_seen
        self.source_id = source_id
        self.metric = bool(metric)

    @classmethod
    def from_points(cls, points, source_id: str = "", metric: bool = True) -> "PointCloud":
        points = list(points)
        return cls(
            [p.id for p in points],
            np.array([p.position for p in points], dtype=float).reshape(-1, 3),
            [p.frames_seen for p in points],
            source_id=source_id,
            metric=metric,
        )

    @property
    def points(self) -> list[FruitPoint]:
        return [
            FruitPoint(int(i), tuple(float(c) for c in p), int(f))
            for i, p, f in zip(self.ids, self.positions, self.frames_seen)
        ]

    def __len__(self):
        return len(self.ids)

    def __repr__(self):
        return f"PointCloud(source_id={self.source_id!r}, n={len(self)}, metric={self.metric})"

    @cached_property
    def index_of(self) -> dict[int, int]:
        return {int(i): r for r, i in enumerate(self.ids)}

    def position(self, fruit_id: int) -> np.ndarray:
        return self.positions[self.index_of[int(fruit_id)]]

    def positions_of(self, fruit_ids) -> np.ndarray:
        idx = [self.index_of[int(i)] for i in fruit_ids]
        return self.positions[idx]

    def subset(self, mask_or_index) -> "PointCloud":
        sel = np.asarray(mask_or_index)
        return PointCloud(
            self.ids[sel], self.positions[sel], self.frames_seen[sel], self.source_id, self.metric
        )

    def with_positions(self, positions, metric: bool | None = None) -> "PointCloud":
        return PointCloud(
            self.ids,
            positions,
            self.frames_seen,
            self.source_id,
            self.metric if metric is None else metric,
        )

    def span(self) -> float:
        """Largest bounding-box extent."""
        if len(self) == 0:
            return 0.0
        return float(np.ptp(self.positions, axis=0).max())

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.positions)


@dataclass(frozen=True)
class Constellation:
    member_ids: tuple[int, ...]  # A, B, then ascending canonical x
    anchor_id: int


@dataclass(frozen=True)
class EnumerationParams:
    k: int = 5
    n: int = 10
    min_frames: int = 5
    max_per_anchor: int | None = None  # None means C(n, k-1)

    def __post_init__(self):
        if self.k < 4:
            raise ValueError("k must be >= 4")
        if self.n < self.k - 1:
            raise ValueError("n must be >= k - 1")
        if self.max_per_anchor is not None and self.max_per_anchor < 1:
            raise ValueError("max_per_anchor must be positive")

    @property
    def per_anchor_cap(self) -> int:
        full = math.comb(self.n, self.k - 1)
        return full if self.max_per_anchor is None else min(full, self.max_per_anchor)


def _neighbors_exact(cloud: PointCloud, row: int, n: int) -> np.ndarray:
    # rows of the n nearest points to `row`, distance ties broken by id
    d = np.linalg.norm(cloud.positions - cloud.positions[row], axis=1)
    others = np.delete(np.arange(len(cloud)), row)
    order = np.lexsort((cloud.ids[others], d[others]))
    return others[order[:n]]


def knn(cloud: PointCloud, query_id: int, n: int) -> list[int]:
    """Ids of the ``n`` nearest fruits to ``query_id`` (itself excluded), nearest first."""
    if int(query_id) not in cloud.index_of:
        raise KeyError(f"unknown fruit id {query_id}")
    if len(cloud) < n + 1:
        raise InsufficientPointsError(f"cloud has {len(cloud)} points, need {n + 1}")
    rows = _knn_rows(cloud, np.array([cloud.index_of[int(query_id)]]), n)[0]
    return [int(i) for i in cloud.ids[rows]]


def _knn_rows(cloud: PointCloud, rows: np.ndarray, n: int) -> np.ndarray:
    """Neighbour rows (len(rows), n), exact, deterministic under ties."""
    N = len(cloud)
    kq = min(n + 2, N)
    dist, idx = cloud.tree.query(cloud.positions[rows], k=kq)
    dist = dist.reshape(len(rows), kq)
    idx = idx.reshape(len(rows), kq)
    out = np.empty((len(rows), n), dtype=np.int64)
    for r, (row, d, ix) in enumerate(zip(rows, dist, idx)):
        keep = ix != row
        if np.count_nonzero(~keep) != 1:
            out[r] = _neighbors_exact(cloud, row, n)
            continue
        d, ix = d[keep], ix[keep]
        # ties straddling the cut or inside the list must be ordered by id
        boundary_tie = len(d) > n and d[n] <= d[n - 1] * (1 + 1e-12)
        inner_tie = np.any(np.diff(d[:n]) <= 1e-12 * d[1:n])
        if boundary_tie or inner_tie:
            out[r] = _neighbors_exact(cloud, row, n)
        else:
            out[r] = ix[:n]
    return out


def is_degenerate(points) -> tuple[bool, str | None]:
    """Check whether a constellation is too degenerate to canonicalise."""
    P = np.asarray(points, dtype=float)
    D = np.linalg.norm(P[:, None] - P[None], axis=-1)
    if D.max() < starhash.COINCIDENT_EPS:
        return True, "all points coincide"
    iu = np.triu_indices(len(P), 1)
    if D[iu].min() < starhash.COINCIDENT_EPS:
        return True, "coincident points"
    a, b = starhash.select_ab(P)
    ab = np.linalg.norm(P[b] - P[a])
    others = [i for i in range(len(P)) if i not in (a, b)]
    far = max(point_line_distance(P[i], P[a], P[b]) for i in others) if others else 0.0
    if far < starhash.COLLINEAR_FRACTION * ab:
        return True, "collinear"
    return False, None


@dataclass
class ConstellationTable:
    """Columnar set of hashed constellations (the enumeration output)."""

    members: np.ndarray  # (M, k) fruit ids in canonical order
    anchors: np.ndarray  # (M,)
    codes: np.ndarray  # (M, 3(k-2))
    k: int = field(default=5)

    def __len__(self):
        return len(self.anchors)

    def constellations(self) -> list[Constellation]:
        return [
            Constellation(tuple(int(i) for i in m), int(a)) for m, a in zip(self.members, self.anchors)
        ]


def eligible(cloud: PointCloud, min_frames: int) -> PointCloud:
    """Fruits seen in at least ``min_frames`` frames."""
    return cloud.subset(cloud.frames_seen >= min_frames)


def build_table(cloud: PointCloud, params: EnumerationParams) -> ConstellationTable:
    """Enumerate, de-duplicate, filter and hash all constellations of a cloud."""
    k = params.k
    pool = eligible(cloud, params.min_frames)
    N = len(pool)
    empty = ConstellationTable(
        np.empty((0, k), dtype=np.int64), np.empty(0, dtype=np.int64), np.empty((0, 3 * (k - 2))), k
    )
    if N < k:
        return empty
    n_eff = min(params.n, N - 1)
    combos = np.array(list(combinations(range(n_eff), k - 1)), dtype=np.int64)
    combos = combos[: params.per_anchor_cap]

    anchor_rows = np.argsort(pool.ids, kind="stable")
    nbrs = _knn_rows(pool, anchor_rows, n_eff)
    groups = np.concatenate(
        [
            np.repeat(anchor_rows, len(combos))[:, None],
            nbrs[:, combos].reshape(-1, k - 1),
        ],
        axis=1,
    )
    anchors = pool.ids[groups[:, 0]]
    key = np.sort(pool.ids[groups], axis=1)
    _, first = np.unique(key, axis=0, return_index=True)
    first.sort()
    groups, anchors = groups[first], anchors[first]

    c = starhash.canonicalize(pool.positions[groups])
    ok = ~c.degenerate
    codes = starhash.codes_from_canon(c)[ok]
    rows_in_order = np.take_along_axis(groups, c.order, axis=1)[ok]
    members = pool.ids[rows_in_order]
    anchors = anchors[ok]
    order = np.lexsort(tuple(members[:, j] for j in range(k - 1, -1, -1)) + (anchors,))
    return ConstellationTable(members[order], anchors[order], codes[order], k)


def enumerate_constellations(cloud: PointCloud, params: EnumerationParams = EnumerationParams()) -> list[Constellation]:
    """All non-degenerate, de-duplicated constellations of ``cloud``.

    Every anchor that passes the ``min_frames`` filter contributes itself
    plus each ``(k-1)``-subset of its ``n`` nearest (eligible) neighbours, in
    lexicographic order over the distance-ranked neighbour list and capped
    at ``max_per_anchor``. A group produced by several anchors is kept once,
    attributed to the smallest anchor id.
    """
    return build_table(cloud, params).constellations()
