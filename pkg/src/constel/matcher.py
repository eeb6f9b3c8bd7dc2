"""
Fruit re-identification between a constellation map and a query cloud.

Pipeline: descriptor votes -> Hungarian assignment -> maximum-clique
distance-consistency filter -> RANSAC pose -> nearest-neighbour completion.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .clique import DEFAULT_MAX_NODES, max_clique
from .constellations import PointCloud, build_table
from .errors import DegenerateError, InsufficientMatchesError, NoConsensusError
from .geom import RansacParams, SimilarityTransform, ransac_transform
from .mapstore import ConstellationMap, query_codes

log = logging.getLogger(__name__)

STAGE_HUNGARIAN = "hungarian"
STAGE_CLIQUE = "clique-survivor"
STAGE_COMPLETED = "completed"


class VoteMatrix:
    """Sparse (query id, map id) -> vote count accumulator."""

    def __init__(self, counts: dict[tuple[int, int], int] | None = None):
        self.counts: dict[tuple[int, int], int] = {}
        for key, c in (counts or {}).items():
            if c >= 1:
                self.counts[(int(key[0]), int(key[1]))] = int(c)

    @classmethod
    def from_pairs(cls, pairs: np.ndarray) -> "VoteMatrix":
        vm = cls()
        if len(pairs):
            uniq, counts = np.unique(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=0, return_counts=True)
            vm.counts = {(int(q), int(m)): int(c) for (q, m), c in zip(uniq, counts)}
        return vm

    def __getitem__(self, key) -> int:
        return self.counts.get((int(key[0]), int(key[1])), 0)

    def __len__(self):
        return len(self.counts)

    def items(self):
        return sorted(self.counts.items())

    def query_ids(self) -> list[int]:
        return sorted({q for q, _ in self.counts})

    def map_ids(self) -> list[int]:
        return sorted({m for _, m in self.counts})

    def row(self, query_id: int) -> dict[int, int]:
        return {m: c for (q, m), c in self.counts.items() if q == query_id}

    def top_partner(self, query_id: int) -> int | None:
        row = self.row(query_id)
        if not row:
            return None
        return min(row, key=lambda m: (-row[m], m))

    def dense(self):
        """``(matrix, query_ids, map_ids)`` with rows/columns in ascending id order."""
        qs, ms = self.query_ids(), self.map_ids()
        qi = {q: i for i, q in enumerate(qs)}
        mi = {m: i for i, m in enumerate(ms)}
        M = np.zeros((len(qs), len(ms)), dtype=np.int64)
        for (q, m), c in self.counts.items():
            M[qi[q], mi[m]] = c
        return M, qs, ms


@dataclass(frozen=True)
class MatchParams:
    tau: float = 0.05
    min_votes: int = 2
    clique_epsilon: float = 0.05
    clique_log_epsilon: float = 0.05
    completion_radius: float | None = None  # defaults to ransac.inlier_threshold
    ransac: RansacParams = field(default_factory=RansacParams)
    candidates_m: int = 1
    seed: int = 0
    use_clique_filter: bool = True
    window: float | None = None  # local windowed pose estimation; None = one global transform
    clique_max_nodes: int = DEFAULT_MAX_NODES

    def __post_init__(self):
        if not (self.tau > 0 and self.clique_epsilon > 0 and self.clique_log_epsilon > 0):
            raise ValueError("tolerances must be > 0")
        if self.completion_radius is not None and not self.completion_radius > 0:
            raise ValueError("completion_radius must be > 0")
        if self.window is not None and not self.window > 0:
            raise ValueError("window must be > 0")
        if self.min_votes < 1 or not 1 <= self.candidates_m <= 5:
            raise ValueError("min_votes must be >= 1 and candidates_m in [1, 5]")

    @property
    def radius(self) -> float:
        return self.ransac.inlier_threshold if self.completion_radius is None else self.completion_radius


@dataclass(frozen=True)
class MatchResult:
    correspondences: list[tuple[int, int, str]]
    transform: SimilarityTransform
    inlier_ids: list[int]
    stats: dict = field(default_factory=dict)

    def pairs(self) -> list[tuple[int, int]]:
        return [(q, m) for q, m, _ in self.correspondences]

    def as_dict(self) -> dict[int, int]:
        return {q: m for q, m, _ in self.correspondences}


@dataclass(frozen=True)
class EvalReport:
    true_positives: int
    false_positives: int
    false_negatives: int
    precision: float
    recall: float


# -- stages -----------------------------------------------------------------

def vote_correspondences(cmap: ConstellationMap, query_cloud: PointCloud, params: MatchParams = MatchParams()) -> VoteMatrix:
    """Accumulate fruit-pair votes from descriptor matches.

    Each query constellation whose descriptor lies within ``tau`` of a map
    entry (up to ``candidates_m`` entries) adds one vote to each of its ``k``
    positionally aligned fruit pairs.
    """
    qtab = build_table(query_cloud, cmap.params)
    if len(qtab) == 0 or len(cmap) == 0:
        return VoteMatrix()
    dist, idx = query_codes(cmap, qtab.codes, params.tau, params.candidates_m)
    hit_q, hit_j = np.nonzero(idx < len(cmap))
    if len(hit_q) == 0:
        return VoteMatrix()
    q_members = qtab.members[hit_q]
    m_members = cmap.table.members[idx[hit_q, hit_j]]
    pairs = np.stack([q_members.reshape(-1), m_members.reshape(-1)], axis=1)
    return VoteMatrix.from_pairs(pairs)


def assign_hungarian(votes: VoteMatrix, min_votes: int = 2) -> list[tuple[int, int]]:
    """One-to-one assignment maximising total votes over cells with ``>= min_votes``.

    Sub-threshold cells are forbidden, not merely penalised. Rows and
    columns are laid out in ascending id order, which fixes the result when
    several assignments share the optimal total.
    """
    allowed = VoteMatrix({key: c for key, c in votes.counts.items() if c >= min_votes})
    if len(allowed) == 0:
        return []
    M, qs, ms = allowed.dense()
    rows, cols = linear_sum_assignment(-M)
    out = [(qs[r], ms[c]) for r, c in zip(rows, cols) if M[r, c] >= min_votes]
    return sorted(out)


def _pairwise(X: np.ndarray) -> np.ndarray:
    return np.linalg.norm(X[:, None, :] - X[None, :, :], axis=-1)


def consistency_graph(q_pos: np.ndarray, m_pos: np.ndarray, epsilon: float, metric: bool = True,
                      log_epsilon: float = 0.05):
    """Adjacency and discrepancy matrices of the distance-consistency graph.

    Metric mode links ``i, j`` when ``| |q_i - q_j| - |m_i - m_j| | <= epsilon``.
    Otherwise the log distance ratio, centred on its median, must be within
    ``log_epsilon``.
    """
    dq, dm = _pairwise(q_pos), _pairwise(m_pos)
    n = len(q_pos)
    if metric:
        disc = np.abs(dq - dm)
        adj = disc <= epsilon
    else:
        iu = np.triu_indices(n, 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            lr = np.log(dq) - np.log(dm)
        valid = np.isfinite(lr)
        centre = float(np.median(lr[iu][valid[iu]])) if np.any(valid[iu]) else 0.0
        disc = np.where(valid, np.abs(lr - centre), np.inf)
        adj = disc <= log_epsilon
        disc = np.where(valid, disc, 0.0)
    np.fill_diagonal(adj, False)
    np.fill_diagonal(disc, 0.0)
    return adj, disc


def clique_filter(correspondences, query_cloud: PointCloud, map_fruits: PointCloud, epsilon: float = 0.05,
                  metric: bool | None = None, log_epsilon: float = 0.05,
                  max_nodes: int = DEFAULT_MAX_NODES, info: dict | None = None) -> list[tuple[int, int]]:
    """Keep the correspondences forming a maximum distance-consistent clique.

    ``metric`` defaults to whether both clouds are metric. Output order
    follows the input order.
    """
    corr = [(int(q), int(m)) for q, m in correspondences]
    if len(corr) <= 1:
        return corr
    if metric is None:
        metric = query_cloud.metric and map_fruits.metric
    q_pos = query_cloud.positions_of([q for q, _ in corr])
    m_pos = map_fruits.positions_of([m for _, m in corr])
    adj, disc = consistency_graph(q_pos, m_pos, epsilon, metric, log_epsilon)
    keep, exact = max_clique(adj, disc, max_nodes=max_nodes)
    if not exact:
        log.warning("clique search hit its node budget on %d vertices; result may be suboptimal", len(corr))
    if info is not None:
        info["clique_exact"] = exact
    return [corr[i] for i in sorted(keep)]


def estimate_pose(correspondences, query_cloud: PointCloud, map_fruits: PointCloud,
                  ransac: RansacParams = RansacParams(), seed: int = 0):
    """RANSAC similarity (or rigid, for metric-to-metric) transform query -> map.

    Returns ``(transform, inlier_indices)`` into ``correspondences``.
    """
    corr = list(correspondences)
    if len(corr) < 3:
        raise NoConsensusError(f"need >= 3 correspondences, got {len(corr)}")
    with_scale = not (query_cloud.metric and map_fruits.metric)
    params = replace(ransac, with_scale=with_scale)
    src = query_cloud.positions_of([c[0] for c in corr])
    dst = map_fruits.positions_of([c[1] for c in corr])
    try:
        return ransac_transform(np.stack([src, dst], axis=1), params, seed=seed)
    except DegenerateError as exc:
        raise NoConsensusError(str(exc)) from exc


def complete_matches(transform: SimilarityTransform, matched, query_cloud: PointCloud, map_fruits: PointCloud,
                     radius: float, query_ids=None) -> list[tuple[int, int]]:
    """Pair still-unmatched query fruits with the nearest unmatched map fruits.

    Candidate pairs within ``radius`` (after applying ``transform``) are taken
    greedily by ascending distance, ties by ids, keeping the matching one to
    one. ``query_ids`` optionally restricts which query fruits may be added.
    """
    matched = list(matched)
    used_q = {int(q) for q, *_ in matched}
    used_m = {int(m) for _, m, *_ in matched}
    q_sel = np.array([int(i) not in used_q for i in query_cloud.ids], dtype=bool)
    if query_ids is not None:
        allowed = {int(i) for i in query_ids}
        q_sel &= np.array([int(i) in allowed for i in query_cloud.ids], dtype=bool)
    m_sel = np.array([int(i) not in used_m for i in map_fruits.ids], dtype=bool)
    if not q_sel.any() or not m_sel.any():
        return []
    q_ids, m_ids = query_cloud.ids[q_sel], map_fruits.ids[m_sel]
    moved = transform.apply(query_cloud.positions[q_sel])
    tree = cKDTree(map_fruits.positions[m_sel])
    cand = []
    for qi, nb in enumerate(tree.query_ball_point(moved, r=radius)):
        for mj in nb:
            d = float(np.linalg.norm(moved[qi] - map_fruits.positions[m_sel][mj]))
            cand.append((d, int(q_ids[qi]), int(m_ids[mj])))
    cand.sort()
    added, taken_q, taken_m = [], set(), set()
    for _, q, m in cand:
        if q in taken_q or m in taken_m:
            continue
        taken_q.add(q)
        taken_m.add(m)
        added.append((q, m))
    return sorted(added)


def _windows(query_cloud: PointCloud, width: float) -> list[np.ndarray]:
    # slabs of fixed width along the cloud's principal axis
    X = query_cloud.positions
    axis = np.linalg.svd(X - X.mean(axis=0), full_matrices=False)[2][0]
    s = (X - X.mean(axis=0)) @ axis
    bins = np.floor((s - s.min()) / width).astype(int)
    return [np.flatnonzero(bins == b) for b in np.unique(bins)]


def match_clouds(cmap: ConstellationMap, query_cloud: PointCloud, params: MatchParams = MatchParams()) -> MatchResult:
    """Re-identify the fruits of ``query_cloud`` in ``cmap`` and estimate the pose.

    Raises
    ------
    InsufficientMatchesError
        If fewer than three correspondences reach pose estimation or RANSAC
        finds no consensus.
    """
    map_fruits = cmap.fruits
    metric = query_cloud.metric and map_fruits.metric
    stats: dict = {}
    votes = vote_correspondences(cmap, query_cloud, params)
    stats["vote_cells"] = len(votes)
    hung = assign_hungarian(votes, params.min_votes)
    stats["hungarian"] = len(hung)
    if params.use_clique_filter and len(hung) >= 2:
        kept = clique_filter(hung, query_cloud, map_fruits, params.clique_epsilon, metric,
                             params.clique_log_epsilon, params.clique_max_nodes, info=stats)
        tag = STAGE_CLIQUE
    else:
        kept, tag = hung, STAGE_HUNGARIAN
    stats["clique"] = len(kept)
    if len(kept) < 3:
        raise InsufficientMatchesError(f"only {len(kept)} correspondences survived filtering")
    try:
        transform, inl = estimate_pose(kept, query_cloud, map_fruits, params.ransac, params.seed)
    except NoConsensusError as exc:
        raise InsufficientMatchesError(f"pose estimation failed: {exc}") from exc
    core = [kept[i] for i in inl]
    stats["ransac_inliers"] = len(core)

    if params.window is None:
        added = complete_matches(transform, core, query_cloud, map_fruits, params.radius)
    else:
        added = _windowed_completion(transform, core, query_cloud, map_fruits, params, stats)
    stats["completed"] = len(added)
    stats["scale"] = transform.scale

    src = query_cloud.positions_of([q for q, _ in core])
    dst = map_fruits.positions_of([m for _, m in core])
    stats["rms_residual"] = float(np.sqrt(np.mean(np.sum((transform.apply(src) - dst) ** 2, axis=1))))
    corr = [(q, m, tag) for q, m in core] + [(q, m, STAGE_COMPLETED) for q, m in added]
    corr.sort(key=lambda c: (c[0], c[1]))
    return MatchResult(corr, transform, sorted(q for q, _ in core), stats)


def _windowed_completion(global_t, core, query_cloud, map_fruits, params, stats):
    added_all: list[tuple[int, int]] = []
    matched = list(core)
    core_q = {q: m for q, m in core}
    n_local = 0
    for rows in _windows(query_cloud, params.window):
        ids = [int(i) for i in query_cloud.ids[rows]]
        local = [(q, core_q[q]) for q in ids if q in core_q]
        t = global_t
        if len(local) >= max(3, params.ransac.min_inliers):
            try:
                t, _ = estimate_pose(local, query_cloud, map_fruits, params.ransac, params.seed)
                n_local += 1
            except NoConsensusError:
                pass
        add = complete_matches(t, matched, query_cloud, map_fruits, params.radius, query_ids=ids)
        matched.extend(add)
        added_all.extend(add)
    stats["local_transforms"] = n_local
    return sorted(added_all)


def evaluate(result: MatchResult, ground_truth, min_frames: int = 0,
             query_cloud: PointCloud | None = None, map_fruits: PointCloud | None = None) -> EvalReport:
    """Precision/recall of ``result`` against ground-truth ``(query id, map id)`` pairs.

    When clouds are given, fruits seen in fewer than ``min_frames`` frames are
    dropped from both sides before counting. Precision with no predictions
    and recall with no ground truth are reported as 0.
    """
    gt = {(int(q), int(m)) for q, m in ground_truth}
    pred = {(int(q), int(m)) for q, m in result.pairs()}

    def visible(cloud, fid):
        if cloud is None or min_frames <= 0:
            return True
        return int(cloud.frames_seen[cloud.index_of[fid]]) >= min_frames if fid in cloud.index_of else False

    def keep(p):
        return visible(query_cloud, p[0]) and visible(map_fruits, p[1])

    gt = {p for p in gt if keep(p)}
    pred = {p for p in pred if keep(p)}
    tp = len(pred & gt)
    fp = len(pred - gt)
    fn = len(gt - pred)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return EvalReport(tp, fp, fn, precision, recall)


def localize(cmap: ConstellationMap, query_cloud: PointCloud, params: MatchParams = MatchParams()) -> SimilarityTransform:
    """Pose of the query frame in map coordinates (query -> map transform)."""
    return match_clouds(cmap, query_cloud, params).transform


def rotation_error(a: SimilarityTransform, b: SimilarityTransform) -> float:
    c = (np.trace(a.rotation @ b.rotation.T) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))
