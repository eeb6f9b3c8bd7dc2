"""
Synthetic orchards and the robustness, matching and trajectory experiments.

All randomness comes from explicit seeds; experiment cells derive their own
generators from ``(seed, cell, repeat)`` so cells can run in any order.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .constellations import EnumerationParams, PointCloud
from .errors import InfeasibleSpecError, InsufficientMatchesError
from .geom import SimilarityTransform, random_rotation, rotation_angle
from .mapstore import ConstellationMap, build_map
from .matcher import EvalReport, MatchParams, evaluate, match_clouds


@dataclass(frozen=True)
class OrchardSpec:
    """A single row of trees with fruits scattered in spherical canopies."""

    trees: int = 5
    fruits_per_tree: int = 60
    fruits_spread: int = 0  # per-tree count drawn uniformly from mean +- spread
    tree_spacing: float = 2.0
    canopy_radius: float = 1.0
    canopy_height: float = 1.8
    min_fruit_separation: float = 0.1
    row_length: float | None = None  # if set, trees are spread evenly over this length
    min_frames: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.trees < 1 or self.fruits_per_tree < 1 or self.fruits_spread < 0:
            raise ValueError("trees and fruits_per_tree must be positive")
        if not (self.tree_spacing > 0 and self.canopy_radius > 0 and self.min_fruit_separation > 0):
            raise ValueError("dimensions must be positive")
        if self.row_length is not None and not self.row_length > 0:
            raise ValueError("row_length must be positive")
        if self.min_fruit_separation >= self.canopy_radius:
            raise ValueError("min_fruit_separation must be smaller than canopy_radius")


@dataclass(frozen=True)
class PerturbSpec:
    occlusion_fraction: float = 0.0
    noise_std: float = 0.0
    transform: SimilarityTransform | None = None
    random_rigid: bool = False  # draw a rigid transform from the seed when transform is None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.occlusion_fraction < 1.0:
            raise ValueError("occlusion_fraction must be in [0, 1)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass(frozen=True)
class RobustnessRow:
    occlusion_fraction: float
    noise_std: float
    repeats: int
    mean_error: float  # nan when every repeat failed to match
    std_error: float
    failures: int = 0


@dataclass(frozen=True)
class TrajectorySpec:
    """Camera path; waypoints are world-to-camera extrinsics (scale 1)."""

    waypoints: tuple[SimilarityTransform, ...]
    visibility_range: float = 4.0
    field_of_view: float = math.radians(50.0)  # half-angle of the view cone
    detection_noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if len(self.waypoints) < 2:
            raise ValueError("need at least two waypoints")


@dataclass(frozen=True)
class FramePose:
    frame: int
    visible: int
    tx_err: float
    ty_err: float
    tz_err: float
    rot_err_rad: float
    estimated: SimilarityTransform | None
    truth: SimilarityTransform

    @property
    def ok(self) -> bool:
        return self.estimated is not None

    @property
    def translation_error(self) -> float:
        return math.sqrt(self.tx_err**2 + self.ty_err**2 + self.tz_err**2)


@dataclass
class TrajectoryResult:
    frames: list[FramePose]

    @property
    def rmse(self) -> float:
        errs = [f.translation_error for f in self.frames if f.ok]
        return math.sqrt(sum(e * e for e in errs) / len(errs)) if errs else math.nan

    def camera_centres(self, estimated: bool = True) -> np.ndarray:
        out = []
        for f in self.frames:
            t = f.estimated if estimated else f.truth
            out.append(camera_centre(t) if t is not None else np.full(3, np.nan))
        return np.array(out)


@dataclass
class MatchingSummary:
    reports: list[EvalReport]
    failures: int

    @property
    def mean_precision(self) -> float:
        return float(np.mean([r.precision for r in self.reports]))

    @property
    def mean_recall(self) -> float:
        return float(np.mean([r.recall for r in self.reports]))

    @property
    def precision_spread(self) -> float:
        p = [r.precision for r in self.reports]
        return float(max(p) - min(p))


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# -- generators -------------------------------------------------------------

def tree_positions(spec: OrchardSpec) -> np.ndarray:
    if spec.row_length is not None and spec.trees > 1:
        xs = np.linspace(0.0, spec.row_length, spec.trees)
    else:
        xs = np.arange(spec.trees) * spec.tree_spacing
    return np.stack([xs, np.zeros_like(xs), np.full_like(xs, spec.canopy_height)], axis=1)


def gen_orchard(spec: OrchardSpec = OrchardSpec(), max_attempts: int = 2000) -> PointCloud:
    """Sample fruit centroids uniformly inside each tree's canopy ball.

    Candidates closer than ``min_fruit_separation`` to an existing fruit are
    rejected; a fruit that cannot be placed in ``max_attempts`` draws raises
    :class:`InfeasibleSpecError`.
    """
    rng = _rng(spec.seed, 0)
    centres = tree_positions(spec)
    pts: list[np.ndarray] = []
    sep2 = spec.min_fruit_separation**2
    for centre in centres:
        count = spec.fruits_per_tree
        if spec.fruits_spread:
            count += int(rng.integers(-spec.fruits_spread, spec.fruits_spread + 1))
        for _ in range(max(count, 1)):
            for _attempt in range(max_attempts):
                d = rng.normal(size=3)
                d *= spec.canopy_radius * rng.random() ** (1.0 / 3.0) / np.linalg.norm(d)
                cand = centre + d
                if not pts or np.min(np.sum((np.asarray(pts) - cand) ** 2, axis=1)) >= sep2:
                    pts.append(cand)
                    break
            else:
                raise InfeasibleSpecError(
                    f"could not place fruit {len(pts)} after {max_attempts} attempts"
                )
    P = np.asarray(pts)
    frames = rng.integers(spec.min_frames, spec.min_frames + 40, size=len(P))
    return PointCloud(np.arange(len(P)), P, frames, source_id=f"orchard-seed{spec.seed}", metric=True)


def random_rigid(rng: np.random.Generator, max_translation: float = 5.0) -> SimilarityTransform:
    return SimilarityTransform(random_rotation(rng), rng.uniform(-max_translation, max_translation, 3), 1.0)


def perturb_with_transform(cloud: PointCloud, spec: PerturbSpec):
    """Like :func:`perturb` but also return the transform applied (or ``None``)."""
    rng = _rng(spec.seed, 1)
    N = len(cloud)
    n_drop = int(round(spec.occlusion_fraction * N))
    keep = np.sort(rng.permutation(N)[n_drop:]) if n_drop else np.arange(N)
    out = cloud.subset(keep)
    P = out.positions.copy()
    if spec.noise_std > 0:
        P = P + rng.normal(0.0, spec.noise_std, size=P.shape)
    t = spec.transform
    if t is None and spec.random_rigid:
        t = random_rigid(rng)
    metric = cloud.metric
    if t is not None:
        P = t.apply(P)
        metric = metric and t.scale == 1.0
    return out.with_positions(P, metric=metric), t


def perturb(cloud: PointCloud, spec: PerturbSpec) -> PointCloud:
    """Occlude exactly ``round(fraction * N)`` points, add noise, then transform."""
    return perturb_with_transform(cloud, spec)[0]


# -- experiments ------------------------------------------------------------

def occlusion_noise_experiment(cloud: PointCloud, occlusions, noises, repeats: int = 5,
                               params: MatchParams = MatchParams(),
                               enum_params: EnumerationParams = EnumerationParams(),
                               seed: int = 0, cmap: ConstellationMap | None = None) -> list[RobustnessRow]:
    """Transform error under occlusion and noise, one row per grid cell.

    For every cell and repeat the clean-cloud map is matched against a
    perturbed copy (same frame, so the true alignment is the identity), and
    the error is the mean distance ``|T(p) - p|`` over the original points.
    Failed matches are counted, not raised; a cell where every repeat fails
    reports ``nan``.
    """
    if cmap is None:
        cmap = build_map(cloud, enum_params)
    rows = []
    for ci, (occ, sigma) in enumerate((o, s) for o in occlusions for s in noises):
        errs, fails = [], 0
        for r in range(repeats):
            cell_seed = int(np.random.SeedSequence([seed, ci, r]).generate_state(1)[0])
            q = perturb(cloud, PerturbSpec(float(occ), float(sigma), seed=cell_seed))
            try:
                res = match_clouds(cmap, q, replace(params, seed=cell_seed))
            except InsufficientMatchesError:
                fails += 1
                continue
            moved = res.transform.apply(cloud.positions)
            errs.append(float(np.mean(np.linalg.norm(moved - cloud.positions, axis=1))))
        mean = float(np.mean(errs)) if errs else math.nan
        std = float(np.std(errs)) if errs else math.nan
        rows.append(RobustnessRow(float(occ), float(sigma), repeats, mean, std, fails))
    return rows


def matching_experiment(base: OrchardSpec, perturb_spec: PerturbSpec, params: MatchParams = MatchParams(),
                        repeats: int = 10, enum_params: EnumerationParams = EnumerationParams(),
                        fixed_detections: bool = False) -> MatchingSummary:
    """Match perturbed copies of a synthetic orchard against its own map.

    Ground truth is the identity on fruit ids. With ``fixed_detections`` the
    perturbed cloud is drawn once and only the pipeline seed varies between
    repeats; otherwise each repeat draws a fresh perturbation as well.
    A failed match counts as a zero-recall run.
    """
    cloud = gen_orchard(base)
    cmap = build_map(cloud, enum_params)
    reports, fails = [], 0
    fixed = perturb(cloud, perturb_spec) if fixed_detections else None
    for r in range(repeats):
        spec_r = replace(perturb_spec, seed=int(np.random.SeedSequence([perturb_spec.seed, r]).generate_state(1)[0]))
        q = fixed if fixed is not None else perturb(cloud, spec_r)
        gt = [(int(i), int(i)) for i in q.ids]
        try:
            res = match_clouds(cmap, q, replace(params, seed=params.seed + r))
        except InsufficientMatchesError:
            fails += 1
            reports.append(EvalReport(0, 0, len(gt), 0.0, 0.0))
            continue
        reports.append(evaluate(res, gt))
    return MatchingSummary(reports, fails)


def camera_centre(extrinsic: SimilarityTransform) -> np.ndarray:
    return extrinsic.inverse().translation


def look_at(centre, target, up=(0.0, 0.0, 1.0)) -> SimilarityTransform:
    """World-to-camera extrinsic (x right, y down, z forward)."""
    c = np.asarray(centre, dtype=float)
    fwd = np.asarray(target, dtype=float) - c
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # rows: camera axes in world coordinates
    return SimilarityTransform(R, -R @ c, 1.0)


def linear_path(spec: OrchardSpec = OrchardSpec(), frames: int = 9, standoff: float = 2.0,
                height: float | None = None) -> tuple[SimilarityTransform, ...]:
    """Camera moving parallel to the tree row, looking at the canopies."""
    trees = tree_positions(spec)
    h = spec.canopy_height if height is None else height
    xs = np.linspace(trees[0, 0], trees[-1, 0], frames)
    return tuple(look_at((x, -standoff, h), (x, 0.0, spec.canopy_height)) for x in xs)


def visible_fruits(cloud: PointCloud, extrinsic: SimilarityTransform, max_range: float, half_angle: float) -> np.ndarray:
    """Boolean mask of fruits inside the camera's range/view cone."""
    pc = extrinsic.apply(cloud.positions)
    r = np.linalg.norm(pc, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_angle = pc[:, 2] / r
    return (r <= max_range) & (pc[:, 2] > 0) & (cos_angle >= math.cos(half_angle))


def trajectory_experiment(orchard: PointCloud, traj: TrajectorySpec, params: MatchParams = MatchParams(),
                          enum_params: EnumerationParams = EnumerationParams(),
                          cmap: ConstellationMap | None = None) -> TrajectoryResult:
    """Localise each waypoint against the orchard map from visible fruits only.

    Per frame, fruits in view are expressed in camera coordinates (plus
    detection noise) and matched; the recovered cloud-to-map transform is the
    camera-to-world pose, so its inverse is the estimated extrinsic.
    """
    if cmap is None:
        cmap = build_map(orchard, enum_params)
    frames = []
    for i, ext in enumerate(traj.waypoints):
        vis = visible_fruits(orchard, ext, traj.visibility_range, traj.field_of_view)
        sub = orchard.subset(vis)
        P = ext.apply(sub.positions)
        if traj.detection_noise_std > 0:
            P = P + _rng(traj.seed, 2, i).normal(0.0, traj.detection_noise_std, size=P.shape)
        q = sub.with_positions(P)
        est = None
        if len(q) >= cmap.k:
            try:
                est = match_clouds(cmap, q, replace(params, seed=params.seed + i)).transform.inverse()
            except InsufficientMatchesError:
                est = None
        if est is None:
            frames.append(FramePose(i, len(q), math.nan, math.nan, math.nan, math.nan, None, ext))
            continue
        d = camera_centre(est) - camera_centre(ext)
        frames.append(FramePose(i, len(q), float(abs(d[0])), float(abs(d[1])), float(abs(d[2])),
                                rotation_angle(est.rotation @ ext.rotation.T), est, ext))
    return TrajectoryResult(frames)


# -- output -----------------------------------------------------------------

ROBUSTNESS_COLUMNS = ("occlusion_fraction", "noise_std", "repeats", "mean_error", "std_error")
TRAJECTORY_COLUMNS = ("frame", "tx_err", "ty_err", "tz_err", "rot_err_rad")


def fmt(x: float) -> str:
    """Full-precision decimal (17 significant digits)."""
    return format(float(x), ".17g")


def write_robustness_csv(rows, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(ROBUSTNESS_COLUMNS)
    for r in rows:
        w.writerow([fmt(r.occlusion_fraction), fmt(r.noise_std), r.repeats, fmt(r.mean_error), fmt(r.std_error)])


def write_trajectory_csv(result: TrajectoryResult, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for f in result.frames:
        w.writerow([f.frame, fmt(f.tx_err), fmt(f.ty_err), fmt(f.tz_err), fmt(f.rot_err_rad)])


def summary_json(obj) -> str:
    def default(o):
        if isinstance(o, SimilarityTransform):
            return {"rotation": o.rotation.tolist(), "translation": o.translation.tolist(), "scale": o.scale}
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(type(o))

    def clean(o):
        if isinstance(o, float) and not math.isfinite(o):
            return None
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        return o

    return json.dumps(clean(obj), indent=2, sort_keys=True, default=default) + "\n"


def rows_as_dicts(rows) -> list[dict]:
    return [asdict(r) for r in rows]
