"""Command-line interface: ``constel build-map | match | localize | synth | bench``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from . import mapstore
from .cloudio import CloudFormatError, cloud_csv, matches_csv, read_cloud, read_pairs
from .constellations import EnumerationParams
from .errors import (
    ConstelError,
    InsufficientMatchesError,
    InsufficientPointsError,
    MapFormatError,
)
from .geom import RansacParams
from .matcher import MatchParams, evaluate, match_clouds
from .synthbench import (
    OrchardSpec,
    PerturbSpec,
    TrajectorySpec,
    fmt,
    gen_orchard,
    linear_path,
    matching_experiment,
    occlusion_noise_experiment,
    perturb_with_transform,
    rows_as_dicts,
    summary_json,
    trajectory_experiment,
    write_robustness_csv,
    write_trajectory_csv,
)

EXIT_OK, EXIT_INPUT, EXIT_POINTS, EXIT_MATCHES = 0, 1, 2, 3
CONFIG_ENV = "CONSTEL_CONFIG"


class ConfigError(ValueError):
    pass


# -- configuration ----------------------------------------------------------

def _opt(cast):
    def parse(s):
        return None if str(s).strip().lower() in ("", "none", "null") else cast(s)
    return parse


def _bool(s) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> parser; every EnumerationParams, MatchParams and RansacParams field
CONFIG_KEYS = {
    "k": int,
    "n": int,
    "min_frames": int,
    "max_per_anchor": _opt(int),
    "tau": float,
    "min_votes": int,
    "clique_epsilon": float,
    "clique_log_epsilon": float,
    "clique_max_nodes": int,
    "use_clique_filter": _bool,
    "completion_radius": _opt(float),
    "candidates_m": int,
    "window": _opt(float),
    "ransac_inlier_threshold": float,
    "ransac_max_iterations": int,
    "ransac_confidence": float,
    "ransac_min_inliers": int,
    "seed": int,
    "metric": _bool,
}


@dataclass(frozen=True)
class RunConfig:
    enum: EnumerationParams
    match: MatchParams
    seed: int
    metric: bool | None  # None: take it from the input file


def parse_config_text(text: str, origin: str = "config") -> dict:
    out = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{ln}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{origin}:{ln}: unknown key {key!r}")
        try:
            out[key] = CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{origin}:{ln}: bad value for {key}: {exc}") from None
    return out


def build_config(values: dict) -> RunConfig:
    d = values
    try:
        enum = EnumerationParams(
            k=d.get("k", 5), n=d.get("n", 10), min_frames=d.get("min_frames", 5),
            max_per_anchor=d.get("max_per_anchor"),
        )
        rp = RansacParams()
        ransac = RansacParams(
            inlier_threshold=d.get("ransac_inlier_threshold", rp.inlier_threshold),
            max_iterations=d.get("ransac_max_iterations", rp.max_iterations),
            confidence=d.get("ransac_confidence", rp.confidence),
            min_inliers=d.get("ransac_min_inliers", rp.min_inliers),
        )
        mp = MatchParams()
        match = MatchParams(
            tau=d.get("tau", mp.tau),
            min_votes=d.get("min_votes", mp.min_votes),
            clique_epsilon=d.get("clique_epsilon", mp.clique_epsilon),
            clique_log_epsilon=d.get("clique_log_epsilon", mp.clique_log_epsilon),
            completion_radius=d.get("completion_radius", mp.completion_radius),
            ransac=ransac,
            candidates_m=d.get("candidates_m", mp.candidates_m),
            seed=d.get("seed", 0),
            use_clique_filter=d.get("use_clique_filter", True),
            window=d.get("window", mp.window),
            clique_max_nodes=d.get("clique_max_nodes", mp.clique_max_nodes),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return RunConfig(enum, match, d.get("seed", 0), d.get("metric"))


_FLAG_KEYS = {
    "k": "k", "n": "n", "min_frames": "min_frames", "tau": "tau", "min_votes": "min_votes",
    "clique_eps": "clique_epsilon", "ransac_thresh": "ransac_inlier_threshold", "seed": "seed",
    "metric": "metric",
}


def resolve_config(args) -> RunConfig:
    """defaults < config file (``--config`` or ``$CONSTEL_CONFIG``) < flags."""
    values: dict = {}
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(path)))
    for attr, key in _FLAG_KEYS.items():
        if hasattr(args, attr):
            values[key] = getattr(args, attr)
    return build_config(values)


def parse_grid(spec: str) -> list[float]:
    """``start:stop:step`` (stop inclusive), a comma list, or a single value."""
    try:
        if ":" in spec:
            a, b, s = (float(x) for x in spec.split(":"))
            if not s > 0 or b < a:
                raise ValueError
            count = int(math.floor((b - a) / s + 1e-9)) + 1
            return [round(a + i * s, 12) for i in range(count)]
        vals = [float(x) for x in spec.split(",") if x.strip()]
        if not vals:
            raise ValueError
        return vals
    except ValueError:
        raise ConfigError(f"invalid grid {spec!r}; use start:stop:step or a comma list") from None


# -- output handling --------------------------------------------------------

class Outputs:
    """Collect output files and write them only once the command has succeeded."""

    def __init__(self):
        self.files: list[tuple[Path, str]] = []

    def add(self, path, text: str):
        self.files.append((Path(path), text))

    def commit(self):
        written = []
        try:
            for path, text in self.files:
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_name(path.name + ".tmp")
                tmp.write_text(text, encoding="utf-8")
                os.replace(tmp, path)
                written.append(path)
        except OSError:
            for p in written:
                p.unlink(missing_ok=True)
            raise


def _out_dir(args) -> Path:
    if not getattr(args, "out", None):
        raise ConfigError("--out DIR is required")
    return Path(args.out)


def pose_dict(transform, inliers: int | None = None) -> dict:
    d = {
        "rotation": transform.rotation.tolist(),
        "translation": transform.translation.tolist(),
        "scale": float(transform.scale),
    }
    if inliers is not None:
        d["inlier_count"] = int(inliers)
    return d


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- commands ---------------------------------------------------------------

def cmd_build_map(args, cfg: RunConfig, out: Outputs) -> int:
    if not args.out:
        raise ConfigError("--out MAP is required")
    cloud = read_cloud(args.input, metric=cfg.metric)
    t0 = time.perf_counter()
    cmap = mapstore.build_map(cloud, cfg.enum)
    elapsed = time.perf_counter() - t0
    out.add(args.out, mapstore.dumps(cmap))
    print(f"entries: {len(cmap)}")
    print(f"time: {elapsed:.3f} s")
    return EXIT_OK


def _run_match(args, cfg: RunConfig):
    cmap = mapstore.load(args.map)
    query = read_cloud(args.query, metric=cfg.metric)
    return cmap, query, match_clouds(cmap, query, cfg.match)


def cmd_match(args, cfg: RunConfig, out: Outputs) -> int:
    cmap, query, res = _run_match(args, cfg)
    gt = read_pairs(args.ground_truth) if args.ground_truth else None
    pose = pose_dict(res.transform, len(res.inlier_ids))
    if args.out:
        dest = Path(args.out)
        out.add(dest, matches_csv(res.correspondences))
        out.add(dest.with_suffix(".pose.json"), _json(pose))
    else:
        sys.stdout.write(matches_csv(res.correspondences))
    if gt is not None:
        rep = evaluate(res, gt, cfg.enum.min_frames, query, cmap.fruits)
        print(json.dumps({
            "true_positives": rep.true_positives, "false_positives": rep.false_positives,
            "false_negatives": rep.false_negatives, "precision": rep.precision, "recall": rep.recall,
        }, sort_keys=True))
    elif args.out:
        print(f"matches: {len(res.correspondences)} (inliers {len(res.inlier_ids)})")
    return EXIT_OK


def cmd_localize(args, cfg: RunConfig, out: Outputs) -> int:
    _, _, res = _run_match(args, cfg)
    text = _json(pose_dict(res.transform, len(res.inlier_ids)))
    if args.out:
        out.add(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _orchard_spec(args, cfg: RunConfig) -> OrchardSpec:
    try:
        return OrchardSpec(trees=args.trees, fruits_per_tree=args.fruits_per_tree,
                           tree_spacing=args.tree_spacing, min_frames=cfg.enum.min_frames, seed=cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _pairs_csv(ids) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_id", "map_id"])
    for i in ids:
        w.writerow([int(i), int(i)])
    return buf.getvalue()


def cmd_synth_orchard(args, cfg: RunConfig, out: Outputs) -> int:
    d = _out_dir(args)
    cloud = gen_orchard(_orchard_spec(args, cfg))
    out.add(d / "orchard.csv", cloud_csv(cloud))
    if args.occlusion or args.noise or args.rigid:
        spec = PerturbSpec(args.occlusion, args.noise, random_rigid=args.rigid, seed=cfg.seed)
        q, t = perturb_with_transform(cloud, spec)
        out.add(d / "query.csv", cloud_csv(q))
        out.add(d / "ground_truth.csv", _pairs_csv(q.ids))
        if t is not None:
            out.add(d / "query_transform.json", _json(pose_dict(t)))
    print(f"fruits: {len(cloud)}")
    return EXIT_OK


def _bench_cloud(args, cfg: RunConfig):
    if getattr(args, "cloud", None):
        return read_cloud(args.cloud, metric=cfg.metric)
    return gen_orchard(_orchard_spec(args, cfg))


def cmd_bench_robustness(args, cfg: RunConfig, out: Outputs) -> int:
    d = _out_dir(args)
    occ, noise = parse_grid(args.occlusion), parse_grid(args.noise)
    cloud = _bench_cloud(args, cfg)
    rows = occlusion_noise_experiment(cloud, occ, noise, args.repeats, cfg.match, cfg.enum, seed=cfg.seed)
    buf = io.StringIO()
    write_robustness_csv(rows, buf)
    out.add(d / "robustness.csv", buf.getvalue())
    span = cloud.span()
    out.add(d / "robustness.json", summary_json({
        "experiment": "robustness", "seed": cfg.seed, "points": len(cloud), "span": span,
        "rows": rows_as_dicts(rows),
    }))
    print(f"rows: {len(rows)}")
    return EXIT_OK


def cmd_bench_matching(args, cfg: RunConfig, out: Outputs) -> int:
    d = _out_dir(args)
    spec = _orchard_spec(args, cfg)
    try:
        pspec = PerturbSpec(args.occlusion, args.noise, random_rigid=args.rigid, seed=cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    summary = matching_experiment(spec, pspec, cfg.match, args.repeats, cfg.enum,
                                  fixed_detections=args.fixed_detections)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "true_positives", "false_positives", "false_negatives", "precision", "recall"])
    for i, r in enumerate(summary.reports):
        w.writerow([i, r.true_positives, r.false_positives, r.false_negatives, fmt(r.precision), fmt(r.recall)])
    out.add(d / "matching.csv", buf.getvalue())
    out.add(d / "matching.json", summary_json({
        "experiment": "matching", "seed": cfg.seed, "repeats": args.repeats, "failures": summary.failures,
        "mean_precision": summary.mean_precision, "mean_recall": summary.mean_recall,
        "precision_spread": summary.precision_spread,
    }))
    print(f"precision: {summary.mean_precision:.4f} recall: {summary.mean_recall:.4f}")
    return EXIT_OK


def cmd_bench_trajectory(args, cfg: RunConfig, out: Outputs) -> int:
    d = _out_dir(args)
    spec = _orchard_spec(args, cfg)
    orchard = gen_orchard(spec)
    try:
        traj = TrajectorySpec(linear_path(spec, frames=args.frames), detection_noise_std=args.noise, seed=cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    res = trajectory_experiment(orchard, traj, cfg.match, cfg.enum)
    buf = io.StringIO()
    write_trajectory_csv(res, buf)
    out.add(d / "trajectory.csv", buf.getvalue())
    ok = [f for f in res.frames if f.ok]
    out.add(d / "trajectory.json", summary_json({
        "experiment": "trajectory", "seed": cfg.seed, "frames": len(res.frames), "failed_frames": len(res.frames) - len(ok),
        "rmse": res.rmse,
        "max_translation_error": max((f.translation_error for f in ok), default=math.nan),
        "max_rotation_error_rad": max((f.rot_err_rad for f in ok), default=math.nan),
        "estimated_centres": res.camera_centres(True).tolist(),
        "true_centres": res.camera_centres(False).tolist(),
    }))
    print(f"frames: {len(res.frames)} rmse: {res.rmse:.6f} m")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help=f"key=value config file (default: ${CONFIG_ENV})")
    p.add_argument("--k", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--min-frames", dest="min_frames", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--min-votes", dest="min_votes", type=int)
    p.add_argument("--clique-eps", dest="clique_eps", type=float)
    p.add_argument("--ransac-thresh", dest="ransac_thresh", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--metric", dest="metric", action="store_true", help="coordinates are in metres")
    p.add_argument("--no-metric", dest="metric", action="store_false", help="coordinates have arbitrary scale")
    return p


def _orchard_args(p: argparse.ArgumentParser):
    p.add_argument("--trees", type=int, default=5)
    p.add_argument("--fruits-per-tree", dest="fruits_per_tree", type=int, default=60)
    p.add_argument("--tree-spacing", dest="tree_spacing", type=float, default=2.0)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="constel", description="Constellation-based fruit re-identification.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-map", parents=[common], help="hash a cloud into a constellation map")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_map)

    for name, func, helptext in (("match", cmd_match, "re-identify query fruits in a map"),
                                 ("localize", cmd_localize, "estimate the query pose only")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("map")
        p.add_argument("query")
        p.add_argument("--out")
        if name == "match":
            p.add_argument("--ground-truth", dest="ground_truth")
        p.set_defaults(func=func)

    synth = sub.add_parser("synth", help="generate synthetic scenes")
    ssub = synth.add_subparsers(dest="what", required=True)
    p = ssub.add_parser("orchard", parents=[common])
    _orchard_args(p)
    p.add_argument("--occlusion", type=float, default=0.0, help="also write an occluded query copy")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--rigid", action="store_true", help="apply a random rigid transform to the query")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth_orchard)

    bench = sub.add_parser("bench", help="run experiments")
    bsub = bench.add_subparsers(dest="what", required=True)
    p = bsub.add_parser("robustness", parents=[common])
    _orchard_args(p)
    p.add_argument("--cloud", help="use this cloud instead of a synthetic orchard")
    p.add_argument("--occlusion", default="0:0.45:0.05")
    p.add_argument("--noise", default="0")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_robustness)

    p = bsub.add_parser("matching", parents=[common])
    _orchard_args(p)
    p.add_argument("--occlusion", type=float, default=0.2)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--rigid", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--fixed-detections", dest="fixed_detections", action="store_true")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_matching)

    p = bsub.add_parser("trajectory", parents=[common])
    _orchard_args(p)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--frames", type=int, default=9)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench_trajectory)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit 2; remap to the input-error code
        return EXIT_INPUT if exc.code else EXIT_OK
    out = Outputs()
    try:
        cfg = resolve_config(args)
        if getattr(args, "repeats", 1) < 1:
            raise ConfigError("--repeats must be >= 1")
        code = args.func(args, cfg, out)
        out.commit()
        return code
    except InsufficientPointsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_POINTS
    except InsufficientMatchesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MATCHES
    except (ConfigError, CloudFormatError, MapFormatError, ConstelError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
