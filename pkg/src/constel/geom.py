"""
Core 3D geometry: similarity transforms, least-squares alignment and RANSAC.

Points are plain ``numpy`` arrays, either a single ``(3,)`` vector or an
``(N, 3)`` stack. A :class:`SimilarityTransform` maps ``p`` to
``scale * rotation @ p + translation``; a rigid transform is one with
``scale == 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, NoConsensusError

ORTHO_TOL = 1e-9
LINE_EPS = 1e-12


def _as_points(p) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    if arr.shape[-1] != 3:
        raise ValueError(f"expected 3D points, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """Rotation, translation and positive uniform scale."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        s = float(self.scale)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t)) and math.isfinite(s)):
            raise ValueError("transform components must be finite")
        if s <= 0:
            raise ValueError(f"scale must be positive, got {s}")
        if np.abs(R @ R.T - np.eye(3)).max() > ORTHO_TOL or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    def apply(self, p) -> np.ndarray:
        p = _as_points(p)
        return self.scale * p @ self.rotation.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        inv_s = 1.0 / self.scale
        return SimilarityTransform(Rt, -inv_s * Rt @ self.translation, inv_s)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Return the transform equivalent to applying ``other`` then ``self``."""
        return SimilarityTransform(
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
            self.scale * other.scale,
        )

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M

    def allclose(self, other: "SimilarityTransform", atol: float = 1e-9) -> bool:
        return (
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
            and abs(self.scale - other.scale) <= atol
        )

    def __repr__(self):
        return (
            f"SimilarityTransform(rotation={self.rotation.tolist()}, "
            f"translation={self.translation.tolist()}, scale={self.scale!r})"
        )


def apply(t: SimilarityTransform, p) -> np.ndarray:
    return t.apply(p)


def invert(t: SimilarityTransform) -> SimilarityTransform:
    return t.inverse()


def compose(a: SimilarityTransform, b: SimilarityTransform) -> SimilarityTransform:
    """``apply(compose(a, b), p) == apply(a, apply(b, p))``."""
    return a.compose(b)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a right-handed rotation about ``axis``."""
    u = np.asarray(axis, dtype=float)
    u = u / np.linalg.norm(u)
    K = np.array([[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation via a normalised random quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def point_line_distance(p, a, b) -> float:
    """Perpendicular distance from ``p`` to the infinite line through ``a`` and ``b``."""
    p, a, b = (np.asarray(x, dtype=float) for x in (p, a, b))
    d = b - a
    L = np.linalg.norm(d)
    if L < LINE_EPS:
        raise DegenerateError("line endpoints coincide")
    return float(np.linalg.norm(np.cross(p - a, d)) / L)


def _sample_is_degenerate(tri: np.ndarray, rel_tol: float = 1e-6) -> bool:
    # smallest triangle height vs. the longest side
    e = np.linalg.norm(tri[[1, 2, 0]] - tri, axis=1)
    diameter = e.max()
    if diameter < LINE_EPS:
        return True
    twice_area = np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    return twice_area / diameter < rel_tol * diameter


def procrustes(src, dst, with_scale: bool = False) -> SimilarityTransform:
    """Least-squares similarity (or rigid) transform mapping ``src`` onto ``dst``.

    Closed-form solution via the SVD of the cross-covariance of the centred
    point sets, with a determinant correction so reflections are never
    returned.

    Parameters
    ----------
    src, dst : (N, 3) array_like
        Corresponding points, ``N >= 3``.
    with_scale : bool
        Estimate a uniform scale; otherwise ``scale`` is fixed to 1.

    Raises
    ------
    DegenerateError
        If ``src`` is collinear or coincident.
    """
    X = _as_points(src).reshape(-1, 3)
    Y = _as_points(dst).reshape(-1, 3)
    if X.shape != Y.shape:
        raise ValueError("src and dst must have the same shape")
    if len(X) < 3:
        raise DegenerateError("need at least 3 correspondences")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    sv = np.linalg.svd(Xc, compute_uv=False)
    if sv[0] < LINE_EPS or sv[1] < 1e-10 * sv[0]:
        raise DegenerateError("source points are collinear or coincident")
    H = Yc.T @ Xc / len(X)
    U, S, Vt = np.linalg.svd(H)
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1.0
    R = U @ np.diag(D) @ Vt
    if with_scale:
        var_x = (Xc**2).sum() / len(X)
        s = float((S * D).sum() / var_x)
    else:
        s = 1.0
    t = my - s * R @ mx
    return SimilarityTransform(R, t, s)


@dataclass(frozen=True)
class RansacParams:
    inlier_threshold: float = 0.05
    max_iterations: int = 2000
    confidence: float = 0.999
    min_inliers: int = 4
    with_scale: bool = False

    def __post_init__(self):
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be > 0")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must be in (0, 1)")
        if self.max_iterations < 1 or self.min_inliers < 1:
            raise ValueError("max_iterations and min_inliers must be positive")


def _required_iterations(inlier_ratio: float, confidence: float, cap: int) -> int:
    if inlier_ratio >= 1.0:
        return 1
    p_good = inlier_ratio**3
    if p_good <= 0.0:
        return cap
    return min(cap, int(math.ceil(math.log(1 - confidence) / math.log1p(-p_good))))


def ransac_transform(correspondences, params: RansacParams = RansacParams(), seed: int = 0):
    """Robustly fit a similarity transform to noisy correspondences.

    Parameters
    ----------
    correspondences : sequence of (src, dst) pairs, or an (N, 2, 3) array
    params : RansacParams
    seed : int
        Seed for the sampling generator; results are reproducible per seed.

    Returns
    -------
    transform : SimilarityTransform
        Refit on the full consensus set.
    inliers : ndarray of int
        Indices ``i`` with ``|apply(transform, src_i) - dst_i| <= inlier_threshold``.
    """
    pairs = np.asarray(correspondences, dtype=float)
    if pairs.ndim != 3 or pairs.shape[1:] != (2, 3):
        raise ValueError("correspondences must have shape (N, 2, 3)")
    src, dst = pairs[:, 0], pairs[:, 1]
    n = len(pairs)
    if n < 3:
        raise NoConsensusError(f"need at least 3 correspondences, got {n}")
    sv = np.linalg.svd(src - src.mean(axis=0), compute_uv=False)
    if sv[0] < LINE_EPS or sv[1] < 1e-6 * sv[0]:
        raise DegenerateError("all source points are collinear")

    rng = np.random.default_rng(seed)
    thr = params.inlier_threshold
    best_count, best_cost, best_mask = 0, math.inf, None
    needed = params.max_iterations
    iterations = draws = 0
    max_draws = 20 * params.max_iterations
    while iterations < needed and draws < max_draws:
        draws += 1
        idx = rng.choice(n, size=3, replace=False)
        if _sample_is_degenerate(src[idx]):
            continue
        iterations += 1
        try:
            t = procrustes(src[idx], dst[idx], params.with_scale)
        except DegenerateError:
            continue
        res = np.linalg.norm(t.apply(src) - dst, axis=1)
        mask = res <= thr
        count = int(mask.sum())
        # truncated quadratic loss breaks ties between equal-count hypotheses
        cost = float(np.minimum(res, thr).sum())
        if count > best_count or (count == best_count and cost < best_cost):
            best_count, best_cost, best_mask = count, cost, mask
            needed = _required_iterations(count / n, params.confidence, params.max_iterations)

    if best_mask is None or best_count < max(params.min_inliers, 3):
        raise NoConsensusError(
            f"best consensus {best_count} < min_inliers {params.min_inliers}"
        )

    mask = best_mask
    for _ in range(20):
        try:
            t = procrustes(src[mask], dst[mask], params.with_scale)
        except DegenerateError as exc:
            raise NoConsensusError("consensus set is degenerate") from exc
        new_mask = np.linalg.norm(t.apply(src) - dst, axis=1) <= thr
        if np.array_equal(new_mask, mask) or new_mask.sum() < max(params.min_inliers, 3):
            break
        mask = new_mask
    inliers = np.flatnonzero(np.linalg.norm(t.apply(src) - dst, axis=1) <= thr)
    if len(inliers) < params.min_inliers:
        raise NoConsensusError(f"refit consensus {len(inliers)} < min_inliers {params.min_inliers}")
    return t, inliers
