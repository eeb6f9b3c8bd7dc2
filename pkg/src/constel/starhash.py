"""
Scale/translation/rotation-invariant hash for small 3D constellations.

A constellation of ``k`` points is mapped into a canonical frame where the
most widely separated pair sits at ``A = (0, 0, 0)`` and ``B = (1, 1, 1)``.
The remaining rotational freedom about the diagonal is removed by turning
the normal of the plane through ``A``, ``B`` and the star farthest from line
``AB`` (the plane star ``C``) so that its Z component is maximal, then
flipping by 180 degrees if needed so that ``C_x <= C_y``. The hash code is
the canonical ``(x, y, z)`` of the ``k - 2`` non-A/B stars sorted by x.

Everything is computed in batches of shape ``(M, k, 3)``; the single
constellation functions are thin wrappers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, DimensionMismatchError
from .geom import SimilarityTransform

SQRT3 = math.sqrt(3.0)
DIAGONAL = np.full(3, 1.0 / SQRT3)
# fraction of |AB| below which the plane star counts as collinear with A, B
COLLINEAR_FRACTION = 0.02
COINCIDENT_EPS = 1e-9
TIE_RTOL = 1e-12

# Fixed right-handed basis whose first axis is the diagonal; used to rotate
# any AB direction onto it before the angle about the diagonal is fixed.
_E1 = np.array([1.0, -1.0, 0.0]) / math.sqrt(2.0)
_DIAG_BASIS = np.stack([DIAGONAL, _E1, np.cross(DIAGONAL, _E1)], axis=1)
_FLIP = 2.0 * np.outer(DIAGONAL, DIAGONAL) - np.eye(3)  # pi about the diagonal


@dataclass(frozen=True, eq=False)
class CanonicalFrame:
    """World-to-canonical similarity plus the labels that defined it.

    ``label_A``/``label_B``/``label_C`` index into the input point list;
    ``normal_v`` is the unit plane normal before the angle correction.
    """

    transform: SimilarityTransform
    label_A: int
    label_B: int
    label_C: int
    theta: float
    normal_v: np.ndarray


@dataclass(frozen=True, eq=False)
class Descriptor:
    code: np.ndarray
    k: int

    def __post_init__(self):
        code = np.array(self.code, dtype=float).reshape(-1)
        if len(code) != 3 * (self.k - 2):
            raise ValueError(f"code length {len(code)} != 3*(k-2) for k={self.k}")
        code.setflags(write=False)
        object.__setattr__(self, "code", code)

    def __eq__(self, other):
        return (
            isinstance(other, Descriptor)
            and self.k == other.k
            and np.array_equal(self.code, other.code)
        )

    def __hash__(self):
        return hash((self.k, self.code.tobytes()))


def _lex_key(p: np.ndarray) -> tuple:
    return tuple(float(x) for x in p)


def select_ab(points) -> tuple[int, int]:
    """Indices ``(A, B)`` of the most widely separated pair.

    ``A`` is the member closer to the centroid. Ties (several maximal pairs,
    or both members equidistant from the centroid) are broken by comparing
    the pairs' endpoints lexicographically by coordinates.
    """
    P = np.asarray(points, dtype=float)
    if len(P) < 2:
        raise DegenerateError("need at least two points")
    D = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=-1)
    dmax = D.max()
    if dmax < COINCIDENT_EPS:
        raise DegenerateError("all points coincide")
    centroid = P.mean(axis=0)
    dc = np.linalg.norm(P - centroid, axis=1)
    candidates = []
    for i in range(len(P)):
        for j in range(i + 1, len(P)):
            if D[i, j] >= dmax * (1.0 - TIE_RTOL):
                lo, hi = sorted((i, j), key=lambda m: _lex_key(P[m]))
                candidates.append(((_lex_key(P[lo]), _lex_key(P[hi])), lo, hi))
    candidates.sort(key=lambda c: c[0])
    _, lo, hi = candidates[0]
    # lo is lexicographically first, so it wins a centroid-distance tie
    if abs(dc[lo] - dc[hi]) <= TIE_RTOL * max(dc[lo], dc[hi]) or dc[lo] < dc[hi]:
        return lo, hi
    return hi, lo


def theta_max_projection(v) -> float:
    """Angle about the diagonal that maximises the Z component of ``v``.

    ``v`` must be a unit vector orthogonal to the diagonal. Rotating it by
    ``theta`` gives ``v'_z = v_z cos(theta) + (v_y - v_x) sin(theta) / sqrt(3)``;
    the maximiser is ``atan2(sqrt(3) (v_y - v_x), 3 v_z)`` in ``(-pi, pi]``.
    """
    v = np.asarray(v, dtype=float)
    if abs(np.linalg.norm(v) - 1.0) > 1e-6 or abs(v @ DIAGONAL) > 1e-6:
        raise ValueError("v must be a unit vector orthogonal to (1,1,1)/sqrt(3)")
    return float(_theta(v[None])[0])


def _theta(v: np.ndarray) -> np.ndarray:
    a = SQRT3 * (v[..., 1] - v[..., 0])
    b = 3.0 * v[..., 2]
    if np.any((a == 0) & (b == 0)):
        raise DegenerateError("normal has no component that can be rotated onto Z")
    th = np.arctan2(a, b)
    return np.where(th <= -math.pi, math.pi, th)


def _rotations_about_diagonal(theta: np.ndarray) -> np.ndarray:
    K = np.array(
        [[0.0, -DIAGONAL[2], DIAGONAL[1]], [DIAGONAL[2], 0.0, -DIAGONAL[0]], [-DIAGONAL[1], DIAGONAL[0], 0.0]]
    )
    s = np.sin(theta)[:, None, None]
    c = np.cos(theta)[:, None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def _align_to_diagonal(uhat: np.ndarray) -> np.ndarray:
    """Rotations (M, 3, 3) sending each unit vector in ``uhat`` to the diagonal."""
    M = len(uhat)
    # complete uhat to a right-handed basis using the least aligned world axis
    helper = np.zeros((M, 3))
    helper[np.arange(M), np.argmin(np.abs(uhat), axis=1)] = 1.0
    e1 = np.cross(uhat, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(uhat, e1)
    F = np.stack([uhat, e1, e2], axis=2)
    return _DIAG_BASIS[None] @ F.transpose(0, 2, 1)


@dataclass
class _Canon:
    # batched canonicalisation output
    rotation: np.ndarray  # (M, 3, 3)
    scale: np.ndarray  # (M,)
    translation: np.ndarray  # (M, 3)
    label_a: np.ndarray
    label_b: np.ndarray
    label_c: np.ndarray
    theta: np.ndarray
    normal: np.ndarray  # (M, 3)
    coords: np.ndarray  # (M, k, 3) canonical coordinates
    order: np.ndarray  # (M, k) A, B, then rest by ascending canonical x
    degenerate: np.ndarray  # (M,) bool
    reason: list


def _select_ab_batch(P: np.ndarray):
    M, k, _ = P.shape
    rows = np.arange(M)
    iu, ju = np.triu_indices(k, 1)
    pd = np.linalg.norm(P[:, iu] - P[:, ju], axis=-1)
    best = pd.argmax(axis=1)
    dmax = pd[rows, best]
    ia, ib = iu[best].copy(), ju[best].copy()
    centroid = P.mean(axis=1)
    da = np.linalg.norm(P[rows, ia] - centroid, axis=1)
    db = np.linalg.norm(P[rows, ib] - centroid, axis=1)
    swap = db < da
    ia[swap], ib[swap] = ib[swap], ia[swap]
    pair_tie = (pd >= (dmax * (1.0 - TIE_RTOL))[:, None]).sum(axis=1) > 1
    centre_tie = np.abs(da - db) <= TIE_RTOL * np.maximum(da, db)
    for m in np.flatnonzero((pair_tie | centre_tie) & (dmax >= COINCIDENT_EPS)):
        ia[m], ib[m] = select_ab(P[m])
    return ia, ib, pd.min(axis=1), dmax


def canonicalize(points) -> _Canon:
    """Canonicalise a batch of constellations of shape ``(M, k, 3)``.

    Degenerate rows are flagged rather than raised; their outputs are
    meaningless.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim != 3 or P.shape[2] != 3 or P.shape[1] < 3:
        raise ValueError(f"expected (M, k>=3, 3) points, got {P.shape}")
    M, k, _ = P.shape
    rows = np.arange(M)
    ia, ib, dmin, dmax = _select_ab_batch(P)
    coincident = dmin < COINCIDENT_EPS
    degenerate = coincident.copy()

    A = P[rows, ia]
    ab = P[rows, ib] - A
    L = np.linalg.norm(ab, axis=1)
    Ls = np.where(L > 0, L, 1.0)
    scale = SQRT3 / Ls
    R0 = _align_to_diagonal(ab / Ls[:, None])
    Q = scale[:, None, None] * np.einsum("mij,mkj->mki", R0, P - A[:, None, :])

    along = Q @ DIAGONAL
    perp = np.linalg.norm(Q - along[..., None] * DIAGONAL, axis=-1)
    perp[rows, ia] = -np.inf
    perp[rows, ib] = -np.inf
    ic = perp.argmax(axis=1)
    pmax = perp[rows, ic]
    collinear = pmax < COLLINEAR_FRACTION * SQRT3
    degenerate |= collinear
    ties = (perp >= (pmax * (1.0 - TIE_RTOL))[:, None]).sum(axis=1) > 1
    for m in np.flatnonzero(ties & ~degenerate):
        cand = np.flatnonzero(perp[m] >= pmax[m] * (1.0 - TIE_RTOL))
        ic[m] = min(cand, key=lambda j: _lex_key(P[m, j]))

    C = Q[rows, ic]
    normal = np.cross(np.broadcast_to(DIAGONAL, C.shape), C)
    nn = np.linalg.norm(normal, axis=1, keepdims=True)
    normal = normal / np.where(nn > 0, nn, 1.0)
    normal[degenerate] = np.array([-1.0, -1.0, 2.0]) / math.sqrt(6.0)
    theta = _theta(normal)
    R = _rotations_about_diagonal(theta) @ R0
    c_rot = np.einsum("mij,mj->mi", R, P[rows, ic] - A) * scale[:, None]
    flip = c_rot[:, 0] > c_rot[:, 1]
    R[flip] = _FLIP @ R[flip]

    coords = scale[:, None, None] * np.einsum("mij,mkj->mki", R, P - A[:, None, :])
    translation = -scale[:, None] * np.einsum("mij,mj->mi", R, A)

    rest_mask = np.ones((M, k), dtype=bool)
    rest_mask[rows, ia] = False
    rest_mask[rows, ib] = False
    rest = np.nonzero(rest_mask)[1].reshape(M, k - 2)
    rc = np.take_along_axis(coords, rest[..., None], axis=1)
    perm = np.lexsort((rc[..., 2], rc[..., 1], rc[..., 0]), axis=-1)
    order = np.concatenate([ia[:, None], ib[:, None], np.take_along_axis(rest, perm, axis=1)], axis=1)

    reason = [None] * M
    for m in np.flatnonzero(degenerate):
        reason[m] = "coincident points" if coincident[m] else "plane star collinear with AB"
    return _Canon(R, scale, translation, ia, ib, ic, theta, normal, coords, order, degenerate, reason)


def codes_from_canon(c: _Canon) -> np.ndarray:
    """Hash codes (M, 3(k-2)) from a batch canonicalisation."""
    M = len(c.scale)
    rest = np.take_along_axis(c.coords, c.order[:, 2:, None], axis=1)
    return rest.reshape(M, -1)


def describe_batch(points):
    """Codes and canonical member order for a batch of constellations.

    Returns ``(codes, order, degenerate)``.
    """
    c = canonicalize(points)
    return codes_from_canon(c), c.order, c.degenerate


def canonical_frame(points) -> CanonicalFrame:
    """Canonical frame of one constellation of ``k >= 4`` points."""
    P = np.asarray(points, dtype=float)
    if P.ndim != 2 or len(P) < 4:
        raise ValueError("canonical_frame needs k >= 4 points")
    c = canonicalize(P[None])
    if c.degenerate[0]:
        raise DegenerateError(f"degenerate constellation: {c.reason[0]}")
    t = SimilarityTransform(c.rotation[0], c.translation[0], c.scale[0])
    return CanonicalFrame(
        t, int(c.label_a[0]), int(c.label_b[0]), int(c.label_c[0]), float(c.theta[0]), c.normal[0].copy()
    )


def canonical_order(points) -> list[int]:
    """Member indices in canonical order: A, B, then ascending canonical x."""
    c = canonicalize(np.asarray(points, dtype=float)[None])
    if c.degenerate[0]:
        raise DegenerateError(f"degenerate constellation: {c.reason[0]}")
    return [int(i) for i in c.order[0]]


def describe(points) -> Descriptor:
    P = np.asarray(points, dtype=float)
    if P.ndim != 2 or len(P) < 4:
        raise ValueError("describe needs k >= 4 points")
    c = canonicalize(P[None])
    if c.degenerate[0]:
        raise DegenerateError(f"degenerate constellation: {c.reason[0]}")
    return Descriptor(codes_from_canon(c)[0], len(P))


def descriptor_distance(a: Descriptor, b: Descriptor) -> float:
    if a.k != b.k or len(a.code) != len(b.code):
        raise DimensionMismatchError(f"cannot compare k={a.k} with k={b.k}")
    return float(np.linalg.norm(a.code - b.code))


def induced_transform(query_frame: CanonicalFrame, map_frame: CanonicalFrame) -> SimilarityTransform:
    """Transform taking query-world coordinates to map-world coordinates."""
    return map_frame.transform.inverse().compose(query_frame.transform)
