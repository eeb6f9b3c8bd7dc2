import math
from itertools import combinations, permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from constel.errors import DegenerateError, DimensionMismatchError
from constel.geom import SimilarityTransform, random_rotation
from constel.starhash import (
    DIAGONAL,
    Descriptor,
    canonical_frame,
    canonical_order,
    describe,
    describe_batch,
    descriptor_distance,
    induced_transform,
    select_ab,
    theta_max_projection,
)

from conftest import general_points, random_similarity
from oracles import GRID_STEP, code_oracle, max_pair, theta_grid, vz_after

seeds = st.integers(0, 2**32 - 1)

# A, B at their canonical positions and the plane star C with C_x < C_y, whose
# normal u x C already has maximal Z: the canonical frame is the identity.
CANONICAL_QUAD = np.array([[0, 0, 0], [1, 1, 1], [0.2, 0.8, 0.5], [0.3, 0.35, 0.3]], dtype=float)


def random_unit_normal(rng):
    while True:
        v = np.cross(DIAGONAL, rng.normal(size=3))
        n = np.linalg.norm(v)
        if n > 1e-3:
            return v / n


# -- select_ab ---------------------------------------------------------------

def test_select_ab_collinear_triple():
    P = np.array([[0, 0, 0], [1, 0, 0], [5, 0, 0]], dtype=float)
    assert select_ab(P) == (0, 2)


def test_select_ab_square_tie_is_deterministic():
    sq = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    first = select_ab(sq)
    # both diagonals tie and every vertex is equidistant from the centroid:
    # the lexicographically smallest endpoint pair wins, smaller endpoint as A
    assert first == (0, 2)
    for perm in permutations(range(4)):
        a, b = select_ab(sq[list(perm)])
        assert (tuple(sq[perm[a]]), tuple(sq[perm[b]])) == ((0, 0, 0), (1, 1, 0))


def test_select_ab_matches_exhaustive_scan(rng):
    for _ in range(100):
        P = rng.normal(size=(5, 3))
        assert select_ab(P) == max_pair(P)


def test_select_ab_all_coincident():
    with pytest.raises(DegenerateError):
        select_ab(np.zeros((4, 3)))


# -- theta -------------------------------------------------------------------

def test_theta_already_maximal():
    assert theta_max_projection(np.array([-1, -1, 2]) / math.sqrt(6)) == pytest.approx(0.0, abs=1e-15)


def test_theta_antipodal():
    v = np.array([1, 1, -2]) / math.sqrt(6)
    th = theta_max_projection(v)
    assert th == pytest.approx(math.pi)
    assert vz_after(v, th) == pytest.approx(2 / math.sqrt(6))


def test_theta_rejects_invalid_normal():
    with pytest.raises(ValueError):
        theta_max_projection([0, 0, 1])  # not orthogonal to the diagonal
    with pytest.raises(ValueError):
        theta_max_projection([1, -1, 0])  # not unit length


def test_theta_grid_oracle(rng):
    for _ in range(200):
        v = random_unit_normal(rng)
        th = theta_max_projection(v)
        g = theta_grid(v)
        diff = (th - g + math.pi) % (2 * math.pi) - math.pi
        assert abs(diff) <= GRID_STEP


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_theta_optimality(seed):
    rng = np.random.default_rng(seed)
    v = random_unit_normal(rng)
    th = theta_max_projection(v)
    best = vz_after(v, th)
    phis = rng.uniform(-math.pi, math.pi, 1000)
    assert all(best >= vz_after(v, p) - 1e-12 for p in phis)
    assert -math.pi < th <= math.pi
    # closed form of the maximum
    assert best == pytest.approx(math.sqrt(v[2] ** 2 + (v[1] - v[0]) ** 2 / 3), abs=1e-12)


# -- canonical frame ----------------------------------------------------------

def test_canonical_fixed_point_is_identity():
    f = canonical_frame(CANONICAL_QUAD)
    assert f.transform.allclose(SimilarityTransform.identity(), atol=1e-12)
    assert (f.label_A, f.label_B, f.label_C) == (0, 1, 2)


def test_canonical_frame_invariants(rng):
    for _ in range(50):
        P = general_points(rng, 5) * 4 - 1
        f = canonical_frame(P)
        assert np.allclose(f.transform.apply(P[f.label_A]), 0, atol=1e-9)
        assert np.allclose(f.transform.apply(P[f.label_B]), 1, atol=1e-9)
        assert abs(f.normal_v @ DIAGONAL) < 1e-9
        c = f.transform.apply(P[f.label_C])
        assert c[0] <= c[1] + 1e-12


def test_canonical_invariance_example(rng):
    P = general_points(rng, 5)
    t = SimilarityTransform(random_rotation(rng), np.array([10.0, -5.0, 2.0]), 3.0)
    a, b = canonical_frame(P), canonical_frame(t.apply(P))
    assert np.allclose(a.transform.apply(P), b.transform.apply(t.apply(P)), atol=1e-9)


def test_specific_quad_matches_grid_oracle():
    P = np.array([[0, 0, 0], [2, 2, 2], [2, 0, 0], [1, 1, 0]], dtype=float)
    assert np.allclose(describe(P).code, code_oracle(P), atol=1e-6)


def test_random_quads_match_grid_oracle(rng):
    for k in (4, 5, 6):
        for _ in range(10):
            P = general_points(rng, k)
            assert np.allclose(describe(P).code, code_oracle(P), atol=1e-6)


def test_collinear_plane_star_raises():
    P = np.array([[0, 0, 0], [3, 0, 0], [1, 0.01, 0], [2, 0, 0.02]], dtype=float)
    for perm in permutations(range(4)):
        with pytest.raises(DegenerateError):
            canonical_frame(P[list(perm)])
    with pytest.raises(DegenerateError):
        describe(P)


def test_coincident_points_raise():
    P = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0]], dtype=float)
    with pytest.raises(DegenerateError):
        describe(P)


def test_needs_four_points():
    with pytest.raises(ValueError):
        describe(np.eye(3))


# -- describe -----------------------------------------------------------------

def test_describe_canonical_quad():
    d = describe(CANONICAL_QUAD)
    assert d.k == 4
    assert np.allclose(d.code, [0.2, 0.8, 0.5, 0.3, 0.35, 0.3], atol=1e-12)


def test_describe_non_canonical_input_is_recanonicalised():
    # A, B already at (0,0,0), (1,1,1) does not make the frame canonical: the
    # rotation about the diagonal is still fixed by the plane star.
    P = np.array([[0, 0, 0], [1, 1, 1], [0.2, 0.5, 0.1], [0.7, 0.6, 0.3]], dtype=float)
    d = describe(P)
    assert np.allclose(d.code, code_oracle(P), atol=1e-6)
    assert not np.allclose(d.code, [0.2, 0.5, 0.1, 0.7, 0.6, 0.3], atol=1e-3)


@settings(max_examples=300, deadline=None)
@given(seeds, st.sampled_from([4, 5, 6]))
def test_similarity_invariance(seed, k):
    rng = np.random.default_rng(seed)
    P = general_points(rng, k)
    t = random_similarity(rng)
    assert np.abs(describe(P).code - describe(t.apply(P)).code).max() < 1e-9


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    P = general_points(rng, 5)
    base = describe(P).code
    for _ in range(5):
        perm = rng.permutation(5)
        assert np.abs(describe(P[perm]).code - base).max() < 1e-12


def test_deterministic_bitwise(rng):
    P = general_points(rng, 5)
    assert describe(P) == describe(P.copy())
    assert hash(describe(P)) == hash(describe(P.copy()))


def test_descriptor_invariants(rng):
    for k in (4, 5, 7):
        for _ in range(30):
            d = describe(general_points(rng, k))
            assert len(d.code) == 3 * (k - 2)
            xs = d.code[0::3]
            assert np.all(np.diff(xs) >= 0)


def test_mirror_image_differs(rng):
    for _ in range(50):
        P = general_points(rng, 5)
        mirrored = P * [-1, 1, 1]
        assert np.abs(describe(P).code - describe(mirrored).code).max() > 1e-6


def test_descriptor_validates_length():
    with pytest.raises(ValueError):
        Descriptor(np.zeros(5), 4)


def test_batch_matches_single(rng):
    P = np.stack([general_points(rng, 5) for _ in range(20)])
    codes, order, degenerate = describe_batch(P)
    assert not degenerate.any()
    for m in range(20):
        assert np.array_equal(codes[m], describe(P[m]).code)
        assert list(order[m]) == canonical_order(P[m])


def test_canonical_order_lists_a_b_then_x(rng):
    P = general_points(rng, 6)
    order = canonical_order(P)
    f = canonical_frame(P)
    assert order[:2] == [f.label_A, f.label_B]
    xs = f.transform.apply(P[order[2:]])[:, 0]
    assert np.all(np.diff(xs) >= 0)


# -- distance ----------------------------------------------------------------

def test_distance_self_zero(rng):
    d = describe(general_points(rng, 5))
    assert descriptor_distance(d, d) == 0.0


def test_distance_single_component():
    a = Descriptor(np.zeros(6), 4)
    b = Descriptor(np.array([0, 0, 0.3, 0, 0, 0]), 4)
    assert descriptor_distance(a, b) == pytest.approx(0.3)


def test_distance_formula(rng):
    for _ in range(100):
        a, b = Descriptor(rng.normal(size=9), 5), Descriptor(rng.normal(size=9), 5)
        explicit = math.sqrt(sum((x - y) ** 2 for x, y in zip(a.code, b.code)))
        assert descriptor_distance(a, b) == pytest.approx(explicit, abs=1e-12)
        assert descriptor_distance(a, b) == descriptor_distance(b, a)


def test_distance_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        descriptor_distance(Descriptor(np.zeros(6), 4), Descriptor(np.zeros(9), 5))


# -- induced transform --------------------------------------------------------

def test_induced_identity(rng):
    P = general_points(rng, 5)
    f = canonical_frame(P)
    assert induced_transform(f, f).allclose(SimilarityTransform.identity(), atol=1e-9)


def test_induced_recovers_inverse_motion(rng):
    P = general_points(rng, 5)
    t = random_similarity(rng, scale_range=(1, 1))
    got = induced_transform(canonical_frame(t.apply(P)), canonical_frame(P))
    assert got.allclose(t.inverse(), atol=1e-9)


def test_induced_scale():
    P = general_points(np.random.default_rng(5), 5)
    got = induced_transform(canonical_frame(2 * P), canonical_frame(P))
    assert got.scale == pytest.approx(0.5, abs=1e-9)


def test_pairs_of_points_tie_free_enumeration_consistency(rng):
    # every k-subset of a cloud describes the same whether passed alone or batched
    P = rng.uniform(size=(7, 3))
    subsets = np.array(list(combinations(range(7), 5)))
    codes, _, degenerate = describe_batch(P[subsets])
    for s, c, dg in zip(subsets, codes, degenerate):
        if not dg:
            assert np.array_equal(c, describe(P[s]).code)
