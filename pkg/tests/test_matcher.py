from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from constel.constellations import EnumerationParams, PointCloud, build_table
from constel.errors import InsufficientMatchesError, NoConsensusError
from constel.geom import RansacParams, SimilarityTransform
from constel.mapstore import build_map
from constel.matcher import (
    STAGE_CLIQUE,
    STAGE_COMPLETED,
    STAGE_HUNGARIAN,
    EvalReport,
    MatchParams,
    MatchResult,
    VoteMatrix,
    assign_hungarian,
    clique_filter,
    complete_matches,
    consistency_graph,
    estimate_pose,
    evaluate,
    localize,
    match_clouds,
    vote_correspondences,
)
from constel.synthbench import OrchardSpec, gen_orchard

from conftest import cloud_of, random_similarity
from oracles import hungarian_oracle, max_clique_oracle

SMALL = OrchardSpec(trees=2, fruits_per_tree=40, seed=11)


@pytest.fixture(scope="module")
def orchard():
    return gen_orchard(SMALL)


@pytest.fixture(scope="module")
def orchard_map(orchard):
    return build_map(orchard)


def one_to_one(pairs):
    qs = [p[0] for p in pairs]
    ms = [p[1] for p in pairs]
    return len(set(qs)) == len(qs) and len(set(ms)) == len(ms)


# -- VoteMatrix / Hungarian ----------------------------------------------------

def test_vote_matrix_basics():
    vm = VoteMatrix.from_pairs(np.array([[1, 2], [1, 2], [3, 4]]))
    assert vm[1, 2] == 2 and vm[3, 4] == 1 and vm[0, 0] == 0
    assert vm.query_ids() == [1, 3] and vm.map_ids() == [2, 4]
    assert VoteMatrix({(0, 0): 0}).counts == {}


def test_hungarian_diagonal():
    assert assign_hungarian(VoteMatrix({(0, 0): 5, (1, 1): 5})) == [(0, 0), (1, 1)]


def test_hungarian_anti_diagonal():
    votes = VoteMatrix({(0, 0): 1, (0, 1): 2, (1, 0): 2, (1, 1): 1})
    got = assign_hungarian(votes, min_votes=1)
    assert got == [(0, 1), (1, 0)]
    assert sum(votes[p] for p in got) == 4


def test_hungarian_forbids_sub_threshold_cells():
    votes = VoteMatrix({(0, 0): 1, (1, 1): 3})
    assert assign_hungarian(votes, min_votes=2) == [(1, 1)]
    assert assign_hungarian(VoteMatrix(), 2) == []


def test_hungarian_exhaustive_oracle(rng):
    for case in range(500):
        r, c = (int(x) for x in rng.integers(1, 8, 2))
        M = rng.integers(0, 6, (r, c))
        min_votes = int(rng.integers(1, 4))
        qs = rng.permutation(100)[:r]
        ms = rng.permutation(100)[:c]
        votes = VoteMatrix({(int(qs[i]), int(ms[j])): int(M[i, j]) for i in range(r) for j in range(c)})
        got = assign_hungarian(votes, min_votes)
        assert one_to_one(got)
        assert all(votes[p] >= min_votes for p in got)
        assert sum(votes[p] for p in got) == hungarian_oracle(M, min_votes)
        assert assign_hungarian(votes, min_votes) == got


def test_hungarian_tie_deterministic_under_insertion_order():
    cells = {(0, 0): 3, (0, 1): 3, (1, 0): 3, (1, 1): 3}
    a = assign_hungarian(VoteMatrix(cells))
    b = assign_hungarian(VoteMatrix(dict(reversed(list(cells.items())))))
    assert a == b


# -- voting ------------------------------------------------------------------

def test_self_match_votes_diagonal(orchard, orchard_map):
    votes = vote_correspondences(orchard_map, orchard)
    for q in votes.query_ids():
        assert votes.top_partner(q) == q


def test_rigid_copy_votes_identical(orchard, orchard_map, rng):
    t = random_similarity(rng, scale_range=(1, 1))
    moved = orchard.with_positions(t.apply(orchard.positions))
    a = vote_correspondences(orchard_map, orchard).counts
    b = vote_correspondences(orchard_map, moved).counts
    # codes agree to ~1e-15, far inside tau, so the same entries are hit
    assert a == b


def test_deleted_fruit_row_absent(orchard, orchard_map):
    gone = int(orchard.ids[10])
    query = orchard.subset(orchard.ids != gone)
    votes = vote_correspondences(orchard_map, query)
    assert gone not in votes.query_ids()
    assert set(votes.query_ids()) <= set(query.ids.tolist())
    # every query constellation also present in the map votes for itself
    map_sets = {frozenset(m.tolist()) for m in orchard_map.table.members}
    shared = [m for m in build_table(query, orchard_map.params).members if frozenset(m.tolist()) in map_sets]
    assert shared
    expected = {}
    for m in shared:
        for i in m:
            expected[int(i)] = expected.get(int(i), 0) + 1
    for i, n in expected.items():
        assert votes[i, i] >= n


# -- clique filter -------------------------------------------------------------

def test_clique_keeps_rigid_set(rng):
    P = rng.uniform(0, 5, (12, 3))
    t = random_similarity(rng, scale_range=(1, 1))
    q, m = cloud_of(t.apply(P)), cloud_of(P)
    corr = [(i, i) for i in range(12)]
    assert clique_filter(corr, q, m, 0.05) == corr


def test_clique_drops_displaced_match(rng):
    P = rng.uniform(0, 5, (6, 3))
    Q = P.copy()
    Q[5] += [0.5, 0, 0]  # 10 x epsilon
    corr = [(i, i) for i in range(6)]
    assert clique_filter(corr, cloud_of(Q), cloud_of(P), 0.05) == corr[:5]


def test_clique_filter_matches_exhaustive(rng):
    for _ in range(60):
        n = int(rng.integers(2, 16))
        P = rng.uniform(0, 3, (n, 3))
        Q = P + rng.normal(scale=0.04, size=P.shape)
        bad = rng.random(n) < 0.3
        Q[bad] = rng.uniform(0, 3, (bad.sum(), 3))
        corr = [(i, i) for i in range(n)]
        adj, _ = consistency_graph(Q, P, 0.05)
        size, _ = max_clique_oracle(adj)
        kept = clique_filter(corr, cloud_of(Q), cloud_of(P), 0.05)
        assert len(kept) == size
        assert set(kept) <= set(corr)


def test_log_ratio_consistency_is_scale_free(rng):
    P = rng.uniform(0, 3, (10, 3))
    Q = 2.5 * P
    Q[0] += 4.0
    corr = [(i, i) for i in range(10)]
    kept = clique_filter(corr, cloud_of(Q, metric=False), cloud_of(P), 0.05)
    assert kept == corr[1:]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_filter_never_loses_precision(seed):
    rng = np.random.default_rng(seed)
    n = 25
    P = rng.uniform(0, 4, (n, 3))
    Q = P + rng.normal(scale=0.005, size=P.shape)
    corr = [(i, i) for i in range(n)]
    wrong = rng.choice(n, 5, replace=False)
    for w in wrong:
        corr.append((int(w), int(rng.integers(n, 2 * n))))
    M = np.vstack([P, rng.uniform(0, 4, (n, 3))])
    q, m = cloud_of(Q), cloud_of(M)
    kept = clique_filter(corr, q, m, 0.05)
    prec = lambda c: sum(a == b for a, b in c) / len(c)
    assert prec(kept) >= prec(corr)
    assert set(kept) <= set(corr)


# -- pose -------------------------------------------------------------------

def test_estimate_pose_exact(rng):
    P = rng.uniform(0, 5, (20, 3))
    t = random_similarity(rng, scale_range=(1, 1))
    est, inl = estimate_pose([(i, i) for i in range(20)], cloud_of(t.apply(P)), cloud_of(P))
    assert est.allclose(t.inverse(), atol=1e-9)
    assert len(inl) == 20


def test_estimate_pose_with_mismatches(rng):
    P = rng.uniform(0, 5, (40, 3))
    t = random_similarity(rng, scale_range=(1, 1))
    corr = [(i, i) for i in range(40)]
    for j in range(12):
        corr[j] = (j, (j + 7) % 40 if (j + 7) % 40 >= 12 else 39 - j)
    est, inl = estimate_pose(corr, cloud_of(t.apply(P)), cloud_of(P))
    assert est.allclose(t.inverse(), atol=1e-6)
    assert {corr[i] for i in inl} == {(i, i) for i in range(12, 40)}


def test_estimate_pose_collinear():
    P = np.outer(np.arange(3.0), [1, 1, 0])
    with pytest.raises(NoConsensusError):
        estimate_pose([(0, 0), (1, 1), (2, 2)], cloud_of(P), cloud_of(P))


def test_estimate_pose_scale_only_when_non_metric(rng):
    P = rng.uniform(0, 5, (10, 3))
    corr = [(i, i) for i in range(10)]
    rigid, _ = estimate_pose(corr, cloud_of(P), cloud_of(P))
    assert rigid.scale == 1.0
    sim, _ = estimate_pose(corr, cloud_of(2 * P, metric=False), cloud_of(P),
                           RansacParams(inlier_threshold=0.05))
    assert sim.scale == pytest.approx(0.5, abs=1e-12)


# -- completion -------------------------------------------------------------

def test_completion_nothing_left(rng):
    P = rng.uniform(size=(5, 3))
    matched = [(i, i) for i in range(5)]
    assert complete_matches(SimilarityTransform.identity(), matched, cloud_of(P), cloud_of(P), 0.1) == []


def test_completion_single_candidate():
    M = np.array([[0, 0, 0], [5, 0, 0], [0, 5, 0]], dtype=float)
    Q = M + [0.01, 0, 0]
    got = complete_matches(SimilarityTransform.identity(), [(0, 0), (1, 1)], cloud_of(Q), cloud_of(M), 0.05)
    assert got == [(2, 2)]


def test_completion_contention_closer_wins():
    M = np.array([[0, 0, 0]], dtype=float)
    Q = np.array([[0.03, 0, 0], [0, 0.02, 0]])
    got = complete_matches(SimilarityTransform.identity(), [], cloud_of(Q), cloud_of(M), 0.05)
    # pairing (1 -> 0) at 0.02 beats (0 -> 0) at 0.03 whichever is visited first
    assert got == [(1, 0)]
    got_rev = complete_matches(SimilarityTransform.identity(), [], cloud_of(Q[::-1], ids=[1, 0]), cloud_of(M), 0.05)
    assert got_rev == [(1, 0)]


# -- full pipeline -----------------------------------------------------------

def test_self_match_shuffled_ids(orchard, orchard_map, rng):
    perm = rng.permutation(len(orchard))
    new_ids = orchard.ids[perm] + 1000
    query = PointCloud(new_ids, orchard.positions, orchard.frames_seen)
    res = match_clouds(orchard_map, query)
    gt = list(zip(new_ids.tolist(), orchard.ids.tolist()))
    rep = evaluate(res, gt)
    assert rep.precision == 1.0 and rep.recall == 1.0
    assert res.transform.allclose(SimilarityTransform.identity(), atol=1e-9)


def test_rigid_occluded_copy(orchard, orchard_map, rng):
    t = random_similarity(rng, scale_range=(1, 1))
    keep = np.sort(rng.permutation(len(orchard))[: int(0.8 * len(orchard))])
    sub = orchard.subset(keep)
    query = sub.with_positions(t.apply(sub.positions))
    res = match_clouds(orchard_map, query)
    assert sorted(res.pairs()) == [(int(i), int(i)) for i in sorted(sub.ids)]
    assert res.transform.allclose(t.inverse(), atol=1e-6)
    stages = {s for _, _, s in res.correspondences}
    assert stages <= {STAGE_CLIQUE, STAGE_COMPLETED}


def test_disjoint_scene(orchard_map):
    other = gen_orchard(replace(SMALL, seed=999))
    far = other.with_positions(other.positions + [100.0, 0, 0])
    try:
        res = match_clouds(orchard_map, far)
    except InsufficientMatchesError:
        return
    assert res.stats["ransac_inliers"] < 10


def test_too_few_survivors_raises(orchard_map):
    tiny = cloud_of(np.random.default_rng(0).uniform(size=(5, 3)), ids=[900, 901, 902, 903, 904])
    with pytest.raises(InsufficientMatchesError):
        match_clouds(orchard_map, tiny)


def test_pipeline_invariants(orchard, orchard_map, rng):
    q = orchard.with_positions(orchard.positions + rng.normal(scale=0.01, size=orchard.positions.shape))
    res = match_clouds(orchard_map, q)
    assert one_to_one(res.pairs())
    assert res.stats["clique"] <= res.stats["hungarian"]
    assert abs(res.transform.scale - 1) < 0.02
    again = match_clouds(orchard_map, q)
    assert again.correspondences == res.correspondences
    assert np.array_equal(again.transform.matrix(), res.transform.matrix())


def test_no_clique_filter_tags_hungarian(orchard, orchard_map):
    res = match_clouds(orchard_map, orchard, MatchParams(use_clique_filter=False))
    assert {s for _, _, s in res.correspondences} <= {STAGE_HUNGARIAN, STAGE_COMPLETED}


def test_scale_recovery_non_metric(orchard, orchard_map):
    q = orchard.with_positions(2.0 * orchard.positions, metric=False)
    t = localize(orchard_map, q, MatchParams(ransac=RansacParams(inlier_threshold=0.1)))
    assert t.scale == pytest.approx(0.5, abs=1e-6)


def test_windowed_mode(orchard, orchard_map, rng):
    q = orchard.with_positions(orchard.positions + rng.normal(scale=0.005, size=orchard.positions.shape))
    res = match_clouds(orchard_map, q, MatchParams(window=1.5))
    rep = evaluate(res, [(int(i), int(i)) for i in q.ids])
    assert rep.precision > 0.95 and rep.recall > 0.9
    assert res.stats["local_transforms"] >= 1


def test_match_params_validation():
    for bad in (dict(tau=0), dict(clique_epsilon=-1), dict(min_votes=0), dict(candidates_m=6), dict(window=0)):
        with pytest.raises(ValueError):
            MatchParams(**bad)


# -- evaluation --------------------------------------------------------------

def _result(pairs):
    return MatchResult([(q, m, STAGE_CLIQUE) for q, m in pairs], SimilarityTransform.identity(), [])


def test_evaluate_perfect():
    gt = [(i, i) for i in range(5)]
    assert evaluate(_result(gt), gt) == EvalReport(5, 0, 0, 1.0, 1.0)


def test_evaluate_empty_result():
    assert evaluate(_result([]), [(0, 0)]) == EvalReport(0, 0, 1, 0.0, 0.0)


def test_evaluate_planted_counts():
    gt = [(i, i) for i in range(10)]
    pred = [(i, i) for i in range(8)] + [(10, 11), (12, 13)]
    rep = evaluate(_result(pred), gt)
    assert (rep.true_positives, rep.false_positives, rep.false_negatives) == (8, 2, 2)
    assert rep.precision == pytest.approx(0.8) and rep.recall == pytest.approx(0.8)


def test_evaluate_min_frames_filter():
    q = PointCloud([0, 1, 2], np.eye(3), [10, 2, 10])
    m = PointCloud([0, 1, 2], np.eye(3), [10, 10, 10])
    gt = [(0, 0), (1, 1), (2, 2)]
    rep = evaluate(_result([(0, 0), (1, 2)]), gt, min_frames=5, query_cloud=q, map_fruits=m)
    # fruit 1 of the query is below the visibility threshold on both sides of the count
    assert (rep.true_positives, rep.false_positives, rep.false_negatives) == (1, 0, 1)
