import itertools

import numpy as np
import pytest

from topomerge import se3
from topomerge.errors import DimensionMismatch, NoSharedVisibility
from topomerge.seqmatch import (
    GV,
    SM,
    DifferenceMatrix,
    GvConfig,
    MatchPair,
    MatchPairSet,
    SeqMatchConfig,
    build_difference_matrix,
    dp_costs,
    dp_sequence_match,
    eight_point,
    geometric_verify,
    path_cost,
    path_segments,
    backtrack,
    ransac_fundamental,
    retrieval_topk,
    symmetric_epipolar_distance,
)


def brute_force_min(values, cfg):
    """Exhaustive minimum over every row sequence, vectorized per instance."""
    N, M = values.shape
    paths = np.array(list(itertools.product(range(N), repeat=M)))
    cost = values[paths[:, 0], 0].copy()
    legal = np.ones(len(paths), dtype=bool)
    for j in range(1, M):
        step = paths[:, j] - paths[:, j - 1]
        inseq = np.isin(step, cfg.velocity_set)
        jump = np.abs(step) >= cfg.jump_threshold
        legal &= inseq | jump
        # same association as the recursion so the comparison can be exact
        cost = values[paths[:, j], j] + (cost + np.where(inseq, 0.0, cfg.jump_penalty))
    cost = np.where(legal, cost, np.inf)
    return cost.min()


def test_difference_matrix_extremes():
    d = np.eye(4)[0]
    dm = build_difference_matrix([d, -d, np.eye(4)[1]], [d])
    assert dm.values[:, 0].tolist() == [0.0, 2.0, 1.0]


def test_difference_matrix_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        build_difference_matrix([np.ones(3) / np.sqrt(3)], [np.ones(4) / 2])
    with pytest.raises(DimensionMismatch):
        DifferenceMatrix(np.zeros((2, 2)), [1], [1, 2])


def test_config_validation():
    with pytest.raises(ValueError):
        SeqMatchConfig(velocity_set=(1, 2), jump_threshold=2)
    with pytest.raises(ValueError):
        SeqMatchConfig(velocity_set=(0, 1))


def test_single_cell():
    C, pairs = dp_sequence_match(DifferenceMatrix([[0.3]], [7], [9]), SeqMatchConfig(path_cost_accept=1.0))
    assert C.tolist() == [[0.3]]
    assert [(p.ref, p.query) for p in pairs] == [(7, 9)]


def test_single_column_returns_best_entry():
    dm = DifferenceMatrix([[0.5], [0.1], [0.1]], [1, 2, 3], [9])
    _, pairs = dp_sequence_match(dm, SeqMatchConfig(path_cost_accept=1.0))
    assert [(p.ref, p.query) for p in pairs] == [(2, 9)]


def test_three_by_three_diagonal():
    values = 1.0 - np.eye(3)
    cfg = SeqMatchConfig(velocity_set=(1,), jump_threshold=2, jump_penalty=0.5, path_cost_accept=0.1)
    C, pairs = dp_sequence_match(DifferenceMatrix(values, [0, 1, 2], [0, 1, 2]), cfg)
    assert C[2, 2] == 0.0
    assert backtrack(*dp_costs(values, cfg)) == [0, 1, 2]
    assert brute_force_min(values, cfg) == 0.0
    assert [(p.ref, p.query) for p in pairs] == [(0, 0), (1, 1), (2, 2)]


def test_dp_matches_exhaustive_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(200):
        N, M = rng.integers(1, 7, size=2)
        values = np.round(rng.uniform(0, 2, (N, M)), 2)
        cfg = SeqMatchConfig((1, 2), int(rng.integers(3, 6)), float(rng.choice([0.0, 0.3, 1.0])))
        C, pred = dp_costs(values, cfg)
        want = brute_force_min(values, cfg)
        assert C[:, -1].min() == want
        path = backtrack(C, pred)
        if np.isinf(want):
            assert path == []
        else:
            assert path_cost(values, path, cfg) == pytest.approx(want, abs=1e-12)


def planted_instance(seed, N=30, M=12, gap_start=8):
    rng = np.random.default_rng(seed)
    values = rng.uniform(0.6, 1.0, (N, M))
    truth = {}
    for j in range(6):
        truth[j] = 2 + j
    for j in range(6, 12):
        truth[j] = gap_start + 12 + (j - 6)
    for j, i in truth.items():
        values[i, j] = rng.uniform(0.0, 0.2)
    return values, truth


def test_planted_segments_recovered_with_one_jump():
    cfg = SeqMatchConfig(velocity_set=(1, 2, 3), jump_threshold=5, jump_penalty=0.5, path_cost_accept=0.3)
    for seed in range(10):
        values, truth = planted_instance(seed)
        dm = DifferenceMatrix(values, list(range(30)), list(range(12)))
        C, pairs = dp_sequence_match(dm, cfg)
        path = backtrack(*dp_costs(values, cfg))
        assert len(path_segments(path, cfg)) == 2
        got = {(p.ref, p.query) for p in pairs}
        want = {(i, j) for j, i in truth.items()}
        assert len(got & want) / len(want) >= 0.9
        again = dp_sequence_match(dm, cfg)[1]
        assert [(p.ref, p.query) for p in again] == [(p.ref, p.query) for p in pairs]


def test_jump_penalty_monotonicity():
    rng = np.random.default_rng(1)
    for _ in range(100):
        values = rng.uniform(0, 1, (8, 7))
        counts = []
        for lam in (0.0, 0.2, 0.5, 1.0, 3.0):
            cfg = SeqMatchConfig((1, 2), 3, lam)
            path = backtrack(*dp_costs(values, cfg))
            steps = np.diff(path)
            counts.append(int(np.sum(np.isin(steps, cfg.velocity_set))))
        assert all(b >= a for a, b in zip(counts, counts[1:]))


def test_retrieval_topk():
    rng = np.random.default_rng(2)
    refs = [v / np.linalg.norm(v) for v in rng.normal(size=(10, 8))]
    dm = build_difference_matrix(refs, [refs[3]], ref_ids=list(range(100, 110)))
    assert retrieval_topk(dm, 0, 1) == [103]
    assert sorted(retrieval_topk(dm, 0, 10)) == list(range(100, 110))
    q = rng.normal(size=8)
    dm = build_difference_matrix(refs, [q / np.linalg.norm(q)])
    assert retrieval_topk(dm, 0, 1)[0] == int(np.argmin(dm.values[:, 0]))
    tied = DifferenceMatrix(np.array([[0.2], [0.1], [0.1]]), [5, 9, 4], [0])
    assert retrieval_topk(tied, 0, 3) == [4, 9, 5]


# -- geometric verification -------------------------------------------------------

K = np.array([[500.0, 0, 320], [0, 500.0, 240], [0, 0, 1]])


def synthetic_correspondences(rng, n, outlier_rate=0.0, noise=0.0):
    """Points in front of two cameras; b is a small motion from a."""
    X = np.column_stack([rng.uniform(-6, 6, n), rng.uniform(-4, 4, n), rng.uniform(5, 20, n)])
    rel = se3.Pose.exp(np.r_[rng.normal(0, 0.05, 3), rng.normal(0, 0.5, 2), rng.uniform(0.5, 1.5)])
    Xb = rel.inverse().apply(X)

    def proj(P):
        p = P @ K.T
        return p[:, :2] / p[:, 2:]

    xa, xb = proj(X), proj(Xb)
    xa = xa + rng.normal(0, noise, xa.shape)
    xb = xb + rng.normal(0, noise, xb.shape)
    out = rng.random(n) < outlier_rate
    xb[out] = np.column_stack([rng.uniform(0, 640, out.sum()), rng.uniform(0, 480, out.sum())])
    R, t = rel.R, rel.t
    E = se3.skew(t) @ R
    # points map a -> b via X_b = R^T (X_a - t); F for x_b^T F x_a = 0
    Fgt = np.linalg.inv(K).T @ (R.T @ se3.skew(t)) @ np.linalg.inv(K)
    return xa, xb, ~out, Fgt


def test_eight_point_exact_data():
    rng = np.random.default_rng(3)
    xa, xb, _, Fgt = synthetic_correspondences(rng, 50)
    F = eight_point(xa, xb)
    hb = np.column_stack([xb, np.ones(50)])
    ha = np.column_stack([xa, np.ones(50)])
    assert np.max(np.abs(np.einsum("ni,ij,nj->n", hb, F, ha))) < 1e-9
    assert np.max(symmetric_epipolar_distance(Fgt, xa, xb)) < 1e-8


def test_ransac_exact_data_all_inliers():
    rng = np.random.default_rng(4)
    xa, xb, _, _ = synthetic_correspondences(rng, 200)
    _, mask = ransac_fundamental(xa, xb)
    assert mask.sum() == 200


def test_ransac_planted_outliers():
    cfg = GvConfig()
    hit = planted = false_hit = planted_out = 0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        xa, xb, inl, _ = synthetic_correspondences(rng, 200, outlier_rate=0.4, noise=0.5)
        _, mask = ransac_fundamental(xa, xb, cfg, np.random.default_rng(seed))
        assert (mask & inl).sum() >= 0.85 * inl.sum()
        hit += (mask & inl).sum()
        planted += inl.sum()
        false_hit += (mask & ~inl).sum()
        planted_out += (~inl).sum()
    assert hit >= 0.95 * planted
    assert false_hit <= 0.02 * planted_out


def test_geometric_verify_filters_pairs():
    rng = np.random.default_rng(5)
    good = synthetic_correspondences(rng, 200)[:2]
    junk = (rng.uniform(0, 640, (200, 2)), rng.uniform(0, 480, (200, 2)))

    def provider(r, q):
        if r == 3:
            raise NoSharedVisibility("no overlap")
        return good if r == 1 else junk

    sm = MatchPairSet([MatchPair(1, 10, 0.1), MatchPair(2, 11, 0.1), MatchPair(3, 12, 0.1)], SM)
    out = geometric_verify(sm, provider, GvConfig(min_inlier_count=60))
    assert out.stage == GV
    assert [(p.ref, p.query, p.score) for p in out] == [(1, 10, 200.0)]


def test_pair_lines():
    s = MatchPairSet([MatchPair(1, 2, 0.25)], SM)
    assert s.to_lines() == ["PAIR SM 1 2 0.25"]
