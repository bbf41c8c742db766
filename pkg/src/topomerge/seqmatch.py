"""Topological localization: difference matrices, DP sequence matching and
RANSAC fundamental-matrix verification."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, InsufficientMatches, NoSharedVisibility

SM, GV, CCM = "SM", "GV", "CCM"


@dataclass
class DifferenceMatrix:
    values: np.ndarray
    ref_node_ids: list
    query_node_ids: list

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.ref_node_ids), len(self.query_node_ids)):
            raise DimensionMismatch(
                f"values shape {self.values.shape} does not match "
                f"{len(self.ref_node_ids)} refs x {len(self.query_node_ids)} queries"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("difference matrix must be finite")

    def reversed_refs(self) -> "DifferenceMatrix":
        return DifferenceMatrix(self.values[::-1], list(self.ref_node_ids)[::-1], list(self.query_node_ids))

    def to_csv(self, path):
        np.savetxt(path, self.values, delimiter=",", fmt="%.6f")


@dataclass(frozen=True)
class SeqMatchConfig:
    velocity_set: tuple = (1, 2, 3)
    jump_threshold: int = 10
    jump_penalty: float = 0.5
    path_cost_accept: float = 0.5

    def __post_init__(self):
        vs = tuple(sorted({int(v) for v in self.velocity_set}))
        object.__setattr__(self, "velocity_set", vs)
        if not vs or vs[0] < 1:
            raise ValueError("velocities must be positive integers")
        if self.jump_threshold <= vs[-1]:
            raise ValueError("jump_threshold must exceed the largest velocity")
        if self.jump_penalty < 0:
            raise ValueError("jump_penalty must be non-negative")


@dataclass(frozen=True)
class MatchPair:
    ref: int
    query: int
    score: float


@dataclass
class MatchPairSet:
    """Matched (reference, query) pairs of one pipeline stage.

    ``score`` is stage specific: cosine distance for SM, RANSAC inlier count
    for GV and mean calibrated confidence for CCM.
    """

    pairs: list = field(default_factory=list)
    stage: str = SM

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def query_ids(self):
        return [p.query for p in self.pairs]

    def to_lines(self):
        return [f"PAIR {self.stage} {p.ref} {p.query} {p.score!r}" for p in self.pairs]


@dataclass(frozen=True)
class GvConfig:
    ransac_iterations: int = 1000
    epipolar_inlier_threshold: float = 3.0
    min_inlier_count: int = 30
    confidence: float = 0.9999
    seed: int = 0

    def __post_init__(self):
        if self.ransac_iterations < 1:
            raise ValueError("ransac_iterations must be >= 1")
        if not self.epipolar_inlier_threshold > 0:
            raise ValueError("epipolar_inlier_threshold must be positive")


# -- difference matrix -------------------------------------------------------------

def _descriptors(nodes):
    out = []
    for n in nodes:
        out.append(np.asarray(getattr(n, "descriptor", n), dtype=float).reshape(-1))
    return out


def build_difference_matrix(ref_nodes, query_nodes, ref_ids=None, query_ids=None) -> DifferenceMatrix:
    """Cosine distance ``1 - <d_ref, d_query>`` between every reference and query."""
    ref_nodes, query_nodes = list(ref_nodes), list(query_nodes)
    if not ref_nodes or not query_nodes:
        raise ValueError("difference matrix needs non-empty reference and query lists")
    R, Q = _descriptors(ref_nodes), _descriptors(query_nodes)
    dims = {d.shape[0] for d in R + Q}
    if len(dims) != 1:
        raise DimensionMismatch(f"descriptor dimensions differ: {sorted(dims)}")
    R, Q = np.stack(R), np.stack(Q)
    values = np.clip(1.0 - R @ Q.T, 0.0, 2.0)
    if ref_ids is None:
        ref_ids = [getattr(n, "node_id", k) for k, n in enumerate(ref_nodes)]
    if query_ids is None:
        query_ids = [getattr(n, "node_id", k) for k, n in enumerate(query_nodes)]
    return DifferenceMatrix(values, list(ref_ids), list(query_ids))


def retrieval_topk(diff: DifferenceMatrix, query_index: int, k: int):
    """Reference ids ranked by ascending difference; ties go to the lower id."""
    n = len(diff.ref_node_ids)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    col = diff.values[:, query_index]
    ids = np.asarray(diff.ref_node_ids)
    order = np.lexsort((ids, col))
    return [diff.ref_node_ids[i] for i in order[:k]]


# -- DP sequence matching ------------------------------------------------------------

def _prefix_argmin(v):
    """For each i, (min, argmin) of v[:i+1]; ties keep the lowest index."""
    n = len(v)
    mval = np.empty(n)
    midx = np.empty(n, dtype=int)
    best, bi = np.inf, -1
    for i in range(n):
        if v[i] < best:
            best, bi = v[i], i
        mval[i], midx[i] = best, bi
    return mval, midx


def _suffix_argmin(v):
    """For each i, (min, argmin) of v[i:]; ties keep the lowest index."""
    n = len(v)
    mval = np.empty(n)
    midx = np.empty(n, dtype=int)
    best, bi = np.inf, -1
    for i in range(n - 1, -1, -1):
        if v[i] <= best:
            best, bi = v[i], i
        mval[i], midx[i] = best, bi
    return mval, midx


def dp_costs(values: np.ndarray, cfg: SeqMatchConfig):
    """Accumulated cost and predecessor row for every cell.

    C(i, 0) = D(i, 0) and for later columns

        C(i, j) = D(i, j) + min( min_V C(i - V, j - 1),
                                 min_{|k - i| >= Delta} C(k, j - 1) + lambda )
    """
    D = np.asarray(values, dtype=float)
    N, M = D.shape
    C = np.full((N, M), np.inf)
    pred = np.full((N, M), -1, dtype=int)
    C[:, 0] = D[:, 0]
    rows = np.arange(N)
    delta, lam = cfg.jump_threshold, cfg.jump_penalty
    for j in range(1, M):
        prev = C[:, j - 1]
        best = np.full(N, np.inf)
        arg = np.full(N, -1, dtype=int)
        # in-sequence: predecessor at i - V; scan velocities so lower rows win ties
        for V in sorted(cfg.velocity_set, reverse=True):
            src = rows - V
            ok = src >= 0
            cand = np.where(ok, prev[np.clip(src, 0, None)], np.inf)
            better = cand < best
            best = np.where(better, cand, best)
            arg = np.where(better, src, arg)
        # jumps from k <= i - Delta and k >= i + Delta
        pval, pidx = _prefix_argmin(prev)
        sval, sidx = _suffix_argmin(prev)
        lo = rows - delta
        hi = rows + delta
        jl = np.where(lo >= 0, pval[np.clip(lo, 0, N - 1)] + lam, np.inf)
        jl_i = np.where(lo >= 0, pidx[np.clip(lo, 0, N - 1)], -1)
        jh = np.where(hi <= N - 1, sval[np.clip(hi, 0, N - 1)] + lam, np.inf)
        jh_i = np.where(hi <= N - 1, sidx[np.clip(hi, 0, N - 1)], -1)
        for cand, cidx in ((jl, jl_i), (jh, jh_i)):
            better = (cand < best) | ((cand == best) & (cidx < arg) & np.isfinite(cand))
            best = np.where(better, cand, best)
            arg = np.where(better, cidx, arg)
        C[:, j] = D[:, j] + best
        pred[:, j] = arg
    return C, pred


def backtrack(C, pred):
    """Path rows for each column, starting from the lowest-cost final cell.

    Returns an empty list when no legal path reaches the last column.
    """
    N, M = C.shape
    i = int(np.argmin(C[:, -1]))
    if not np.isfinite(C[i, -1]):
        return []
    path = [i]
    for j in range(M - 1, 0, -1):
        i = int(pred[i, j])
        path.append(i)
    return path[::-1]


def path_segments(path, cfg: SeqMatchConfig):
    """Split a path into maximal runs of in-sequence steps."""
    if not path:
        return []
    segs = [[0]]
    for j in range(1, len(path)):
        step = path[j] - path[j - 1]
        if step in cfg.velocity_set:
            segs[-1].append(j)
        else:
            segs.append([j])
    return segs


def dp_sequence_match(diff: DifferenceMatrix, cfg: SeqMatchConfig | None = None):
    """Run the DP and return ``(cost matrix, MatchPairSet)``.

    Pairs are kept per in-sequence segment of the optimal path when the
    segment's mean difference is at most ``path_cost_accept``.
    """
    cfg = cfg or SeqMatchConfig()
    C, pred = dp_costs(diff.values, cfg)
    path = backtrack(C, pred)
    pairs = []
    for seg in path_segments(path, cfg):
        costs = [diff.values[path[j], j] for j in seg]
        if np.mean(costs) <= cfg.path_cost_accept:
            for j in seg:
                pairs.append(MatchPair(diff.ref_node_ids[path[j]], diff.query_node_ids[j],
                                       float(diff.values[path[j], j])))
    return C, MatchPairSet(pairs, SM)


def path_cost(values, path, cfg: SeqMatchConfig):
    """Total cost of an explicit path (row per column), inf if illegal."""
    total = values[path[0], 0]
    for j in range(1, len(path)):
        step = path[j] - path[j - 1]
        if step in cfg.velocity_set:
            total += values[path[j], j]
        elif abs(step) >= cfg.jump_threshold:
            total += values[path[j], j] + cfg.jump_penalty
        else:
            return np.inf
    return total


# -- geometric verification ------------------------------------------------------------

def _normalize_points(x):
    c = x.mean(axis=-2, keepdims=True)
    d = np.sqrt(np.sum((x - c) ** 2, axis=-1)).mean(axis=-1)
    s = np.sqrt(2.0) / np.maximum(d, 1e-12)
    T = np.zeros(x.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * c[..., 0, 0]
    T[..., 1, 2] = -s * c[..., 0, 1]
    T[..., 2, 2] = 1.0
    xn = (x - c) * s[..., None, None]
    return xn, T


def eight_point(xa, xb):
    """Normalized 8-point fundamental matrix, batched over leading dims.

    ``xb^T F xa = 0`` for corresponding pixels ``xa`` (first image) and ``xb``.
    """
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    na, Ta = _normalize_points(xa)
    nb, Tb = _normalize_points(xb)
    u, v = na[..., 0], na[..., 1]
    up, vp = nb[..., 0], nb[..., 1]
    one = np.ones_like(u)
    A = np.stack([up * u, up * v, up, vp * u, vp * v, vp, u, v, one], axis=-1)
    _, _, Vt = np.linalg.svd(A)
    F = Vt[..., -1, :].reshape(A.shape[:-2] + (3, 3))
    U, S, Vt2 = np.linalg.svd(F)
    S[..., 2] = 0.0
    F = U @ (S[..., :, None] * Vt2)
    F = np.swapaxes(Tb, -1, -2) @ F @ Ta
    norm = np.linalg.norm(F.reshape(F.shape[:-2] + (9,)), axis=-1)
    return F / np.maximum(norm, 1e-300)[..., None, None]


def symmetric_epipolar_distance(F, xa, xb):
    """sqrt(d_a^2 + d_b^2) with d the point-to-epipolar-line distance in each image.

    ``F`` may carry leading batch dims; distances broadcast to ``(..., n)``.
    """
    ha = np.concatenate([xa, np.ones(xa.shape[:-1] + (1,))], axis=-1)
    hb = np.concatenate([xb, np.ones(xb.shape[:-1] + (1,))], axis=-1)
    Fa = np.einsum("...ij,nj->...ni", F, ha)
    Ftb = np.einsum("...ji,nj->...ni", F, hb)
    num = np.einsum("...ni,ni->...n", Fa, hb) ** 2
    da = num / np.maximum(Fa[..., 0] ** 2 + Fa[..., 1] ** 2, 1e-300)
    db = num / np.maximum(Ftb[..., 0] ** 2 + Ftb[..., 1] ** 2, 1e-300)
    return np.sqrt(da + db)


def _pair_seed(seed, a, b):
    h = hashlib.sha256(f"gv:{seed}:{a}:{b}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def _local_optimize(F, mask, xa, xb, thr, rounds=4):
    """Refit on inliers of a widened band shrinking back to ``thr``.

    The fit is only kept when it does not lose inliers at ``thr``.
    """
    count = int(mask.sum())
    for scale in np.linspace(3.0, 1.0, rounds):
        for _ in range(3):
            d = symmetric_epipolar_distance(F, xa, xb)
            sel = d <= scale * thr
            if sel.sum() < 8:
                return F, mask
            F2 = eight_point(xa[sel], xb[sel])
            m2 = symmetric_epipolar_distance(F2, xa, xb) <= thr
            if m2.sum() < count:
                break
            grew = m2.sum() > count
            F, mask, count = F2, m2, int(m2.sum())
            if not grew:
                break
    return F, mask


def ransac_fundamental(xa, xb, cfg: GvConfig | None = None, rng=None):
    """Return ``(F, inlier_mask)`` from RANSAC over 8-point hypotheses.

    Every new best hypothesis is locally optimized by refitting on its
    inliers, so one noisy minimal sample does not fix the final model.
    """
    cfg = cfg or GvConfig()
    xa = np.asarray(xa, dtype=float).reshape(-1, 2)
    xb = np.asarray(xb, dtype=float).reshape(-1, 2)
    n = len(xa)
    if n < 8:
        raise InsufficientMatches(f"{n} correspondences, need at least 8")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    thr = cfg.epipolar_inlier_threshold
    best_F, best_mask, best_count = None, None, -1
    done = 0
    budget = cfg.ransac_iterations
    chunk = 200
    while done < budget:
        m = min(chunk, budget - done)
        idx = np.argsort(rng.random((m, n)), axis=1)[:, :8]
        F = eight_point(xa[idx], xb[idx])
        d = symmetric_epipolar_distance(F, xa, xb)
        d = np.where(np.isfinite(d), d, np.inf)
        counts = np.sum(d <= thr, axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_F, best_mask = _local_optimize(F[k], d[k] <= thr, xa, xb, thr)
            best_count = int(best_mask.sum())
        done += m
        # standard adaptive stopping
        w = best_count / n
        if 0 < w < 1:
            need = np.log(1 - cfg.confidence) / np.log(max(1 - w**8, 1e-300))
            budget = min(budget, max(int(np.ceil(need)), done))
        elif w >= 1:
            break
    best_F, best_mask = _local_optimize(best_F, best_mask, xa, xb, thr)
    return best_F, best_mask


def geometric_verify(pairs: MatchPairSet, match_provider: Callable, cfg: GvConfig | None = None) -> MatchPairSet:
    """Keep SM pairs whose correspondences admit enough RANSAC inliers.

    ``match_provider(ref_id, query_id)`` returns ``(pixels_ref, pixels_query)``.
    Provider ``NoSharedVisibility`` and too-few-match cases reject the pair.
    """
    cfg = cfg or GvConfig()
    out = []
    for p in pairs:
        try:
            xa, xb = match_provider(p.ref, p.query)
            _, mask = ransac_fundamental(xa, xb, cfg, np.random.default_rng(_pair_seed(cfg.seed, p.ref, p.query)))
        except (NoSharedVisibility, InsufficientMatches):
            continue
        count = int(mask.sum())
        if count >= cfg.min_inlier_count:
            out.append(MatchPair(p.ref, p.query, float(count)))
    return MatchPairSet(out, GV)


def gv_inlier_count(xa, xb, cfg: GvConfig | None = None, key=(0, 0)) -> int:
    cfg = cfg or GvConfig()
    try:
        _, mask = ransac_fundamental(xa, xb, cfg, np.random.default_rng(_pair_seed(cfg.seed, *key)))
    except InsufficientMatches:
        return 0
    return int(mask.sum())
