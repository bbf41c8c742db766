"""Incremental merging of query submaps into a global topometric map.

Each merge runs sequence matching, geometric verification, metric
localization with confidence-based acceptance, loop-closure insertion and
robust pose-graph optimization, then culls redundant nodes and adds
covisibility and traversability edges between nodes that came close.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from . import se3
from .errors import (
    DisconnectedGraph,
    InsufficientMatches,
    NonFiniteObjective,
    NoSharedVisibility,
    ProviderFailure,
    TopomergeError,
)
from .evalkit import ate_rmse
from .metricloc import IrlsConfig, accept_estimate, localize
from .posegraph import Factor, FactorGraph, RobustKernelConfig, optimize
from .se3 import Pose
from .seqmatch import (
    CCM,
    GV,
    SM,
    GvConfig,
    MatchPair,
    MatchPairSet,
    SeqMatchConfig,
    build_difference_matrix,
    dp_sequence_match,
    geometric_verify,
)
from .synthworld import CameraIntrinsics, PairwisePrediction
from .topomap import LOOP_CLOSURE, ODOMETRY, OdomFactorEdge, TopometricMap

SECONDS_PER_DAY = 86400.0
FORWARD, BACKWARD = "forward", "backward"
_SOFT_ERRORS = (NoSharedVisibility, InsufficientMatches, DisconnectedGraph)
# Huber threshold on the whitened 6-dof factor norm: inliers stay quadratic
# up to the 95% chi quantile, so typical residuals (norm ~2.45) keep full weight.
MERGE_HUBER_DELTA = float(np.sqrt(chi2.ppf(0.95, 6)))


@dataclass(frozen=True)
class CullingConfig:
    iq_sigmoid: tuple = (40.0, 0.1)
    ig_sigmoid: tuple = (0.15, 20.0)
    td_decay_rate: float = 0.02
    cull_probability_threshold: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        if self.iq_sigmoid[1] <= 0 or self.ig_sigmoid[1] <= 0:
            raise ValueError("sigmoid slopes must be positive")
        if self.td_decay_rate < 0:
            raise ValueError("td_decay_rate must be non-negative")
        if not 0 < self.cull_probability_threshold < 1:
            raise ValueError("cull_probability_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class MergeConfig:
    seqmatch: SeqMatchConfig = field(default_factory=SeqMatchConfig)
    gv: GvConfig = field(default_factory=GvConfig)
    irls: IrlsConfig = field(default_factory=IrlsConfig)
    culling: CullingConfig = field(default_factory=CullingConfig)
    kernel: RobustKernelConfig = field(default_factory=lambda: RobustKernelConfig("huber", MERGE_HUBER_DELTA))
    prefilter_min_quality: float = 25.0
    refs_per_query: int = 2
    max_metric_pairs: int | None = 40
    edge_radius_m: float = 6.0
    covis_min_strength: float = 30.0
    pgo_iterations: int = 100


@dataclass(frozen=True)
class InfoGain:
    gain: float

    def __post_init__(self):
        if not 0.0 <= self.gain <= 1.0:
            raise ValueError("gain must lie in [0, 1]")


@dataclass
class MergeReport:
    query_sessions: list
    pairs_sm: int = 0
    pairs_gv: int = 0
    pairs_ccm: int = 0
    stage_pairs: dict = field(default_factory=dict)
    accepted_factors: list = field(default_factory=list)
    culled_nodes: list = field(default_factory=list)
    new_edges: dict = field(default_factory=lambda: {"covis": 0, "trav": 0, "odom": 0})
    component_count_before: int = 0
    component_count_after: int = 0
    disconnected: bool = False
    ate_if_gt_available: float | None = None
    culling: CullingConfig = field(default_factory=CullingConfig)

    def check(self):
        if not self.pairs_ccm <= self.pairs_gv <= self.pairs_sm:
            raise AssertionError(f"stage counts not nested: {self.pairs_sm}/{self.pairs_gv}/{self.pairs_ccm}")

    def to_text(self) -> str:
        c = self.culling
        lines = [
            "MERGE " + " ".join(str(s) for s in self.query_sessions),
            f"STAGES {self.pairs_sm} {self.pairs_gv} {self.pairs_ccm}",
            f"COMPONENTS {self.component_count_before} {self.component_count_after}",
            f"DISCONNECTED {int(self.disconnected)}",
            f"EDGES covis={self.new_edges['covis']} trav={self.new_edges['trav']} odom={self.new_edges['odom']}",
            f"CULLCFG iq={c.iq_sigmoid[0]!r},{c.iq_sigmoid[1]!r} ig={c.ig_sigmoid[0]!r},{c.ig_sigmoid[1]!r} "
            f"td={c.td_decay_rate!r} thr={c.cull_probability_threshold!r}",
        ]
        lines += [f"FACTOR {a} {b} {m!r}" for a, b, m in self.accepted_factors]
        lines += [f"CULL {n} {op}" for n, op in self.culled_nodes]
        if self.ate_if_gt_available is not None:
            lines.append(f"ATE {self.ate_if_gt_available!r}")
        return "\n".join(lines) + "\n"


def write_stage_csv(path, reports):
    """Cumulative per-merge stage counts."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["merge", "sessions", "sm", "gv", "ccm", "sm_total", "gv_total", "ccm_total"])
        tot = [0, 0, 0]
        for k, r in enumerate(reports):
            tot = [tot[0] + r.pairs_sm, tot[1] + r.pairs_gv, tot[2] + r.pairs_ccm]
            w.writerow([k, " ".join(map(str, r.query_sessions)), r.pairs_sm, r.pairs_gv, r.pairs_ccm, *tot])


# -- culling probabilities -------------------------------------------------------------

def _sigmoid(x, midpoint, slope):
    z = slope * (x - midpoint)
    return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))


def time_decay(delta_days, rate):
    """``exp(-rate * dt)`` with negative gaps clamped to zero."""
    return math.exp(-rate * max(float(delta_days), 0.0))


def information_gain(prediction: PairwisePrediction, ref_intrinsics: CameraIntrinsics) -> InfoGain:
    """Fraction of the second grid of ``prediction`` (expressed in the
    reference frame) that projects outside the reference image."""
    X = np.asarray(prediction.pointmap_b_in_a, dtype=float).reshape(-1, 3)
    if len(X) == 0:
        raise ValueError("empty prediction grid")
    uv, z = ref_intrinsics.project(X)
    with np.errstate(invalid="ignore"):
        inside = ref_intrinsics.inside(uv, z) & np.isfinite(uv).all(axis=-1)
    return InfoGain(float(np.count_nonzero(~inside)) / len(X))


def _gain_value(gain):
    return gain.gain if isinstance(gain, InfoGain) else float(gain)


def forward_cull_probability(query_node, anchor_ref_node, gain, cfg: CullingConfig | None = None) -> float:
    cfg = cfg or CullingConfig()
    p_iq = _sigmoid(query_node.quality, *cfg.iq_sigmoid)
    p_ig = _sigmoid(_gain_value(gain), *cfg.ig_sigmoid)
    dt = (anchor_ref_node.timestamp - query_node.timestamp) / SECONDS_PER_DAY
    return p_iq * p_ig * time_decay(dt, cfg.td_decay_rate)


def backward_cull_probability(ref_node, query_node, gain, cfg: CullingConfig | None = None) -> float:
    cfg = cfg or CullingConfig()
    p_ig = _sigmoid(_gain_value(gain), *cfg.ig_sigmoid)
    dt = (query_node.timestamp - ref_node.timestamp) / SECONDS_PER_DAY
    return p_ig * time_decay(dt, cfg.td_decay_rate)


# -- node removal ------------------------------------------------------------------------

def _factor(m: TopometricMap, a, b):
    """Odometry-layer factor oriented a -> b, or None."""
    e = m.odom.get((a, b) if a < b else (b, a))
    if e is None:
        return None
    return e if e.a == a else e.reversed()


def _compose(f_ab: OdomFactorEdge, f_bc: OdomFactorEdge, kind):
    rel = f_ab.relative @ f_bc.relative
    cov = se3.compose_covariance(f_ab.covariance, f_bc.covariance, f_bc.relative)
    return OdomFactorEdge(f_ab.a, f_bc.b, rel, cov, kind)


def fuse_factors(f1: OdomFactorEdge, f2: OdomFactorEdge) -> OdomFactorEdge:
    """Information-weighted fusion of two measurements of the same relative
    pose, linearized at the first one; keeps the first one's kind."""
    if (f2.a, f2.b) != (f1.a, f1.b):
        f2 = f2.reversed()
    L1, L2 = np.linalg.inv(f1.covariance), np.linalg.inv(f2.covariance)
    cov = np.linalg.inv(L1 + L2)
    delta = (f1.relative.inverse() @ f2.relative).log()
    rel = f1.relative @ Pose.exp(cov @ L2 @ delta)
    return OdomFactorEdge(f1.a, f1.b, rel, 0.5 * (cov + cov.T), f1.kind)


def _store_factor(m, e):
    """Add ``e``, fusing with an existing factor on the same pair; returns 1
    when a new edge was created."""
    old = m.odom.get((min(e.a, e.b), max(e.a, e.b)))
    if old is None:
        m.add_odom(e)
        return 1
    m.add_odom(fuse_factors(old, e))
    return 0


def remove_node(m: TopometricMap, nid):
    """Remove ``nid`` keeping its neighborhood linked.

    The odometry chain through the node is replaced by the composed factor,
    loop closures are moved onto a chain neighbor through the composed
    relative pose, and trav/covis neighbors are stitched together (costs
    summed, strengths taking the weaker link).
    """
    odo_nb = [n for n in m.neighbors("odom", nid) if _factor(m, nid, n).kind == ODOMETRY]
    lc_nb = [n for n in m.neighbors("odom", nid) if _factor(m, nid, n).kind == LOOP_CLOSURE]
    new_odom = []
    if len(odo_nb) >= 2:
        same = [n for n in odo_nb if m.nodes[n].session_id == m.nodes[nid].session_id] or odo_nb
        before = [n for n in same if m.nodes[n].timestamp < m.nodes[nid].timestamp]
        after = [n for n in same if m.nodes[n].timestamp > m.nodes[nid].timestamp]
        if before and after:
            p, n = max(before, key=lambda k: m.nodes[k].timestamp), min(after, key=lambda k: m.nodes[k].timestamp)
            new_odom.append(_compose(_factor(m, p, nid), _factor(m, nid, n), ODOMETRY))
    if odo_nb:
        hub = odo_nb[0]
        to_hub = _factor(m, nid, hub)
        for x in lc_nb:
            if x == hub:
                continue
            new_odom.append(_compose(_factor(m, x, nid), to_hub, LOOP_CLOSURE))
    trav_nb = m.neighbors("trav", nid)
    trav_cost = {n: m.trav[(min(n, nid), max(n, nid))].cost for n in trav_nb}
    covis_nb = m.neighbors("covis", nid)
    covis_s = {n: m.covis[(min(n, nid), max(n, nid))].strength for n in covis_nb}
    m.remove_node(nid)
    added = {"odom": 0, "trav": 0, "covis": 0}
    for e in new_odom:
        added["odom"] += _store_factor(m, e)
    for i, a in enumerate(trav_nb):
        for b in trav_nb[i + 1:]:
            if (a, b) not in m.trav:
                m.add_trav(a, b, trav_cost[a] + trav_cost[b])
                added["trav"] += 1
    for i, a in enumerate(covis_nb):
        for b in covis_nb[i + 1:]:
            if (a, b) not in m.covis:
                m.add_covis(a, b, min(covis_s[a], covis_s[b]))
                added["covis"] += 1
    return added


def _component_sizes(m):
    comps = m.components()
    return len(set(comps.values()))


def cull_nodes(m: TopometricMap, ccm_pairs, gains, cfg: CullingConfig | None = None):
    """Forward then backward culling over accepted (ref, query) pairs.

    ``gains[(ref, query)] = (query gain toward ref, ref gain toward query)``.
    Backward checks only involve queries that survived the forward step, so
    a pair of mutually redundant nodes never loses both. A removal that
    would split a connected component is skipped.
    """
    cfg = cfg or CullingConfig()
    m = m.copy()
    culled = []
    if not cfg.enabled:
        return m, culled
    thr = cfg.cull_probability_threshold
    p_fw, p_bw = {}, {}
    for r, q in ccm_pairs:
        if r not in m.nodes or q not in m.nodes:
            continue
        g_q, _ = gains[(r, q)]
        p = forward_cull_probability(m.nodes[q], m.nodes[r], g_q, cfg)
        p_fw[q] = max(p_fw.get(q, 0.0), p)
    doomed_fw = {q for q, p in p_fw.items() if p < thr}
    for r, q in ccm_pairs:
        if r not in m.nodes or q not in m.nodes or q in doomed_fw:
            continue
        _, g_r = gains[(r, q)]
        p = backward_cull_probability(m.nodes[r], m.nodes[q], g_r, cfg)
        p_bw[r] = max(p_bw.get(r, 0.0), p)
    doomed = [(q, FORWARD) for q in sorted(doomed_fw)]
    doomed += [(r, BACKWARD) for r, p in sorted(p_bw.items()) if p < thr and r not in doomed_fw]
    for nid, op in doomed:
        if nid not in m.nodes:
            continue
        before = _component_sizes(m)
        trial = m.copy()
        remove_node(trial, nid)
        if _component_sizes(trial) > before - (1 if _isolated(m, nid) else 0):
            continue
        m = trial
        culled.append((nid, op))
    return m, culled


def _isolated(m, nid):
    return not m.neighbors("odom", nid)


# -- edge updating ---------------------------------------------------------------------

def _grid_pairs(m: TopometricMap, radius, subset=None):
    if radius <= 0 or len(m.nodes) < 2:
        return []
    ids = m.node_ids()
    pos = m.positions(ids)
    cells = {}
    for k, p in enumerate(pos):
        cells.setdefault(tuple(np.floor(p / radius).astype(int)), []).append(k)
    subset = set(subset) if subset is not None else None
    out = []
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    for cell, members in cells.items():
        near = [k for d in offsets for k in cells.get((cell[0] + d[0], cell[1] + d[1], cell[2] + d[2]), [])]
        for i in members:
            for j in near:
                if j <= i:
                    continue
                a, b = ids[i], ids[j]
                if subset is not None and a not in subset and b not in subset:
                    continue
                if np.linalg.norm(pos[i] - pos[j]) <= radius:
                    out.append((a, b))
    return sorted(out)


def update_edges(m: TopometricMap, provider, radius_m=6.0, covis_min_strength=30.0, nodes=None):
    """Test node pairs within ``radius_m`` that lack a covis or trav edge.

    ``provider.match_count(a, b)`` decides; passing pairs get a covis edge
    with that strength and a trav edge with Euclidean cost. ``nodes``
    restricts the test to pairs touching that set.
    """
    m = m.copy()
    added = {"covis": 0, "trav": 0}
    for a, b in _grid_pairs(m, radius_m, nodes):
        has_c, has_t = (a, b) in m.covis, (a, b) in m.trav
        if has_c and has_t:
            continue
        try:
            s = float(provider.match_count(a, b))
        except _SOFT_ERRORS:
            continue
        if s < covis_min_strength:
            continue
        if not has_c:
            m.add_covis(a, b, s)
            added["covis"] += 1
        if not has_t:
            d = float(np.linalg.norm(m.nodes[a].pose_world.t - m.nodes[b].pose_world.t))
            m.add_trav(a, b, max(d, 1e-6))
            added["trav"] += 1
    return m, added


# -- merge pipeline ------------------------------------------------------------------------

class _Guarded:
    """Provider wrapper turning unexpected errors into ProviderFailure."""

    def __init__(self, provider):
        self._p = provider

    def __getattr__(self, name):
        fn = getattr(self._p, name)
        if not callable(fn):
            return fn

        def call(*args, **kw):
            try:
                return fn(*args, **kw)
            except (TopomergeError, ProviderFailure):
                raise
            except Exception as exc:  # noqa: BLE001 - any provider fault aborts the merge
                raise ProviderFailure(f"provider.{name} failed: {exc}") from exc

        return call


def _ordered_nodes(m: TopometricMap, min_quality):
    ids = [n for n in m.nodes.values() if n.quality >= min_quality]
    ids.sort(key=lambda n: (n.session_id, n.timestamp, n.node_id))
    return ids


def sequence_match(global_map, query_map, cfg: MergeConfig):
    """DP matching against both orderings of the reference sequence; each
    query keeps its lowest-difference answer."""
    refs = _ordered_nodes(global_map, cfg.prefilter_min_quality)
    queries = _ordered_nodes(query_map, cfg.prefilter_min_quality)
    if not refs or not queries:
        return MatchPairSet([], SM)
    diff = build_difference_matrix(refs, queries)
    best = {}
    for d in (diff, diff.reversed_refs()):
        _, pairs = dp_sequence_match(d, cfg.seqmatch)
        for p in pairs:
            if p.query not in best or p.score < best[p.query].score:
                best[p.query] = p
    order = {n.node_id: k for k, n in enumerate(queries)}
    return MatchPairSet(sorted(best.values(), key=lambda p: order[p.query]), SM)


def _second_ref(m: TopometricMap, ref):
    nb = [n for n in m.neighbors("odom", ref) if _factor(m, ref, n).kind == ODOMETRY]
    if not nb:
        return None
    return max(nb, key=lambda n: (m.covis[(min(n, ref), max(n, ref))].strength
                                  if (min(n, ref), max(n, ref)) in m.covis else 0.0, -n))


def _spread(pairs, cap):
    if cap is None or len(pairs) <= cap:
        return list(pairs)
    idx = np.unique(np.round(np.linspace(0, len(pairs) - 1, cap)).astype(int))
    return [pairs[i] for i in idx]


def metric_stage(global_map, gv_pairs: MatchPairSet, provider, cfg: MergeConfig):
    """Metric localization of GV pairs; returns (CCM pair set, accepted list).

    Accepted entries are ``(anchor_ref, query, estimate)``.
    """
    accepted, kept = [], []
    for p in _spread(list(gv_pairs), cfg.max_metric_pairs):
        refs = [p.ref]
        if cfg.refs_per_query >= 2:
            r2 = _second_ref(global_map, p.ref)
            if r2 is not None:
                refs.append(r2)
        est = None
        for attempt in (refs, refs[:1]):
            poses = {r: global_map.nodes[r].pose_world for r in attempt}
            try:
                _, est = localize(p.query, attempt, provider, poses, cfg.irls)
                break
            except (DisconnectedGraph, NoSharedVisibility, NonFiniteObjective):
                est = None
                if len(attempt) == 1:
                    break
        if est is None or not accept_estimate(est, cfg.irls):
            continue
        accepted.append((est.anchor, p.query, est))
        kept.append(MatchPair(p.ref, p.query, float(est.mean_ccm)))
    return MatchPairSet(kept, CCM), accepted


def _transform_nodes(m, ids, G: Pose):
    for nid in ids:
        m.set_pose(nid, G @ m.nodes[nid].pose_world)


def _consensus(cands, tol_t=2.0, tol_r=10.0):
    best, best_n = None, -1
    for G in cands:
        n = sum(1 for H in cands if (lambda e: e[0] <= tol_t and e[1] <= tol_r)(se3.pose_error(G, H)))
        if n > best_n:
            best, best_n = G, n
    return best


def place_components(m: TopometricMap, loop_edges, anchor_component):
    """Rigidly move every component reached through ``loop_edges`` so that the
    loop closures hold, starting from ``anchor_component``; each move is the
    consensus of the candidate transforms of the linking closures."""
    comps = m.components()
    members = {}
    for nid, c in comps.items():
        members.setdefault(c, []).append(nid)
    placed = {anchor_component}
    while True:
        cands = {}
        for e in loop_edges:
            ca, cb = comps[e.a], comps[e.b]
            if ca in placed and cb not in placed:
                target = m.nodes[e.a].pose_world @ e.relative
                cands.setdefault(cb, []).append(target @ m.nodes[e.b].pose_world.inverse())
            elif cb in placed and ca not in placed:
                target = m.nodes[e.b].pose_world @ e.relative.inverse()
                cands.setdefault(ca, []).append(target @ m.nodes[e.a].pose_world.inverse())
        if not cands:
            return
        for c, gs in sorted(cands.items()):
            _transform_nodes(m, members[c], _consensus(gs))
            placed.add(c)


def optimize_component(m: TopometricMap, component_nodes, gauge_node, kernel, iterations):
    nodes = set(component_nodes)
    graph = FactorGraph({n: m.nodes[n].pose_world for n in nodes}, gauge={gauge_node})
    for (a, b), e in sorted(m.odom.items()):
        if a in nodes and b in nodes:
            graph.add_factor(Factor(e.a, e.b, e.relative, e.covariance, e.kind))
    res = optimize(graph, kernel, max_iters=iterations)
    for n, p in res.poses.items():
        m.set_pose(n, p)
    return res


def _insert_submap(m: TopometricMap, q: TopometricMap):
    if q.descriptor_dim != m.descriptor_dim and m.nodes:
        raise ValueError("query descriptor dimension differs from the global map")
    if not m.nodes:
        m.descriptor_dim = q.descriptor_dim
    m.blobs.update(q.blobs)
    for nid in q.node_ids():
        if nid in m.nodes:
            raise ValueError(f"node {nid} already in the global map")
        m.nodes[nid] = q.nodes[nid]
    m.covis.update(q.covis)
    m.odom.update(q.odom)
    m.trav.update(q.trav)


def merge_submap(global_map: TopometricMap, query_map: TopometricMap, provider, cfg: MergeConfig | None = None,
                 ground_truth=None):
    """Merge ``query_map`` into a copy of ``global_map``; returns (map, report).

    ``ground_truth`` (node id -> Pose), when given, fills the report's ATE
    over the largest component.
    """
    cfg = cfg or MergeConfig()
    provider = _Guarded(provider)
    qs = query_map.sessions()
    if set(qs) & set(global_map.sessions()):
        raise ValueError(f"sessions {sorted(set(qs) & set(global_map.sessions()))} already merged")
    report = MergeReport(qs, culling=cfg.culling)
    report.component_count_before = global_map.component_count()
    m = global_map.copy()

    if global_map.nodes:
        sm = sequence_match(global_map, query_map, cfg)
        gv = geometric_verify(sm, provider.keypoint_matches, cfg.gv)
        ccm, accepted = metric_stage(global_map, gv, provider, cfg)
    else:
        sm = gv = ccm = MatchPairSet([], SM)
        accepted = []
    report.stage_pairs = {SM: [(p.ref, p.query) for p in sm], GV: [(p.ref, p.query) for p in gv],
                          CCM: [(p.ref, p.query) for p in ccm]}
    report.pairs_sm, report.pairs_gv, report.pairs_ccm = len(sm), len(gv), len(ccm)

    _insert_submap(m, query_map)
    if not accepted:
        report.disconnected = bool(global_map.nodes)
    else:
        loop_edges = []
        for r, q, est in accepted:
            e = OdomFactorEdge(r, q, est.relative, est.covariance, LOOP_CLOSURE)
            loop_edges.append(e)
            report.accepted_factors.append((r, q, float(est.mean_ccm)))
        comps_before = global_map.components()
        sizes = {}
        for c in comps_before.values():
            sizes[c] = sizes.get(c, 0) + 1
        touched = {comps_before[r] for r, _, _ in accepted}
        anchor = min(touched, key=lambda c: (-sizes[c], c))
        place_components(m, loop_edges, anchor)
        for e in loop_edges:
            report.new_edges["odom"] += _store_factor(m, e)
        comp = m.components()
        label = comp[accepted[0][1]]
        members = [n for n, c in comp.items() if c == label]
        gauge = min(n for n in members if comps_before.get(n) == anchor)
        optimize_component(m, members, gauge, cfg.kernel, cfg.pgo_iterations)

        gains = {}
        ccm_pairs = []
        for r, q, _ in accepted:
            try:
                pr = provider.pairwise(r, q)
                g_q = information_gain(pr, pr.intrinsics)
                pq = provider.pairwise(q, r)
                g_r = information_gain(pq, pq.intrinsics)
            except NoSharedVisibility:
                continue
            gains[(r, q)] = (g_q, g_r)
            ccm_pairs.append((r, q))
        m, culled = cull_nodes(m, ccm_pairs, gains, cfg.culling)
        report.culled_nodes = culled
        comp = m.components()
        label = comp[next(n for n in members if n in m.nodes)]
        touched_nodes = [n for n, c in comp.items() if c == label]
        m, added = update_edges(m, provider, cfg.edge_radius_m, cfg.covis_min_strength, nodes=touched_nodes)
        report.new_edges["covis"] += added["covis"]
        report.new_edges["trav"] += added["trav"]

    report.component_count_after = m.component_count()
    if ground_truth is not None:
        main = m.main_component()
        comp = m.components()
        est = {n: m.nodes[n].pose_world for n, c in comp.items() if c == main and n in ground_truth}
        if len(est) >= 3:
            report.ate_if_gt_available = ate_rmse(est, ground_truth)[0]
    report.check()
    return m, report


def merge_sequence(submaps, provider, cfg: MergeConfig | None = None, ground_truth=None, on_merge=None):
    """Merge submaps in the given order, starting from an empty map."""
    m = TopometricMap()
    reports = []
    for sub in submaps:
        m, rep = merge_submap(m, sub, provider, cfg, ground_truth)
        reports.append(rep)
        if on_merge is not None:
            on_merge(m, rep)
    return m, reports
