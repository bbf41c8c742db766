"""Metric localization of a query view against fixed reference views.

Pairwise pointmap predictions are fused by a global 3D-3D alignment over
per-view depth maps, focal lengths, per-edge rigid transforms and scales, and
the query pose. Confidences are recalibrated every iteration with the
Geman-McClure weight ``W = C / (1 + |e|/mu)^2``; the mean of the calibrated
map gives the reported pose covariance.

Internally the scene is expressed in the anchor reference's frame and divided
by the median initial depth, so ``mu`` is in normalized-scene units.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import se3
from .errors import DisconnectedGraph, NonFiniteObjective, NoSharedVisibility
from .se3 import Pose

_EPS = 1e-9


@dataclass(frozen=True)
class IrlsConfig:
    mu: float = 0.5
    iterations: int = 300
    step_size: float = 1.0
    convergence_tol: float = 1e-6
    min_mean_confidence_accept: float = 3.0
    overlap_threshold: float = 0.3
    solver: str = "gn"

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.solver not in ("gn", "gd"):
            raise ValueError("solver must be 'gn' or 'gd'")


@dataclass
class AlignmentProblem:
    """Views, directed pairwise predictions and the fixed reference poses.

    ``predictions[(i, j)]`` holds both grids in frame ``i``; ``edges`` are the
    directed pairs kept for the alignment.
    """

    views: list
    query: object
    predictions: dict
    edges: list
    fixed_poses: dict
    intrinsics: dict

    def __post_init__(self):
        free = [v for v in self.views if v not in self.fixed_poses]
        if free != [self.query]:
            raise ValueError("exactly one non-fixed view (the query) is required")
        parent = {v: v for v in self.views}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for i, j in self.edges:
            parent[find(i)] = find(j)
        roots = {find(v) for v in self.views}
        if len(roots) != 1:
            raise DisconnectedGraph("pairwise graph does not connect all views")

    @property
    def refs(self):
        return [v for v in self.views if v != self.query]


@dataclass
class AlignmentState:
    query_pose: Pose
    pairwise_poses: dict
    scales: dict
    depths: dict
    focals: dict
    weights: dict = field(default_factory=dict)
    residual_norms: dict = field(default_factory=dict)


@dataclass
class MetricEstimate:
    relative: Pose
    covariance: np.ndarray
    mean_ccm: float
    converged: bool
    anchor: object = None
    query_pose: Pose | None = None
    history: list = field(default_factory=list)


def geman_mcclure_weight(confidence, residual_norm, mu):
    """Calibrated confidence ``C / (1 + |e|/mu)^2``; ``mu = inf`` keeps ``C``."""
    c = np.asarray(confidence, dtype=float)
    if np.isinf(mu):
        return c.copy()
    return c / (1.0 + np.asarray(residual_norm, dtype=float) / mu) ** 2


# -- construction -----------------------------------------------------------------

def build_problem(query_node, ref_nodes, provider, ref_poses, overlap_threshold=0.3) -> AlignmentProblem:
    """Query every ordered pair through ``provider.pairwise`` and keep pairs
    whose mean cross-view confidence reaches ``overlap_threshold``."""
    refs = list(ref_nodes)
    if not refs:
        raise ValueError("at least one reference node is required")
    views = refs + [query_node]
    preds, edges, intr = {}, [], {}
    for i in views:
        for j in views:
            if i == j:
                continue
            try:
                p = provider.pairwise(i, j)
            except NoSharedVisibility:
                continue
            preds[(i, j)] = p
            intr.setdefault(i, p.intrinsics)
            intr.setdefault(j, p.intrinsics)
            if p.mean_confidence >= overlap_threshold:
                edges.append((i, j))
    if not any(query_node in e for e in edges):
        raise DisconnectedGraph(f"query {query_node} shares no confident pair with any reference")
    fixed = {r: ref_poses[r] for r in refs}
    return AlignmentProblem(views, query_node, preds, edges, fixed, intr)


def max_spanning_tree(views, edges, weight):
    """Kruskal on undirected pairs; returns directed edges of the tree.

    Each undirected pair is represented by its higher-weight direction; ties
    resolve by edge order.
    """
    best = {}
    for e in edges:
        key = frozenset(e)
        if key not in best or weight(e) > weight(best[key]):
            best[key] = e
    cands = sorted(best.values(), key=lambda e: -weight(e))
    parent = {v: v for v in views}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    tree = []
    for i, j in cands:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            tree.append((i, j))
    return tree


def init_from_spanning_tree(problem: AlignmentProblem) -> AlignmentState:
    """Propagate pairwise relative poses along the max-confidence tree from
    the fixed references, then seed depths, focals, edge poses and scales."""
    P = problem.predictions
    tree = max_spanning_tree(problem.views, problem.edges, lambda e: P[e].mean_confidence)
    poses = dict(problem.fixed_poses)
    adj = {v: [] for v in problem.views}
    for i, j in tree:
        adj[i].append((j, P[(i, j)].predicted_relative))
        adj[j].append((i, P[(i, j)].predicted_relative.inverse()))
    frontier = [v for v in problem.views if v in poses]
    while frontier:
        nxt = []
        for v in frontier:
            for w, rel in adj[v]:
                if w not in poses:
                    poses[w] = poses[v] @ rel
                    nxt.append(w)
        frontier = nxt

    depths, focals = {}, {}
    for v in problem.views:
        own = [e for e in problem.edges if e[0] == v]
        if own:
            e = max(own, key=lambda e: P[e].mean_confidence)
            z = P[e].pointmap_a_in_a[..., 2]
            focals[v] = float(P[e].predicted_focal)
        else:
            e = max((e for e in problem.edges if e[1] == v), key=lambda e: P[e].mean_confidence)
            X = P[e].pointmap_b_in_a
            local = se3.relative(poses[v], poses[e[0]]).apply(X.reshape(-1, 3)).reshape(X.shape)
            z = local[..., 2]
            focals[v] = float(problem.intrinsics[v].focal)
        med = float(np.median(np.abs(z)))
        depths[v] = np.maximum(z, 1e-3 * max(med, 1e-6)).astype(float)
    pairwise = {e: poses[e[0]] for e in problem.edges}
    scales = {e: 1.0 for e in problem.edges}
    return AlignmentState(poses[problem.query], pairwise, scales, depths, focals)


# -- internal normalized representation -----------------------------------------------

def _scale_basis(n_edges, mode):
    """Map from scale parameters to per-edge log-scales.

    ``free``: one log-scale per edge. ``product``: log-scales confined to the
    sum-zero subspace (product of scales fixed), which rules out the trivial
    solution where every scale and depth shrinks toward zero.
    """
    if mode == "free":
        return np.eye(n_edges)
    if n_edges < 2:
        return np.zeros((n_edges, 0))
    q, _ = np.linalg.qr(np.column_stack([np.ones(n_edges), np.eye(n_edges)[:, : n_edges - 1]]))
    return q[:, 1:n_edges]


class _Packed:
    """Flat parameter layout: query twist, edge twists, scale parameters,
    log-focals, then per-view log-depth grids."""

    def __init__(self, problem: AlignmentProblem, state: AlignmentState, anchor, scale_mode="product"):
        self.problem = problem
        self.views = list(problem.views)
        self.vidx = {v: k for k, v in enumerate(self.views)}
        self.edges = list(problem.edges)
        self.q = self.vidx[problem.query]
        self.anchor_pose = problem.fixed_poses[anchor]
        depth_all = np.concatenate([state.depths[v].ravel() for v in self.views])
        self.scale = float(np.median(depth_all))
        inv = self.anchor_pose.inverse()
        s = self.scale

        def norm_pose(p):
            p = inv @ p
            return p.R, p.t / s

        V = len(self.views)
        self.shape = state.depths[self.views[0]].shape
        self.HW = int(np.prod(self.shape))
        self.Rv = np.zeros((V, 3, 3))
        self.tv = np.zeros((V, 3))
        for v in self.views:
            pose = problem.fixed_poses.get(v, state.query_pose)
            self.Rv[self.vidx[v]], self.tv[self.vidx[v]] = norm_pose(pose)
        E = len(self.edges)
        self.Re = np.zeros((E, 3, 3))
        self.te = np.zeros((E, 3))
        self.log_sigma = np.zeros(E)
        for k, e in enumerate(self.edges):
            self.Re[k], self.te[k] = norm_pose(state.pairwise_poses[e])
            self.log_sigma[k] = np.log(state.scales[e])
        self.log_f = np.array([np.log(state.focals[v]) for v in self.views])
        self.log_d = np.stack([np.log(state.depths[v].ravel() / s) for v in self.views])
        self.B = _scale_basis(E, scale_mode)
        self.nS = self.B.shape[1]

        u, vv = problem.intrinsics[self.views[0]].pixel_grid()
        self.uc = {}
        for v in self.views:
            intr = problem.intrinsics[v]
            self.uc[v] = ((u - intr.cx).ravel(), (vv - intr.cy).ravel())

        # residual blocks: (edge index, view index, points, confidence)
        self.blocks = []
        for k, (i, j) in enumerate(self.edges):
            p = problem.predictions[(i, j)]
            self.blocks.append((k, self.vidx[i], p.pointmap_a_in_a.reshape(-1, 3) / s, p.confidence_a.ravel()))
            self.blocks.append((k, self.vidx[j], p.pointmap_b_in_a.reshape(-1, 3) / s, p.confidence_b.ravel()))

        self.n_global = 6 + 6 * E + self.nS + V
        self.n_params = self.n_global + V * self.HW

    # parameter column helpers
    def edge_cols(self, k):
        return 6 + 6 * k

    def scale_cols(self):
        return np.arange(6 + 6 * len(self.edges), 6 + 6 * len(self.edges) + self.nS)

    def focal_col(self, vi):
        return 6 + 6 * len(self.edges) + self.nS + vi

    def snapshot(self):
        return (self.Rv[self.q].copy(), self.tv[self.q].copy(), self.Re.copy(), self.te.copy(),
                self.log_sigma.copy(), self.log_f.copy(), self.log_d.copy())

    def restore(self, snap):
        self.Rv[self.q], self.tv[self.q], self.Re, self.te, self.log_sigma, self.log_f, self.log_d = \
            (x.copy() for x in snap)

    def points(self, vi):
        v = self.views[vi]
        f = np.exp(self.log_f[vi])
        a, b = self.uc[v]
        ray = np.stack([a / f, b / f, np.ones_like(a)], axis=-1)
        D = np.exp(self.log_d[vi])
        return ray * D[:, None], D, a / f, b / f

    def residuals(self):
        out = []
        for k, vi, X, C in self.blocks:
            P = self.points(vi)[0]
            y = P @ self.Rv[vi].T + self.tv[vi]
            z = (np.exp(self.log_sigma[k]) * X) @ self.Re[k].T + self.te[k]
            out.append(y - z)
        return out

    def retract(self, delta):
        d = np.asarray(delta, dtype=float)
        R, t = self.Rv[self.q], self.tv[self.q]
        dq, dt = se3.se3_exp(d[:6])
        self.Rv[self.q], self.tv[self.q] = R @ se3.quat_to_matrix(dq), t + R @ dt
        for k in range(len(self.edges)):
            c = self.edge_cols(k)
            dq, dt = se3.se3_exp(d[c:c + 6])
            self.te[k] = self.te[k] + self.Re[k] @ dt
            self.Re[k] = self.Re[k] @ se3.quat_to_matrix(dq)
        self.log_sigma = self.log_sigma + self.B @ d[self.scale_cols()]
        V = len(self.views)
        self.log_f += d[self.n_global - V:self.n_global]
        self.log_d += d[self.n_global:].reshape(V, self.HW)

    def block_jacobians(self, blk):
        """Columns and Jacobian (n, 3, k) of global params, plus depth column (n, 3)."""
        k, vi, X, _ = blk
        P, D, a, b = self.points(vi)
        R = self.Rv[vi]
        sig = np.exp(self.log_sigma[k])
        sX = sig * X
        Re = self.Re[k]
        n = len(P)
        cols, parts = [], []
        if vi == self.q:
            Jw = -np.einsum("ij,njk->nik", R, se3.skew(P))
            Jt = np.broadcast_to(R, (n, 3, 3))
            cols += list(range(6))
            parts += [Jw, Jt]
        c = self.edge_cols(k)
        cols += list(range(c, c + 6))
        parts += [np.einsum("ij,njk->nik", Re, se3.skew(sX)), -np.broadcast_to(Re, (n, 3, 3))]
        if self.nS:
            cols += list(self.scale_cols())
            parts.append((-(sX @ Re.T))[:, :, None] * self.B[k][None, None, :])
        dP_df = np.stack([-a * D, -b * D, np.zeros_like(D)], axis=-1)
        cols.append(self.focal_col(vi))
        parts.append((dP_df @ R.T)[:, :, None])
        Jg = np.concatenate(parts, axis=2)
        Jd = P @ R.T
        return np.array(cols), Jg, Jd


# -- objective, gradient ----------------------------------------------------------------

def _weights(packed: _Packed, res, mu):
    norms = [np.linalg.norm(r, axis=1) for r in res]
    W = [geman_mcclure_weight(blk[3], nrm, mu) for blk, nrm in zip(packed.blocks, norms)]
    return W, norms


def _objective(res, W):
    return float(sum(np.sum(w * np.linalg.norm(r, axis=1)) for w, r in zip(W, res)))


def _gradient(packed: _Packed, res, W):
    g = np.zeros(packed.n_params)
    for blk, r, w in zip(packed.blocks, res, W):
        nrm = np.linalg.norm(r, axis=1)
        u = np.where(nrm[:, None] > _EPS, r / np.maximum(nrm, _EPS)[:, None], 0.0) * w[:, None]
        cols, Jg, Jd = packed.block_jacobians(blk)
        np.add.at(g, cols, np.einsum("nik,ni->k", Jg, u))
        vi = blk[1]
        off = packed.n_global + vi * packed.HW
        g[off:off + packed.HW] += np.einsum("ni,ni->n", Jd, u)
    return g


def objective_and_gradient(problem, state, anchor=None, weights=None, mu=np.inf):
    """Objective ``sum W |e|`` and its gradient in the solver's parameterization.

    The parameter vector is ``[query twist (right perturbation), per-edge
    twists, per-edge log scales, log focal per view, log depth per view and
    pixel]``,
    all in normalized scene units. ``weights=None`` uses calibrated weights
    from the current residuals, held fixed for differentiation.
    """
    anchor = anchor if anchor is not None else problem.refs[0]
    packed = _Packed(problem, state, anchor, scale_mode="free")
    res = packed.residuals()
    W = weights if weights is not None else _weights(packed, res, mu)[0]
    return _objective(res, W), _gradient(packed, res, W), packed


# -- solvers ------------------------------------------------------------------------------

def _gn_step(packed: _Packed, res, W, lam):
    """Damped Gauss-Newton step on the reweighted quadratic majorizer,
    eliminating the per-pixel depths with a Schur complement."""
    G, V, HW = packed.n_global, len(packed.views), packed.HW
    Hgg = np.zeros((G, G))
    bg = np.zeros(G)
    Hgd = np.zeros((G, V * HW))
    Hdd = np.zeros(V * HW)
    bd = np.zeros(V * HW)
    for blk, r, w in zip(packed.blocks, res, W):
        nrm = np.linalg.norm(r, axis=1)
        om = w / np.maximum(nrm, 1e-6)
        cols, Jg, Jd = packed.block_jacobians(blk)
        wJg = Jg * om[:, None, None]
        Hgg[np.ix_(cols, cols)] += np.einsum("nik,nil->kl", wJg, Jg)
        bg[cols] += np.einsum("nik,ni->k", wJg, r)
        off = blk[1] * HW
        Hgd[cols, off:off + HW] += np.einsum("nik,ni->kn", wJg, Jd)
        Hdd[off:off + HW] += om * np.einsum("ni,ni->n", Jd, Jd)
        bd[off:off + HW] += om * np.einsum("ni,ni->n", Jd, r)
    dg = np.diag(Hgg).copy()
    Hgg_d = Hgg + lam * np.diag(np.maximum(dg, 1e-12))
    Hdd_d = Hdd * (1 + lam) + 1e-12
    A = Hgd / Hdd_d
    S = Hgg_d - A @ Hgd.T
    rhs = -bg + A @ bd
    try:
        delta_g = np.linalg.solve(S, rhs)
    except np.linalg.LinAlgError:
        delta_g = np.linalg.lstsq(S, rhs, rcond=None)[0]
    delta_d = -(bd + Hgd.T @ delta_g) / Hdd_d
    return np.concatenate([delta_g, delta_d])


def _gd_step(packed, res, W, lam, step_size):
    """Diagonally preconditioned gradient step."""
    g = _gradient(packed, res, W)
    diag = np.zeros(packed.n_params)
    for blk, r, w in zip(packed.blocks, res, W):
        om = w / np.maximum(np.linalg.norm(r, axis=1), 1e-6)
        cols, Jg, Jd = packed.block_jacobians(blk)
        np.add.at(diag, cols, np.einsum("n,nik->k", om, Jg**2))
        off = packed.n_global + blk[1] * packed.HW
        diag[off:off + packed.HW] += om * np.einsum("ni,ni->n", Jd, Jd)
    return -step_size * g / ((1 + lam) * np.maximum(diag, 1e-12))


def _irls(pk: _Packed, mu, cfg: IrlsConfig):
    """Reweighted damped minimization at a fixed kernel width."""
    history = []
    converged = False
    lam = 1e-4 if cfg.solver == "gn" else 1.0
    prev_obj = None
    res = pk.residuals()
    for it in range(cfg.iterations):
        W, norms = _weights(pk, res, mu)
        obj = _objective(res, W)
        if not np.isfinite(obj):
            raise NonFiniteObjective("alignment objective is not finite")
        history.append((it, obj))
        if obj <= 1e-14 or (prev_obj is not None and abs(prev_obj - obj) < cfg.convergence_tol * max(prev_obj, 1e-300)):
            converged = True
            break
        prev_obj = obj
        snap = pk.snapshot()
        accepted = False
        saw_nonfinite = False
        for _ in range(12):
            delta = _gn_step(pk, res, W, lam) if cfg.solver == "gn" else _gd_step(pk, res, W, lam, cfg.step_size)
            if not np.all(np.isfinite(delta)):
                saw_nonfinite = True
                lam *= 10
                continue
            pk.retract(delta)
            new_res = pk.residuals()
            new_obj = _objective(new_res, W)
            if np.isfinite(new_obj) and new_obj <= obj:
                accepted = True
                res = new_res
                lam = max(lam / 10, 1e-12)
                break
            saw_nonfinite |= not np.isfinite(new_obj)
            pk.restore(snap)
            lam *= 10
        if not accepted:
            if saw_nonfinite:
                raise NonFiniteObjective("backtracking exhausted on non-finite objective")
            converged = True
            break

    return res, history, converged


def solve_alignment(problem: AlignmentProblem, state: AlignmentState, cfg: IrlsConfig | None = None,
                    anchor=None):
    """IRLS alignment; returns the refined state and the metric estimate."""
    cfg = cfg or IrlsConfig()
    anchor = anchor if anchor is not None else choose_anchor(problem)
    pk = _Packed(problem, state, anchor, "product")
    res, history, converged = _irls(pk, cfg.mu, cfg)

    W, norms = _weights(pk, res, cfg.mu)
    out = _unpack(pk, problem, state, W, norms)
    est = _estimate(problem, out, anchor, converged, history)
    return out, est


def _unpack(pk: _Packed, problem, state, W, norms):
    s = pk.scale

    def denorm(R, t):
        return pk.anchor_pose @ Pose.from_rt(R, t * s)

    qp = denorm(pk.Rv[pk.q], pk.tv[pk.q])
    pairwise = {e: denorm(pk.Re[k], pk.te[k]) for k, e in enumerate(pk.edges)}
    scales = {e: float(np.exp(pk.log_sigma[k])) for k, e in enumerate(pk.edges)}
    depths = {v: np.exp(pk.log_d[pk.vidx[v]]).reshape(pk.shape) * s for v in pk.views}
    focals = {v: float(np.exp(pk.log_f[pk.vidx[v]])) for v in pk.views}
    weights, rnorm = {}, {}
    for (k, vi, _, _), w, n in zip(pk.blocks, W, norms):
        key = (pk.edges[k], pk.views[vi])
        weights[key] = w.reshape(pk.shape)
        rnorm[key] = n.reshape(pk.shape)
    return AlignmentState(qp, pairwise, scales, depths, focals, weights, rnorm)


def choose_anchor(problem: AlignmentProblem):
    """Reference with the highest mean confidence toward the query."""
    q = problem.query
    best, best_c = None, -np.inf
    for r in problem.refs:
        cs = [problem.predictions[e].mean_confidence for e in ((r, q), (q, r)) if e in problem.edges]
        if cs and max(cs) > best_c:
            best, best_c = r, max(cs)
    return best if best is not None else problem.refs[0]


def mean_ccm(problem, state: AlignmentState, anchor) -> float:
    """Geometric mean of the mean calibrated confidence of the anchor and
    query grids of the anchor-query pair."""
    q = problem.query
    e = (anchor, q) if (anchor, q) in problem.edges else (q, anchor)
    if e not in problem.edges or not state.weights:
        return 0.0
    wa = float(np.mean(state.weights[(e, anchor)]))
    wq = float(np.mean(state.weights[(e, q)]))
    return float(np.sqrt(max(wa * wq, 0.0)))


def ccm_covariance(m: float):
    """``diag[(W_ii * W_ij)^-2]`` written in terms of the geometric mean."""
    m = max(float(m), 1e-6)
    return np.eye(6) * m**-4


def _estimate(problem, state, anchor, converged, history):
    m = mean_ccm(problem, state, anchor)
    rel = se3.relative(problem.fixed_poses[anchor], state.query_pose)
    return MetricEstimate(rel, ccm_covariance(m), m, converged, anchor, state.query_pose, history)


def accept_estimate(estimate: MetricEstimate, cfg: IrlsConfig | None = None) -> bool:
    cfg = cfg or IrlsConfig()
    return bool(estimate.converged and estimate.mean_ccm >= cfg.min_mean_confidence_accept)


def localize(query_node, ref_nodes, provider, ref_poses, cfg: IrlsConfig | None = None):
    """build_problem, init_from_spanning_tree and solve_alignment in one call."""
    cfg = cfg or IrlsConfig()
    prob = build_problem(query_node, ref_nodes, provider, ref_poses, cfg.overlap_threshold)
    state = init_from_spanning_tree(prob)
    return solve_alignment(prob, state, cfg)


def write_history_csv(path, estimate: MetricEstimate):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "mean_ccm"])
        for it, obj in estimate.history:
            w.writerow([it, repr(obj), repr(estimate.mean_ccm)])
