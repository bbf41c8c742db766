"""Robust pose-graph optimization with Levenberg-Marquardt.

Residual of a relative factor with measurement Z between poses Ti and Tj::

    r = log(Z^-1 Ti^-1 Tj)

and of an absolute prior (``i is None``) ``r = log(Z^-1 Tj)``. Poses are
updated by right perturbation ``T <- T exp(dx)``. Factors are whitened by
the inverse Cholesky factor of their covariance and weighted by Huber.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import se3
from .errors import SingularSystem
from .se3 import Pose

ODOMETRY = "odometry"
LOOP_CLOSURE = "loop_closure"
PRIOR = "prior"


@dataclass(frozen=True, eq=False)
class Factor:
    i: int | None
    j: int
    measured: Pose
    covariance: np.ndarray
    kind: str = ODOMETRY

    def __post_init__(self):
        if self.kind not in (ODOMETRY, LOOP_CLOSURE, PRIOR):
            raise ValueError(f"unknown factor kind {self.kind!r}")
        if (self.i is None) != (self.kind == PRIOR):
            raise ValueError("prior factors (and only they) have no first endpoint")
        cov = se3.check_covariance(self.covariance).copy()
        cov.flags.writeable = False
        object.__setattr__(self, "covariance", cov)

    @property
    def sqrt_information(self):
        # S with S^T S = cov^-1
        L = np.linalg.cholesky(self.covariance)
        return np.linalg.inv(L)


@dataclass
class FactorGraph:
    variables: dict = field(default_factory=dict)
    factors: list = field(default_factory=list)
    gauge: set = field(default_factory=set)

    def add_factor(self, factor: Factor):
        for k in (factor.i, factor.j):
            if k is not None and k not in self.variables:
                raise KeyError(f"factor endpoint {k} is not a variable")
        self.factors.append(factor)


@dataclass(frozen=True)
class RobustKernelConfig:
    kernel: str = "huber"
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.kernel not in ("huber", "none"):
            raise ValueError(f"unsupported kernel {self.kernel!r}")
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")


@dataclass
class OptimizeResult:
    poses: dict
    final_chi2: float
    initial_chi2: float
    iterations: int
    converged: bool


def huber_weight(norm, delta):
    norm = np.asarray(norm, dtype=float)
    return np.where(norm <= delta, 1.0, delta / np.maximum(norm, 1e-300))


def huber_cost(sq, delta):
    """Robustified squared norm: s inside the quadratic zone, 2 delta sqrt(s) - delta^2 beyond."""
    sq = np.asarray(sq, dtype=float)
    n = np.sqrt(sq)
    return np.where(n <= delta, sq, 2.0 * delta * n - delta * delta)


def residual(factor: Factor, poses: Mapping[int, Pose]) -> np.ndarray:
    Tj = poses[factor.j]
    E = factor.measured.inverse() @ (Tj if factor.i is None else poses[factor.i].inverse() @ Tj)
    return se3.log_map(E)


def residual_jacobians(factor: Factor, poses: Mapping[int, Pose]):
    """(r, dr/d delta_i or None, dr/d delta_j) under right perturbations."""
    r = residual(factor, poses)
    Jinv = se3.se3_right_jacobian_inv(r)
    if factor.i is None:
        return r, None, Jinv
    Ti, Tj = poses[factor.i], poses[factor.j]
    Ji = -Jinv @ (Tj.inverse() @ Ti).adjoint()
    return r, Ji, Jinv


# -- batched evaluation ----------------------------------------------------------

class _Batch:
    """Factor arrays gathered once per optimize call; poses live in stacked arrays."""

    def __init__(self, graph: FactorGraph, index: dict):
        fs = graph.factors
        n = len(fs)
        self.ids = sorted(graph.variables)
        row = {v: k for k, v in enumerate(self.ids)}
        self.n = n
        self.has_i = np.array([f.i is not None for f in fs], dtype=bool)
        self.ri = np.array([row[f.i] if f.i is not None else -1 for f in fs], dtype=int)
        self.rj = np.array([row[f.j] for f in fs], dtype=int)
        zinv = [f.measured.inverse() for f in fs]
        self.zq = np.array([z.q for z in zinv]).reshape(n, 4)
        self.zt = np.array([z.t for z in zinv]).reshape(n, 3)
        S = np.array([f.sqrt_information for f in fs]).reshape(n, 6, 6)
        self.S = S
        self.info = np.einsum("nki,nkj->nij", S, S)
        # column index of each endpoint in the reduced system, -1 when fixed
        self.ci = np.array([index.get(f.i, -1) if f.i is not None else -1 for f in fs], dtype=int)
        self.cj = np.array([index.get(f.j, -1) for f in fs], dtype=int)
        self.free_rows = np.array([row[v] for v in sorted(index, key=index.get)], dtype=int)

    def stack(self, poses):
        Q = np.array([poses[v].q for v in self.ids]).reshape(-1, 4)
        T = np.array([poses[v].t for v in self.ids]).reshape(-1, 3)
        return Q, T

    def unstack(self, Q, T, template):
        out = dict(template)
        for k in self.free_rows:
            v = self.ids[k]
            out[v] = Pose(Q[k], T[k])
        return out

    def residuals(self, Q, T):
        qi = np.where(self.has_i[:, None], Q[self.ri], np.array([1.0, 0.0, 0.0, 0.0]))
        ti = np.where(self.has_i[:, None], T[self.ri], 0.0)
        qj, tj = Q[self.rj], T[self.rj]
        # D = Ti^-1 Tj
        qic = se3.quat_conjugate(qi)
        qd = se3.quat_multiply(qic, qj)
        td = se3.quat_rotate(qic, tj - ti)
        # E = Z^-1 D
        qe = se3.quat_multiply(self.zq, qd)
        te = self.zt + se3.quat_rotate(self.zq, td)
        return se3.se3_log(qe, te), (qd, td)

    def evaluate(self, Q, T, kernel):
        r, D = self.residuals(Q, T)
        e = np.einsum("nij,nj->ni", self.S, r)
        sq = np.einsum("ni,ni->n", e, e)
        return r, D, sq, _robust(sq, kernel)

    def retract(self, Q, T, dx):
        steps = dx.reshape(-1, 6)
        dq, dt = se3.se3_exp(steps)
        rows = self.free_rows
        Q2, T2 = Q.copy(), T.copy()
        Q2[rows] = se3.quat_normalize(se3.quat_multiply(Q[rows], dq))
        T2[rows] = T[rows] + se3.quat_rotate(Q[rows], dt)
        return Q2, T2


def _robust(sq, kernel):
    if kernel.kernel == "none":
        return sq
    return huber_cost(sq, kernel.huber_delta)


def _weights(sq, kernel):
    if kernel.kernel == "none":
        return np.ones_like(sq)
    return huber_weight(np.sqrt(sq), kernel.huber_delta)


def check_gauge(graph: FactorGraph):
    """Every connected component needs a fixed node or a prior factor."""
    parent = {v: v for v in graph.variables}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    anchored = set()
    for f in graph.factors:
        if f.i is None:
            anchored.add(f.j)
        else:
            ra, rb = find(f.i), find(f.j)
            if ra != rb:
                parent[ra] = rb
    roots = {find(v) for v in graph.variables}
    ok = {find(v) for v in anchored | (set(graph.gauge) & set(graph.variables))}
    missing = roots - ok
    if missing:
        raise SingularSystem(f"{len(missing)} connected component(s) without a gauge anchor or prior")


def optimize(graph: FactorGraph, kernel: RobustKernelConfig | None = None, max_iters=100, tol=1e-10,
             initial_lambda=1e-4) -> OptimizeResult:
    kernel = kernel or RobustKernelConfig()
    check_gauge(graph)
    free = [v for v in sorted(graph.variables) if v not in graph.gauge]
    index = {v: k for k, v in enumerate(free)}
    if not graph.factors:
        return OptimizeResult(dict(graph.variables), 0.0, 0.0, 0, True)
    batch = _Batch(graph, index)
    Q, T = batch.stack(graph.variables)
    r, D, sq, rho = batch.evaluate(Q, T, kernel)
    chi2 = chi2_0 = float(rho.sum())
    if not free:
        return OptimizeResult(dict(graph.variables), chi2, chi2, 0, True)

    nvar = 6 * len(free)
    lam = initial_lambda
    converged = chi2 < 1e-30
    it = 0
    while it < max_iters and not converged:
        it += 1
        H, g = _normal_equations(batch, r, D, sq, kernel, nvar)
        diag = H.diagonal()
        if np.any(diag <= 0):
            raise SingularSystem("variable without any information in the normal equations")
        while True:
            A = (H + sp.diags(lam * diag)).tocsc()
            try:
                dx = -splu(A).solve(g)
            except RuntimeError as exc:
                raise SingularSystem(str(exc)) from exc
            if not np.all(np.isfinite(dx)):
                raise SingularSystem("non-finite LM step")
            Qt, Tt = batch.retract(Q, T, dx)
            r_t, D_t, sq_t, rho_t = batch.evaluate(Qt, Tt, kernel)
            chi2_t = float(rho_t.sum())
            if np.isfinite(chi2_t) and chi2_t <= chi2:
                rel = (chi2 - chi2_t) / max(chi2, 1e-300)
                Q, T, r, D, sq, chi2 = Qt, Tt, r_t, D_t, sq_t, chi2_t
                lam = max(lam / 10.0, 1e-12)
                if rel < tol or chi2 < 1e-30 or np.max(np.abs(dx)) < 1e-14:
                    converged = True
                break
            lam *= 10.0
            if lam > 1e12:
                # no descent direction left even for tiny steps: stationary point
                return OptimizeResult(batch.unstack(Q, T, graph.variables), chi2, chi2_0, it, True)
    return OptimizeResult(batch.unstack(Q, T, graph.variables), chi2, chi2_0, it, converged)


def _normal_equations(batch: _Batch, r, D, sq, kernel, nvar):
    qd, td = D
    Jinv = se3.se3_right_jacobian_inv(r)
    # Ad((Ti^-1 Tj)^-1)
    qdc = se3.quat_conjugate(qd)
    Ad_inv = se3.adjoint_matrix(se3.quat_to_matrix(qdc), -se3.quat_rotate(qdc, td))
    Ji = -Jinv @ Ad_inv
    Jj = Jinv
    w = _weights(sq, kernel)
    W = batch.info * w[:, None, None]
    WJi = W @ Ji
    WJj = W @ Jj
    g_i = np.einsum("nki,nk->ni", WJi, r)
    g_j = np.einsum("nki,nk->ni", WJj, r)
    Hii = np.einsum("nki,nkj->nij", Ji, WJi)
    Hjj = np.einsum("nki,nkj->nij", Jj, WJj)
    Hij = np.einsum("nki,nkj->nij", Ji, WJj)

    rows, cols, vals = [], [], []
    g = np.zeros(nvar)
    blk_r, blk_c = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")
    ci, cj = batch.ci, batch.cj
    ai = (ci >= 0) & batch.has_i
    aj = cj >= 0

    def add(mask, ra, ca, blocks):
        if not np.any(mask):
            return
        rows.append(((6 * ra[mask])[:, None, None] + blk_r).ravel())
        cols.append(((6 * ca[mask])[:, None, None] + blk_c).ravel())
        vals.append(blocks[mask].ravel())

    add(ai, ci, ci, Hii)
    add(aj, cj, cj, Hjj)
    both = ai & aj
    add(both, ci, cj, Hij)
    add(both, cj, ci, np.transpose(Hij, (0, 2, 1)))
    np.add.at(g, (6 * ci[ai])[:, None] + np.arange(6), g_i[ai])
    np.add.at(g, (6 * cj[aj])[:, None] + np.arange(6), g_j[aj])
    H = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nvar, nvar)
    ).tocsr()
    return H, g


def total_chi2(graph: FactorGraph, poses=None, kernel: RobustKernelConfig | None = None) -> float:
    kernel = kernel or RobustKernelConfig()
    if not graph.factors:
        return 0.0
    batch = _Batch(graph, {})
    Q, T = batch.stack(poses or graph.variables)
    return float(batch.evaluate(Q, T, kernel)[3].sum())


def fuse_poses(odometry_chain: Iterable[Factor], vloc_priors, kernel: RobustKernelConfig | None = None,
               max_iters=100):
    """Fuse a relative odometry chain with absolute localization priors.

    ``vloc_priors`` is a list of ``(node_id, Pose, Covariance6)``. The chain is
    integrated from its first node and rigidly moved onto the first prior to
    initialize, then optimized with the priors as the only anchors.
    """
    chain = list(odometry_chain)
    priors = list(vloc_priors)
    if not priors:
        raise ValueError("pose fusion needs at least one prior")
    poses = integrate_chain(chain)
    if not poses:
        poses = {priors[0][0]: priors[0][1]}
    k0, p0, _ = priors[0]
    G = p0 @ poses[k0].inverse()
    graph = FactorGraph({k: G @ v for k, v in poses.items()})
    for f in chain:
        graph.add_factor(f)
    for nid, pose, cov in priors:
        graph.add_factor(Factor(None, nid, pose, cov, PRIOR))
    return optimize(graph, kernel, max_iters=max_iters).poses


def integrate_chain(chain: Iterable[Factor], start: Pose | None = None):
    """Compose relative factors breadth-first from the lowest-id node."""
    chain = [f for f in chain if f.i is not None]
    if not chain:
        return {}
    adj = {}
    for f in chain:
        adj.setdefault(f.i, []).append((f.j, f.measured))
        adj.setdefault(f.j, []).append((f.i, f.measured.inverse()))
    root = min(adj)
    poses = {root: start or Pose.identity()}
    stack = [root]
    while stack:
        a = stack.pop()
        for b, rel in sorted(adj[a], key=lambda x: x[0]):
            if b not in poses:
                poses[b] = poses[a] @ rel
                stack.append(b)
    return poses


# -- g2o-style IO -------------------------------------------------------------------

def _cov_upper(cov):
    return [repr(float(v)) for v in np.asarray(cov)[np.triu_indices(6)]]


def export_graph(graph: FactorGraph) -> str:
    lines = []
    for v in sorted(graph.variables):
        lines.append("VERTEX " + " ".join([str(v)] + [repr(x) for x in graph.variables[v].to_tuple()]))
    for v in sorted(graph.gauge):
        lines.append(f"FIX {v}")
    for f in graph.factors:
        a = "-" if f.i is None else str(f.i)
        lines.append(" ".join(["FACTOR", f.kind, a, str(f.j)]
                              + [repr(x) for x in f.measured.to_tuple()] + _cov_upper(f.covariance)))
    return "\n".join(lines) + "\n"


def import_graph(text: str) -> FactorGraph:
    g = FactorGraph()
    pending = []
    for ln, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "VERTEX":
                g.variables[int(parts[1])] = Pose.from_tuple(parts[2:9])
            elif parts[0] == "FIX":
                g.gauge.add(int(parts[1]))
            elif parts[0] == "FACTOR":
                if len(parts) != 4 + 7 + 21:
                    raise ValueError("FACTOR needs kind, two ids, 7 pose and 21 covariance values")
                cov = np.zeros((6, 6))
                cov[np.triu_indices(6)] = [float(v) for v in parts[11:32]]
                cov = cov + np.triu(cov, 1).T
                i = None if parts[2] == "-" else int(parts[2])
                pending.append(Factor(i, int(parts[3]), Pose.from_tuple(parts[4:11]), cov, parts[1]))
            else:
                raise ValueError(f"unknown record {parts[0]!r}")
        except (ValueError, IndexError) as exc:
            raise ValueError(f"line {ln}: {exc}") from exc
    for f in pending:
        g.add_factor(f)
    return g
