"""Goal grounding and shortest-path planning on the traversability layer."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InsufficientMatches, NoSharedVisibility, NoVerifiedAnchor
from .seqmatch import GvConfig, build_difference_matrix, gv_inlier_count, retrieval_topk
from .topomap import TopometricMap


@dataclass
class PlanResult:
    path: list = field(default_factory=list)
    cost: float = 0.0
    reachable: bool = False


def trav_adjacency(m: TopometricMap):
    adj = {n: [] for n in m.nodes}
    for (a, b), e in m.trav.items():
        adj[a].append((b, e.cost))
        adj[b].append((a, e.cost))
    return adj


def path_cost(m: TopometricMap, path) -> float:
    """Sum of trav costs along ``path``; KeyError if a hop has no trav edge."""
    total = 0.0
    for a, b in zip(path, path[1:]):
        total += m.trav[(a, b) if a < b else (b, a)].cost
    return total


def shortest_path(m: TopometricMap, start, goal) -> PlanResult:
    """Dijkstra over trav edges. Equal-cost routes resolve toward the
    predecessor with the smaller node id."""
    if start not in m.nodes or goal not in m.nodes:
        raise KeyError("start and goal must be map nodes")
    adj = trav_adjacency(m)
    dist = {start: 0.0}
    pred = {start: None}
    done = set()
    heap = [(0.0, start)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == goal:
            break
        for v, c in adj[u]:
            if v in done:
                continue
            nd = d + c
            old = dist.get(v)
            if old is None or nd < old or (nd == old and u < pred[v]):
                dist[v] = nd
                pred[v] = u
                heapq.heappush(heap, (nd, v))
    if goal not in done:
        return PlanResult([], float("inf"), False)
    path = [goal]
    while pred[path[-1]] is not None:
        path.append(pred[path[-1]])
    path.reverse()
    # re-sum along the path so the reported cost matches the edges exactly
    return PlanResult(path, path_cost(m, path), True)


def localize_goal(goal_descriptor, m: TopometricMap, gv_provider: Callable, k: int = 5,
                  cfg: GvConfig | None = None):
    """Retrieve the ``k`` nearest nodes by descriptor, then keep the one with
    the most epipolar inliers.

    ``gv_provider(node_id)`` returns ``(pixels_goal, pixels_node)``.
    """
    cfg = cfg or GvConfig()
    if not m.nodes:
        raise NoVerifiedAnchor("map is empty")
    ids = m.node_ids()
    diff = build_difference_matrix([m.nodes[i].descriptor for i in ids], [goal_descriptor], ref_ids=ids)
    cands = retrieval_topk(diff, 0, min(k, len(ids)))
    best, best_count = None, -1
    for nid in cands:
        try:
            xa, xb = gv_provider(nid)
        except (NoSharedVisibility, InsufficientMatches):
            continue
        count = gv_inlier_count(np.asarray(xa), np.asarray(xb), cfg, key=(nid, 0))
        if count >= cfg.min_inlier_count and count > best_count:
            best, best_count = nid, count
    if best is None:
        raise NoVerifiedAnchor(f"none of the top-{len(cands)} candidates passed verification")
    return best


def metric_consistency_check(m: TopometricMap, alt_paths):
    """Pick the candidate route with the lowest estimated cost.

    Returns ``(selected_path, estimated_costs)``. Comparing the choice with
    true route lengths exposes maps whose edge costs disagree with reality.
    """
    paths = [list(p) for p in alt_paths]
    if len(paths) < 2:
        raise ValueError("need at least two candidate paths")
    ends = {(p[0], p[-1]) for p in paths}
    if len(ends) != 1:
        raise ValueError("candidate paths must share endpoints")
    costs = [path_cost(m, p) for p in paths]
    return paths[int(np.argmin(costs))], costs
