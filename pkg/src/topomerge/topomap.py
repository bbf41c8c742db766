"""Three-layer topometric map: covisibility, odometry-factor and traversability.

All layers share one node set. Edge sets are independent: a covisibility
edge says nothing about traversability and vice versa.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import se3
from .errors import CorruptRecord, EmptyInput, MapIOError, SchemaVersionMismatch
from .se3 import Pose

SCHEMA_VERSION = "v1"
DEFAULT_DESCRIPTOR_DIM = 256
SESSION_SHIFT = 32
LOCAL_MASK = (1 << SESSION_SHIFT) - 1

ODOMETRY = "odometry"
LOOP_CLOSURE = "loop_closure"


def make_node_id(session_id: int, local_index: int) -> int:
    return (int(session_id) << SESSION_SHIFT) | int(local_index)


def split_node_id(node_id: int):
    return node_id >> SESSION_SHIFT, node_id & LOCAL_MASK


def payload_hash(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()[:32]


@dataclass(frozen=True, eq=False)
class MapNode:
    node_id: int
    descriptor: np.ndarray
    timestamp: float
    pose_world: Pose
    quality: float
    payload_ref: str | None
    session_id: int

    def __post_init__(self):
        d = np.array(self.descriptor, dtype=float).reshape(-1)
        d.flags.writeable = False
        object.__setattr__(self, "descriptor", d)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError(f"node {self.node_id}: descriptor is not unit norm")
        if not 0.0 <= self.quality <= 100.0:
            raise ValueError(f"node {self.node_id}: quality {self.quality} outside [0, 100]")


@dataclass(frozen=True, eq=False)
class CovisEdge:
    a: int
    b: int
    strength: float

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("covisibility edge cannot be a self-loop")
        if self.strength < 0:
            raise ValueError("covisibility strength must be non-negative")


@dataclass(frozen=True, eq=False)
class OdomFactorEdge:
    """Relative-pose factor: ``relative`` is the pose of ``b`` in ``a``'s frame."""

    a: int
    b: int
    relative: Pose
    covariance: np.ndarray
    kind: str = ODOMETRY

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("odometry edge cannot be a self-loop")
        if self.kind not in (ODOMETRY, LOOP_CLOSURE):
            raise ValueError(f"unknown factor kind {self.kind!r}")
        cov = se3.check_covariance(self.covariance).copy()
        cov.flags.writeable = False
        object.__setattr__(self, "covariance", cov)

    def reversed(self) -> "OdomFactorEdge":
        # Right perturbation on T_ab maps to Ad(T_ab) on its inverse.
        Ad = self.relative.adjoint()
        cov = Ad @ self.covariance @ Ad.T
        return OdomFactorEdge(self.b, self.a, self.relative.inverse(), 0.5 * (cov + cov.T), self.kind)


@dataclass(frozen=True, eq=False)
class TravEdge:
    a: int
    b: int
    cost: float

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("traversability edge cannot be a self-loop")
        if not self.cost > 0:
            raise ValueError("traversability cost must be positive")


@dataclass(frozen=True)
class KeyframePolicy:
    translation_threshold: float = 3.9
    rotation_threshold: float = 60.0

    def __post_init__(self):
        if self.translation_threshold <= 0 or self.rotation_threshold <= 0:
            raise ValueError("keyframe thresholds must be positive")


@dataclass
class Frame:
    """One odometry-stamped capture fed to ``build_submap``.

    ``step_covariance`` is the covariance of the relative motion from the
    previous frame to this one; frames without it fall back to a
    length-proportional default model.
    """

    timestamp: float
    local_pose: Pose
    descriptor: np.ndarray
    quality: float
    payload: bytes | None = None
    step_covariance: np.ndarray | None = None


def _key(a: int, b: int):
    return (a, b) if a < b else (b, a)


@dataclass
class TopometricMap:
    nodes: dict = field(default_factory=dict)
    covis: dict = field(default_factory=dict)
    odom: dict = field(default_factory=dict)
    trav: dict = field(default_factory=dict)
    blobs: dict = field(default_factory=dict)
    descriptor_dim: int = DEFAULT_DESCRIPTOR_DIM

    # -- construction ---------------------------------------------------
    def add_node(self, node: MapNode, payload: bytes | None = None):
        if node.descriptor.shape[0] != self.descriptor_dim:
            raise ValueError(
                f"descriptor dim {node.descriptor.shape[0]} != map dim {self.descriptor_dim}"
            )
        if payload is not None:
            h = payload_hash(payload)
            self.blobs[h] = bytes(payload)
            node = replace(node, payload_ref=h)
        self.nodes[node.node_id] = node
        return node

    def _check_endpoints(self, a, b):
        if a not in self.nodes or b not in self.nodes:
            raise KeyError(f"edge ({a}, {b}) references a missing node")

    def add_covis(self, a, b, strength):
        self._check_endpoints(a, b)
        key = _key(a, b)
        old = self.covis.get(key)
        # one undirected strength per pair: keep the larger direction
        if old is not None:
            strength = max(strength, old.strength)
        self.covis[key] = CovisEdge(key[0], key[1], float(strength))

    def add_trav(self, a, b, cost):
        self._check_endpoints(a, b)
        key = _key(a, b)
        self.trav[key] = TravEdge(key[0], key[1], float(cost))

    def add_odom(self, edge: OdomFactorEdge):
        self._check_endpoints(edge.a, edge.b)
        if edge.a > edge.b:
            edge = edge.reversed()
        self.odom[(edge.a, edge.b)] = edge
        return edge

    def copy(self) -> "TopometricMap":
        return TopometricMap(
            dict(self.nodes), dict(self.covis), dict(self.odom), dict(self.trav),
            dict(self.blobs), self.descriptor_dim,
        )

    # -- queries ----------------------------------------------------------
    def __len__(self):
        return len(self.nodes)

    def node_ids(self):
        return sorted(self.nodes)

    def sessions(self):
        return sorted({n.session_id for n in self.nodes.values()})

    def session_nodes(self, session_id):
        ids = [n.node_id for n in self.nodes.values() if n.session_id == session_id]
        return sorted(ids, key=lambda i: (self.nodes[i].timestamp, i))

    def neighbors(self, layer: str, node_id: int):
        edges = self.layer(layer)
        out = []
        for a, b in edges:
            if a == node_id:
                out.append(b)
            elif b == node_id:
                out.append(a)
        return sorted(set(out))

    def layer(self, name: str) -> dict:
        return {"covis": self.covis, "odom": self.odom, "trav": self.trav}[name]

    def remove_node(self, node_id):
        self.nodes.pop(node_id)
        for edges in (self.covis, self.odom, self.trav):
            for key in [k for k in edges if node_id in k]:
                del edges[key]

    def set_pose(self, node_id, pose: Pose):
        self.nodes[node_id] = replace(self.nodes[node_id], pose_world=pose)

    def components(self):
        """Map node id -> component label (smallest node id of its component).

        Connectivity is taken from the odometry-factor layer, which carries
        both intra-session odometry and inter-session loop closures.
        """
        parent = {i: i for i in self.nodes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for a, b in self.odom:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        return {i: find(i) for i in self.nodes}

    def component_count(self):
        return len(set(self.components().values()))

    def main_component(self):
        comps = self.components()
        if not comps:
            return None
        sizes = {}
        for c in comps.values():
            sizes[c] = sizes.get(c, 0) + 1
        return min(sizes, key=lambda c: (-sizes[c], c))

    def positions(self, ids=None):
        ids = self.node_ids() if ids is None else ids
        return np.array([self.nodes[i].pose_world.t for i in ids]).reshape(-1, 3)


# -- submap construction -----------------------------------------------------

def _default_step_covariance(length, rot_sigma=1e-3, trans_sigma=1e-2, floor=1e-10):
    L = max(float(length), 0.0)
    return np.diag([rot_sigma**2 * L + floor] * 3 + [trans_sigma**2 * L + floor] * 3)


def build_submap(
    frames: Sequence[Frame],
    policy: KeyframePolicy | None = None,
    session_id: int = 0,
    descriptor_dim: int | None = None,
    covis_strength: Callable[[int, int], float] | None = None,
) -> TopometricMap:
    """Select keyframes and link consecutive ones in all three layers.

    A frame becomes a keyframe when its motion from the previous keyframe
    exceeds the translation OR the rotation threshold; the first frame is
    always kept. Node ids are ``session_id << 32 | frame_index``.
    """
    policy = policy or KeyframePolicy()
    if len(frames) == 0:
        raise EmptyInput("build_submap needs at least one frame")
    dim = descriptor_dim or len(np.asarray(frames[0].descriptor).reshape(-1))
    m = TopometricMap(descriptor_dim=dim)

    def add(idx):
        f = frames[idx]
        node = MapNode(
            node_id=make_node_id(session_id, idx),
            descriptor=np.asarray(f.descriptor, dtype=float),
            timestamp=float(f.timestamp),
            pose_world=f.local_pose,
            quality=float(f.quality),
            payload_ref=None,
            session_id=session_id,
        )
        return m.add_node(node, f.payload)

    prev = add(0)
    prev_idx = 0
    acc_cov = np.zeros((6, 6))
    acc_rel = Pose.identity()
    for idx in range(1, len(frames)):
        f = frames[idx]
        step = se3.relative(frames[idx - 1].local_pose, f.local_pose)
        step_cov = f.step_covariance
        if step_cov is None:
            step_cov = _default_step_covariance(np.linalg.norm(step.t))
        acc_cov = se3.compose_covariance(acc_cov, step_cov, step)
        acc_rel = acc_rel @ step

        rel = se3.relative(prev.pose_world, f.local_pose)
        dist = float(np.linalg.norm(rel.t))
        angle = float(np.degrees(rel.angle()))
        if dist <= policy.translation_threshold and angle <= policy.rotation_threshold:
            continue
        node = add(idx)
        m.add_odom(OdomFactorEdge(prev.node_id, node.node_id, rel, acc_cov, ODOMETRY))
        strength = 1.0 if covis_strength is None else float(covis_strength(prev.node_id, node.node_id))
        m.add_covis(prev.node_id, node.node_id, strength)
        m.add_trav(prev.node_id, node.node_id, max(dist, 1e-6))
        prev, prev_idx = node, idx
        acc_cov = np.zeros((6, 6))
        acc_rel = Pose.identity()
    return m


def theoretical_map_size(map_or_count, width=512, height=288, compression_ratio=1.0) -> float:
    """Storage in bytes of N compressed RGB snapshots: N * 3 * W * H * C."""
    if not 0 < compression_ratio <= 1:
        raise ValueError("compression_ratio must be in (0, 1]")
    n = map_or_count if isinstance(map_or_count, (int, np.integer)) else len(map_or_count)
    return float(n) * 3.0 * width * height * compression_ratio


# -- serialization -------------------------------------------------------------

def _f(x) -> str:
    return repr(float(x))


def _cov_upper(cov):
    iu = np.triu_indices(6)
    return [_f(v) for v in np.asarray(cov)[iu]]


def _cov_from_upper(values):
    cov = np.zeros((6, 6))
    iu = np.triu_indices(6)
    cov[iu] = values
    return cov + np.triu(cov, 1).T


def serialize_map(m: TopometricMap) -> str:
    lines = [f"TOPOMAP {SCHEMA_VERSION} dim={m.descriptor_dim}"]
    for nid in sorted(m.nodes):
        n = m.nodes[nid]
        fields = ["NODE", str(n.node_id), str(n.session_id), _f(n.timestamp)]
        fields += [_f(v) for v in n.pose_world.to_tuple()]
        fields.append(_f(n.quality))
        fields += [_f(v) for v in n.descriptor]
        fields.append(n.payload_ref or "-")
        lines.append(" ".join(fields))
    for key in sorted(m.covis):
        e = m.covis[key]
        lines.append(f"EDGE covis {e.a} {e.b} {_f(e.strength)}")
    for key in sorted(m.odom):
        e = m.odom[key]
        fields = ["EDGE", "odom", str(e.a), str(e.b), e.kind]
        fields += [_f(v) for v in e.relative.to_tuple()]
        fields += _cov_upper(e.covariance)
        lines.append(" ".join(fields))
    for key in sorted(m.trav):
        e = m.trav[key]
        lines.append(f"EDGE trav {e.a} {e.b} {_f(e.cost)}")
    return "\n".join(lines) + "\n"


def blob_dir(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".blobs")


def save_map(m: TopometricMap, path) -> None:
    path = Path(path)
    text = serialize_map(m)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        refs = {n.payload_ref for n in m.nodes.values() if n.payload_ref}
        if refs:
            bdir = blob_dir(path)
            bdir.mkdir(exist_ok=True)
            for h in sorted(refs):
                if h in m.blobs and not (bdir / h).exists():
                    (bdir / h).write_bytes(m.blobs[h])
    except OSError as exc:
        raise MapIOError(str(exc)) from exc


def parse_map(text: str) -> TopometricMap:
    lines = text.splitlines()
    if not lines:
        raise CorruptRecord(0, "empty map file")
    header = lines[0].split()
    if len(header) != 3 or header[0] != "TOPOMAP" or not header[2].startswith("dim="):
        raise CorruptRecord(0, "bad header")
    if header[1] != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"expected {SCHEMA_VERSION}, found {header[1]}")
    try:
        dim = int(header[2][4:])
    except ValueError as exc:
        raise CorruptRecord(0, "bad descriptor dimension") from exc
    m = TopometricMap(descriptor_dim=dim)
    for idx, line in enumerate(lines[1:], start=1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if parts[0] == "NODE":
                if len(parts) != 13 + dim:
                    raise ValueError(f"NODE record has {len(parts)} fields, expected {13 + dim}")
                pose = Pose.from_tuple(parts[4:11])
                ref = parts[-1]
                m.add_node(MapNode(
                    node_id=int(parts[1]),
                    session_id=int(parts[2]),
                    timestamp=float(parts[3]),
                    pose_world=pose,
                    quality=float(parts[11]),
                    descriptor=np.array([float(v) for v in parts[12:12 + dim]]),
                    payload_ref=None if ref == "-" else ref,
                ))
            elif parts[0] == "EDGE":
                layer, a, b = parts[1], int(parts[2]), int(parts[3])
                if layer == "covis":
                    m.add_covis(a, b, float(parts[4]))
                elif layer == "trav":
                    m.add_trav(a, b, float(parts[4]))
                elif layer == "odom":
                    if len(parts) != 5 + 7 + 21:
                        raise ValueError("odom record needs kind, 7 pose and 21 covariance values")
                    rel = Pose.from_tuple(parts[5:12])
                    cov = _cov_from_upper([float(v) for v in parts[12:33]])
                    m.odom[(a, b)] = OdomFactorEdge(a, b, rel, cov, parts[4])
                    m._check_endpoints(a, b)
                else:
                    raise ValueError(f"unknown edge layer {layer!r}")
            else:
                raise ValueError(f"unknown record type {parts[0]!r}")
        except (ValueError, KeyError, IndexError) as exc:
            raise CorruptRecord(idx, str(exc)) from exc
    return m


def load_map(path) -> TopometricMap:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise MapIOError(str(exc)) from exc
    m = parse_map(text)
    bdir = blob_dir(path)
    if bdir.is_dir():
        for n in m.nodes.values():
            if n.payload_ref and (bdir / n.payload_ref).exists():
                m.blobs[n.payload_ref] = (bdir / n.payload_ref).read_bytes()
    return m


def maps_equal(a: TopometricMap, b: TopometricMap, atol=1e-12) -> bool:
    """Structural equality: ids, edges, and poses within ``atol``."""
    if a.descriptor_dim != b.descriptor_dim or set(a.nodes) != set(b.nodes):
        return False
    for nid, n in a.nodes.items():
        o = b.nodes[nid]
        if n.session_id != o.session_id or n.payload_ref != o.payload_ref:
            return False
        if abs(n.timestamp - o.timestamp) > atol or abs(n.quality - o.quality) > atol:
            return False
        if not np.allclose(n.pose_world.q, o.pose_world.q, atol=atol, rtol=0):
            return False
        if not np.allclose(n.pose_world.t, o.pose_world.t, atol=atol, rtol=0):
            return False
        if not np.allclose(n.descriptor, o.descriptor, atol=atol, rtol=0):
            return False
    if set(a.covis) != set(b.covis) or set(a.odom) != set(b.odom) or set(a.trav) != set(b.trav):
        return False
    for k in a.odom:
        if a.odom[k].kind != b.odom[k].kind:
            return False
        if not np.allclose(a.odom[k].covariance, b.odom[k].covariance, atol=atol, rtol=0):
            return False
    return True


# -- exports -------------------------------------------------------------------

def to_dot(m: TopometricMap) -> str:
    lines = ["graph topomap {"]
    for nid in m.node_ids():
        x, y, _ = m.nodes[nid].pose_world.t
        lines.append(f'  n{nid} [session={m.nodes[nid].session_id}, pos="{x:.3f},{y:.3f}!"];')
    for name, style in (("covis", "dotted"), ("odom", "solid"), ("trav", "dashed")):
        edges = m.layer(name)
        for a, b in sorted(edges):
            extra = ""
            if name == "odom":
                extra = f", kind={edges[(a, b)].kind}"
            lines.append(f"  n{a} -- n{b} [layer={name}, style={style}{extra}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_geojson(m: TopometricMap) -> dict:
    """One LineString per session; sessions outside the main component are flagged."""
    comps = m.components()
    main = m.main_component()
    features = []
    for sid in m.sessions():
        ids = m.session_nodes(sid)
        coords = [[float(m.nodes[i].pose_world.t[0]), float(m.nodes[i].pose_world.t[1])] for i in ids]
        labels = sorted({comps[i] for i in ids})
        geometry = {"type": "LineString", "coordinates": coords}
        if len(coords) == 1:
            geometry = {"type": "Point", "coordinates": coords[0]}
        features.append({
            "type": "Feature",
            "geometry": geometry,
            "properties": {
                "session": sid,
                "nodes": len(ids),
                "component": labels[0],
                "disconnected": main not in labels,
            },
        })
    return {"type": "FeatureCollection", "features": features}


def write_geojson(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True), encoding="utf-8")
