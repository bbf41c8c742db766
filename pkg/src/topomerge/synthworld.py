"""Synthetic multi-session worlds and the oracle providers that stand in for
learned frontends (descriptors, pointmaps, keypoints, odometry, quality).

World frame: x east, y north, z up. Camera frame: x right, y down, z forward.
Every oracle call draws its randomness from a generator seeded by hashing
(world seed, config seed, operation, ids), so results never depend on call
order.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
import numpy as np

from . import se3
from .errors import InfeasibleOverlapPlan, NoSharedVisibility
from .se3 import Pose
from .topomap import Frame, KeyframePolicy, build_submap, make_node_id, split_node_id

PROXIMITY_M = 7.5
MIN_SHARED_VISIBILITY = 0.05
SECONDS_PER_DAY = 86400.0


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def K(self):
        return np.array([[self.focal, 0, self.cx], [0, self.focal, self.cy], [0, 0, 1.0]])

    def scaled(self, width, height):
        s = width / self.width
        return CameraIntrinsics(self.focal * s, (self.cx + 0.5) * s - 0.5, (self.cy + 0.5) * s - 0.5, width, height)

    def pixel_grid(self):
        """Pixel coordinates ``(u, v)`` as two (height, width) arrays."""
        return np.meshgrid(np.arange(self.width, dtype=float), np.arange(self.height, dtype=float))

    def rays(self, u, v):
        """Unnormalized rays ``[(u - cx)/f, (v - cy)/f, 1]``."""
        u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
        return np.stack([(u - self.cx) / self.focal, (v - self.cy) / self.focal, np.ones_like(u)], axis=-1)

    def project(self, points):
        """Return ``(uv, depth)`` for camera-frame points."""
        p = np.asarray(points, dtype=float)
        z = p[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.focal * p[..., 0] / z + self.cx, self.focal * p[..., 1] / z + self.cy], axis=-1)
        return uv, z

    def inside(self, uv, z):
        return (z > 0) & (uv[..., 0] >= -0.5) & (uv[..., 0] < self.width - 0.5) & \
            (uv[..., 1] >= -0.5) & (uv[..., 1] < self.height - 0.5)


IMAGE_INTRINSICS = CameraIntrinsics(500.0, 319.5, 239.5, 640, 480)


# -- world specification -------------------------------------------------------------

@dataclass
class SessionSpec:
    length_m: float
    epoch: int = 0
    day: float | None = None
    lateral_offset: float | None = None

    def __post_init__(self):
        if not self.length_m > 0:
            raise ValueError("session length must be positive")
        if self.epoch < 0:
            raise ValueError("epoch must be non-negative")


@dataclass
class WorldSpec:
    """Sessions laid along one master route.

    ``overlaps`` lists ``(a, b, fraction)``: session ``b`` shares at least
    ``fraction`` of the shorter trajectory with ``a`` within 7.5 m. A session
    with no overlap to an earlier one is placed past everything so far.
    """

    sessions: list
    overlaps: list = field(default_factory=list)
    step_m: float = 1.0
    speed_mps: float = 1.2
    camera_height: float = 1.6
    days_per_epoch: float = 30.0
    gap_m: float = 60.0
    max_lateral_m: float = 1.5
    glances_per_100m: float = 1.0
    curvature: float = 1.0

    def __post_init__(self):
        self.sessions = [s if isinstance(s, SessionSpec) else SessionSpec(**s) for s in self.sessions]
        if not self.sessions:
            raise ValueError("world needs at least one session")
        if not (self.step_m > 0 and self.speed_mps > 0):
            raise ValueError("step_m and speed_mps must be positive")

    @classmethod
    def chain(cls, n_sessions, length_m=300.0, overlap=0.3, epochs=None, **kw):
        """Consecutive sessions each overlapping the previous one."""
        epochs = epochs if epochs is not None else [0] * n_sessions
        sessions = [SessionSpec(length_m, epochs[k]) for k in range(n_sessions)]
        ov = [(k - 1, k, overlap) for k in range(1, n_sessions)] if overlap > 0 else []
        return cls(sessions, ov, **kw)


@dataclass(frozen=True)
class OracleConfig:
    descriptor_dim: int = 256
    descriptor_noise_sigma: float = 0.05
    descriptor_epoch_drift: float = 0.25
    descriptor_length_scale: float = 8.0
    descriptor_heading_scale: float = 6.5
    pointmap_noise_sigma: float = 0.02
    pointmap_outlier_rate: float = 0.05
    outlier_magnitude: float = 2.0
    odometry_noise: tuple = (0.01, 0.001)
    quality_midpoint_dps: float = 30.0
    quality_width_dps: float = 4.0
    quality_epoch_penalty: float = 2.0
    quality_noise: float = 2.0
    confidence_fidelity: float = 1.0
    confidence_shape: float = 4.0
    confidence_scale: float = 2.5
    unseen_confidence_factor: float = 0.02
    keypoint_count: int = 200
    keypoint_outlier_rate: float = 0.3
    keypoint_noise_px: float = 0.5
    grid: tuple = (32, 24)
    intrinsics: CameraIntrinsics = IMAGE_INTRINSICS
    corridor_half_width: float = 9.0
    far_cap_m: float = 25.0
    seed: int = 0

    def __post_init__(self):
        for name in ("descriptor_noise_sigma", "descriptor_epoch_drift", "pointmap_noise_sigma",
                     "outlier_magnitude", "keypoint_noise_px", "quality_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if min(self.odometry_noise) < 0:
            raise ValueError("odometry noise must be >= 0")
        if not 0 <= self.pointmap_outlier_rate < 1:
            raise ValueError("pointmap_outlier_rate must be in [0, 1)")
        if not 0 <= self.keypoint_outlier_rate < 1:
            raise ValueError("keypoint_outlier_rate must be in [0, 1)")
        if not 0 <= self.confidence_fidelity <= 1:
            raise ValueError("confidence_fidelity must be in [0, 1]")

    @property
    def grid_intrinsics(self) -> CameraIntrinsics:
        return self.intrinsics.scaled(*self.grid)

    @classmethod
    def noiseless(cls, **kw):
        base = dict(descriptor_noise_sigma=0.0, descriptor_epoch_drift=0.0, pointmap_noise_sigma=0.0,
                    pointmap_outlier_rate=0.0, odometry_noise=(0.0, 0.0), quality_noise=0.0,
                    keypoint_outlier_rate=0.0, keypoint_noise_px=0.0)
        base.update(kw)
        return cls(**base)


@dataclass
class PairwisePrediction:
    """Oracle stand-in for a two-view pointmap network, everything in frame a."""

    pointmap_a_in_a: np.ndarray
    pointmap_b_in_a: np.ndarray
    confidence_a: np.ndarray
    confidence_b: np.ndarray
    predicted_relative: Pose
    predicted_focal: float
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        shapes = {self.pointmap_a_in_a.shape[:2], self.pointmap_b_in_a.shape[:2],
                  self.confidence_a.shape, self.confidence_b.shape}
        if len(shapes) != 1:
            raise ValueError("prediction grids must share dimensions")
        if np.any(self.confidence_a < 0) or np.any(self.confidence_b < 0):
            raise ValueError("confidences must be non-negative")

    @property
    def mean_confidence(self) -> float:
        """Overlap score: mean confidence of the cross-view grid."""
        return float(np.mean(self.confidence_b))


# -- world ---------------------------------------------------------------------------

def _camera_rotation(yaw):
    """Camera-to-world rotation for a level camera facing ``yaw``."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])


@dataclass
class SyntheticWorld:
    spec: WorldSpec
    rng_seed: int
    landmark_cloud: np.ndarray
    landmark_epochs: np.ndarray
    trajectories: dict
    session_epochs: dict
    angular_speed: dict
    route: dict = field(repr=False, default_factory=dict)

    def session_ids(self):
        return sorted(self.trajectories)

    def frame(self, node_id):
        s, k = split_node_id(node_id)
        return self.trajectories[s][k]

    def pose(self, node_id) -> Pose:
        return self.frame(node_id)[1]

    def timestamp(self, node_id) -> float:
        return self.frame(node_id)[0]

    def node_ids(self, session):
        return [make_node_id(session, k) for k in range(len(self.trajectories[session]))]

    def positions(self, session):
        return np.array([p.t for _, p in self.trajectories[session]])

    def true_relative(self, a, b) -> Pose:
        return se3.relative(self.pose(a), self.pose(b))

    def pose_at(self, session, timestamp) -> Pose:
        """Ground-truth pose at a timestamp, interpolated on the manifold."""
        traj = self.trajectories[session]
        times = np.array([t for t, _ in traj])
        if not times[0] - 1e-9 <= timestamp <= times[-1] + 1e-9:
            raise ValueError(f"timestamp {timestamp} outside session {session} span")
        k = int(np.searchsorted(times, timestamp, side="right")) - 1
        k = min(max(k, 0), len(traj) - 1)
        if k == len(traj) - 1 or timestamp == times[k]:
            return traj[k][1]
        a, b = traj[k][1], traj[k + 1][1]
        u = (timestamp - times[k]) / (times[k + 1] - times[k])
        return a @ Pose.exp(u * se3.relative(a, b).log())

    def ground_truth(self):
        """All frame poses keyed by node id."""
        return {make_node_id(s, k): p for s in self.trajectories for k, (_, p) in enumerate(self.trajectories[s])}


def _master_route(rng, length, curvature=1.0, ds=0.25):
    s = np.arange(0.0, length + ds, ds)
    heading = np.zeros_like(s)
    for _ in range(4):
        amp = curvature * np.radians(rng.uniform(5.0, 12.0))
        period = rng.uniform(120.0, 600.0)
        heading += amp * np.sin(2 * np.pi * s / period + rng.uniform(0, 2 * np.pi))
    xy = np.zeros((len(s), 2))
    mid = 0.5 * (heading[1:] + heading[:-1])
    xy[1:, 0] = np.cumsum(np.cos(mid) * ds)
    xy[1:, 1] = np.cumsum(np.sin(mid) * ds)
    return s, xy, heading


def _place_sessions(spec: WorldSpec):
    n = len(spec.sessions)
    lengths = [s.length_m for s in spec.sessions]
    parent = {}
    for a, b, frac in spec.overlaps:
        if not (0 <= a < n and 0 <= b < n) or a == b:
            raise InfeasibleOverlapPlan(f"overlap ({a}, {b}) references an invalid session")
        if not 0 <= frac <= 1:
            raise InfeasibleOverlapPlan(f"overlap fraction {frac} outside [0, 1]")
        lo, hi = min(a, b), max(a, b)
        if hi not in parent and frac > 0:
            parent[hi] = (lo, frac)
    starts = [0.0] * n
    end = lengths[0]
    for k in range(1, n):
        if k in parent:
            a, frac = parent[k]
            shared = frac * min(lengths[a], lengths[k])
            starts[k] = max(starts[a] + lengths[a] - shared, 0.0)
        else:
            starts[k] = end + spec.gap_m
        end = max(end, starts[k] + lengths[k])
    return starts, end


def generate_world(spec: WorldSpec, seed: int = 0) -> SyntheticWorld:
    """Deterministic world for ``seed``; overlap plan verified by proximity."""
    rng = np.random.default_rng(seed)
    starts, total = _place_sessions(spec)
    s_route, xy, heading = _master_route(rng, total + 10.0, spec.curvature)
    normal = np.stack([-np.sin(heading), np.cos(heading)], axis=1)

    trajectories, epochs, omega = {}, {}, {}
    for k, ss in enumerate(spec.sessions):
        lat0 = ss.lateral_offset if ss.lateral_offset is not None else \
            rng.uniform(-spec.max_lateral_m, spec.max_lateral_m) * 0.6
        wob_phase = rng.uniform(0, 2 * np.pi)
        wob_amp = spec.curvature * np.radians(rng.uniform(1.0, 4.0))
        n_glance = rng.poisson(spec.glances_per_100m * ss.length_m / 100.0)
        g_pos = rng.uniform(0, ss.length_m, n_glance)
        g_amp = np.radians(rng.uniform(30.0, 45.0, n_glance)) * rng.choice([-1, 1], n_glance)
        n_frames = int(np.floor(ss.length_m / spec.step_m + 1e-9)) + 1
        arc = np.arange(n_frames) * spec.step_m
        s_abs = starts[k] + arc
        px = np.interp(s_abs, s_route, xy[:, 0])
        py = np.interp(s_abs, s_route, xy[:, 1])
        hd = np.interp(s_abs, s_route, heading)
        nx = np.interp(s_abs, s_route, normal[:, 0])
        ny = np.interp(s_abs, s_route, normal[:, 1])
        lat = np.clip(lat0 + spec.curvature * 0.4 * np.sin(2 * np.pi * arc / 45.0 + wob_phase),
                      -spec.max_lateral_m, spec.max_lateral_m)
        yaw = hd + wob_amp * np.sin(2 * np.pi * arc / 23.0 + wob_phase)
        for gp, ga in zip(g_pos, g_amp):
            yaw = yaw + ga * np.exp(-(((arc - gp) / 1.5) ** 2))
        day = ss.day if ss.day is not None else ss.epoch * spec.days_per_epoch
        t0 = day * SECONDS_PER_DAY + rng.uniform(8, 18) * 3600.0
        dt = spec.step_m / spec.speed_mps
        traj = []
        for i in range(n_frames):
            pos = np.array([px[i] + lat[i] * nx[i], py[i] + lat[i] * ny[i], spec.camera_height])
            traj.append((t0 + i * dt, Pose.from_rt(_camera_rotation(yaw[i]), pos)))
        trajectories[k] = traj
        epochs[k] = ss.epoch
        dyaw = np.degrees(np.abs(np.gradient(np.unwrap(yaw)))) / dt if n_frames > 1 else np.zeros(1)
        omega[k] = dyaw

    # landmarks on the walls and ground beside the whole route
    n_lm = max(100, int(total / 2))
    s_lm = rng.uniform(0, total, n_lm)
    side = rng.choice([-1.0, 1.0], n_lm)
    off = side * rng.uniform(6.0, 10.0, n_lm)
    lm = np.column_stack([np.interp(s_lm, s_route, xy[:, 0]) + off * np.interp(s_lm, s_route, normal[:, 0]),
                          np.interp(s_lm, s_route, xy[:, 1]) + off * np.interp(s_lm, s_route, normal[:, 1]),
                          rng.uniform(0.0, 4.0, n_lm)])
    lm_epochs = rng.integers(0, max(e for e in epochs.values()) + 1, n_lm)

    world = SyntheticWorld(spec, int(seed), lm, lm_epochs, trajectories, epochs, omega,
                           route={"s": s_route, "xy": xy, "heading": heading, "starts": starts})
    for a, b, frac in spec.overlaps:
        got = measured_overlap(world, a, b)
        if got + 1e-9 < frac:
            raise InfeasibleOverlapPlan(f"sessions {a},{b}: planned overlap {frac}, realized {got:.3f}")
    return world


def measured_overlap(world: SyntheticWorld, a: int, b: int, radius=PROXIMITY_M) -> float:
    """Fraction of the shorter session's frames within ``radius`` of the other."""
    from scipy.spatial import cKDTree

    pa, pb = world.positions(a), world.positions(b)
    short, other = (pa, pb) if len(pa) <= len(pb) else (pb, pa)
    d, _ = cKDTree(other).query(short)
    return float(np.mean(d <= radius))


# -- per-call randomness -----------------------------------------------------------

def _rng(world, cfg, op, *ids):
    key = repr((world.rng_seed, cfg.seed if cfg is not None else 0, op) + tuple(ids)).encode()
    return np.random.default_rng(int.from_bytes(hashlib.sha256(key).digest()[:16], "little"))


# -- descriptors ------------------------------------------------------------------------

def _rff(world, cfg, epoch):
    rng = _rng(world, None, "rff", cfg.descriptor_dim, epoch)
    scales = np.array([cfg.descriptor_length_scale] * 2 + [cfg.descriptor_length_scale / cfg.descriptor_heading_scale] * 2)
    W = rng.normal(size=(cfg.descriptor_dim, 4)) / scales
    b = rng.uniform(0, 2 * np.pi, cfg.descriptor_dim)
    return W, b


def _clean_descriptor(world, cfg, pose: Pose, epoch):
    fwd = pose.R[:, 2]
    yaw = np.arctan2(fwd[1], fwd[0])
    x = np.array([pose.t[0], pose.t[1], np.cos(yaw), np.sin(yaw)])
    W0, b0 = _rff(world, cfg, 0)
    d = np.cos(W0 @ x + b0)
    theta = min(cfg.descriptor_epoch_drift * epoch, np.pi / 2)
    if theta > 0:
        We, be = _rff(world, cfg, epoch)
        d = np.cos(theta) * d + np.sin(theta) * np.cos(We @ x + be)
    return d / np.linalg.norm(d)


def oracle_descriptor(world: SyntheticWorld, session: int, timestamp: float, cfg: OracleConfig | None = None):
    """Unit descriptor whose similarity decays with distance, heading and epoch gap."""
    cfg = cfg or OracleConfig()
    pose = world.pose_at(session, timestamp)
    d = _clean_descriptor(world, cfg, pose, world.session_epochs[session])
    if cfg.descriptor_noise_sigma > 0:
        rng = _rng(world, cfg, "descriptor", session, repr(float(timestamp)))
        d = d + rng.normal(0, cfg.descriptor_noise_sigma / np.sqrt(cfg.descriptor_dim), d.shape)
    return d / np.linalg.norm(d)


def oracle_quality(world: SyntheticWorld, node_id: int, cfg: OracleConfig | None = None) -> float:
    """Image quality in [0, 100]: logistic in angular speed, minus an epoch penalty."""
    cfg = cfg or OracleConfig()
    s, k = split_node_id(node_id)
    w = world.angular_speed[s][k]
    q = 100.0 / (1.0 + np.exp((w - cfg.quality_midpoint_dps) / cfg.quality_width_dps))
    q -= cfg.quality_epoch_penalty * world.session_epochs[s]
    if cfg.quality_noise > 0:
        q += _rng(world, cfg, "quality", node_id).normal(0, cfg.quality_noise)
    return float(np.clip(q, 0.0, 100.0))


# -- local geometry and visibility ------------------------------------------------

def corridor_depth(rays, cfg: OracleConfig, height=1.6):
    """Depth along camera rays ``[a, b, 1]`` in the node-local corridor model:
    ground plane, side walls and a far cap."""
    a, b = rays[..., 0], rays[..., 1]
    with np.errstate(divide="ignore"):
        ground = np.where(b > 1e-9, height / np.where(b > 1e-9, b, 1.0), np.inf)
        wall = np.where(np.abs(a) > 1e-9, cfg.corridor_half_width / np.where(np.abs(a) > 1e-9, np.abs(a), 1.0), np.inf)
    return np.minimum(np.minimum(ground, wall), cfg.far_cap_m)


def node_points(world, node_id, cfg: OracleConfig, intr: CameraIntrinsics | None = None):
    """Noiseless camera-frame points of a node on the pixel grid of ``intr``."""
    intr = intr or cfg.grid_intrinsics
    u, v = intr.pixel_grid()
    r = intr.rays(u, v)
    return r * corridor_depth(r, cfg, world.spec.camera_height)[..., None]


def _visible(points_cam, intr: CameraIntrinsics, cfg, height):
    """Visibility of camera-frame points with a z-buffer against the corridor."""
    uv, z = intr.project(points_cam)
    ok = intr.inside(uv, z)
    zs = np.where(ok, z, 1.0)
    r = intr.rays(np.where(ok, uv[..., 0], intr.cx), np.where(ok, uv[..., 1], intr.cy))
    surf = corridor_depth(r, cfg, height)
    return ok & (zs <= surf * 1.02 + 0.25)


def frustum_overlap(world, a, b, cfg: OracleConfig | None = None) -> float:
    """Mean fraction of each node's grid points visible from the other."""
    cfg = cfg or OracleConfig()
    if a == b:
        return 1.0
    intr, h = cfg.grid_intrinsics, world.spec.camera_height
    rel = world.true_relative(a, b)
    pa, pb = node_points(world, a, cfg), node_points(world, b, cfg)
    va = _visible(rel.inverse().apply(pa.reshape(-1, 3)), intr, cfg, h)
    vb = _visible(rel.apply(pb.reshape(-1, 3)), intr, cfg, h)
    return float(0.5 * (va.mean() + vb.mean()))


# -- pairwise pointmaps ---------------------------------------------------------------

def _displace(rng, pts, mask, magnitude, coherence=0.95):
    # failures of a pointmap regressor are spatially coherent: one dominant
    # direction per prediction plus per-point jitter
    common = rng.normal(size=3)
    common /= np.linalg.norm(common)
    d = coherence * common + (1 - coherence) * rng.normal(size=pts.shape)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return np.where(mask[..., None], pts + magnitude * d, pts)


def oracle_pairwise_with_flags(world, node_a, node_b, cfg: OracleConfig | None = None):
    """Prediction plus the planted outlier masks ``(mask_a, mask_b)``."""
    cfg = cfg or OracleConfig()
    if node_a != node_b and frustum_overlap(world, node_a, node_b, cfg) < MIN_SHARED_VISIBILITY:
        raise NoSharedVisibility(f"nodes {node_a} and {node_b} share no visible content")
    rng = _rng(world, cfg, "pairwise", node_a, node_b)
    intr, h = cfg.grid_intrinsics, world.spec.camera_height
    rel = world.true_relative(node_a, node_b)
    Xaa = node_points(world, node_a, cfg)
    Xba = rel.apply(node_points(world, node_b, cfg).reshape(-1, 3)).reshape(Xaa.shape)
    seen_b = _visible(Xba.reshape(-1, 3), intr, cfg, h).reshape(Xaa.shape[:2]) if node_a != node_b \
        else np.ones(Xaa.shape[:2], bool)

    shape = Xaa.shape[:2]
    sig = cfg.pointmap_noise_sigma
    if sig > 0:
        Xaa = Xaa + rng.normal(0, sig, Xaa.shape)
        Xba = Xba + rng.normal(0, sig, Xba.shape)
    mask_a = rng.random(shape) < cfg.pointmap_outlier_rate
    mask_b = rng.random(shape) < cfg.pointmap_outlier_rate
    Xaa = _displace(rng, Xaa, mask_a, cfg.outlier_magnitude)
    Xba = _displace(rng, Xba, mask_b, cfg.outlier_magnitude)

    mean_c = cfg.confidence_shape * cfg.confidence_scale
    f = cfg.confidence_fidelity

    def confidence(mask, factor):
        inl = rng.gamma(cfg.confidence_shape, cfg.confidence_scale, shape) * factor
        alt = rng.gamma(cfg.confidence_shape, cfg.confidence_scale, shape) * factor
        honest = rng.uniform(0, 0.1, shape) * mean_c * factor
        return np.where(mask, f * honest + (1 - f) * alt, inl)

    conf_a = confidence(mask_a, np.ones(shape))
    conf_b = confidence(mask_b, np.where(seen_b, 1.0, cfg.unseen_confidence_factor))

    pred_rel = rel
    focal = intr.focal
    if sig > 0:
        pred_rel = rel @ Pose.exp(np.r_[rng.normal(0, sig / 5.0, 3), rng.normal(0, 2 * sig, 3)])
        focal = float(intr.focal * np.exp(rng.normal(0, sig)))
    pred = PairwisePrediction(Xaa, Xba, conf_a, conf_b, pred_rel, focal, intr)
    return pred, (mask_a, mask_b)


def oracle_pairwise(world, node_a, node_b, cfg: OracleConfig | None = None) -> PairwisePrediction:
    return oracle_pairwise_with_flags(world, node_a, node_b, cfg)[0]


# -- keypoints -------------------------------------------------------------------------

def oracle_keypoint_matches(world, node_a, node_b, cfg: OracleConfig | None = None, count=None):
    """``(pixels_a, pixels_b, outlier_flags)``; inliers obey the true epipolar geometry."""
    cfg = cfg or OracleConfig()
    count = cfg.keypoint_count if count is None else int(count)
    if node_a != node_b and frustum_overlap(world, node_a, node_b, cfg) < MIN_SHARED_VISIBILITY:
        raise NoSharedVisibility(f"nodes {node_a} and {node_b} share no visible content")
    rng = _rng(world, cfg, "keypoints", node_a, node_b, count)
    intr, h = cfg.intrinsics, world.spec.camera_height
    ua = np.column_stack([rng.uniform(-0.5, intr.width - 0.5, count), rng.uniform(-0.5, intr.height - 0.5, count)])
    r = intr.rays(ua[:, 0], ua[:, 1])
    Pa = r * corridor_depth(r, cfg, h)[:, None]
    Pb = world.true_relative(node_a, node_b).inverse().apply(Pa)
    keep = _visible(Pb, intr, cfg, h) if node_a != node_b else np.ones(count, bool)
    ua, Pb = ua[keep], Pb[keep]
    ub = intr.project(Pb)[0] if node_a != node_b else ua.copy()
    n = len(ua)
    out = rng.random(n) < cfg.keypoint_outlier_rate
    ub[out] = np.column_stack([rng.uniform(-0.5, intr.width - 0.5, out.sum()),
                               rng.uniform(-0.5, intr.height - 0.5, out.sum())])
    if cfg.keypoint_noise_px > 0:
        ua = ua + rng.normal(0, cfg.keypoint_noise_px, ua.shape)
        ub = ub + rng.normal(0, cfg.keypoint_noise_px, ub.shape)
    return ua, ub, out


def true_fundamental(world, node_a, node_b, cfg: OracleConfig | None = None):
    """F with ``x_b^T F x_a = 0`` from the ground-truth relative pose."""
    cfg = cfg or OracleConfig()
    rel = world.true_relative(node_a, node_b)
    Kinv = np.linalg.inv(cfg.intrinsics.K())
    R, t = rel.R, rel.t
    return Kinv.T @ (R.T @ se3.skew(t)) @ Kinv


# -- odometry --------------------------------------------------------------------------

def step_covariance(length, cfg: OracleConfig):
    st, sr = cfg.odometry_noise
    return np.diag([sr**2 * length] * 3 + [st**2 * length] * 3)


def oracle_odometry(world, session, cfg: OracleConfig | None = None):
    """Relative poses between consecutive frames with their sampling covariance."""
    cfg = cfg or OracleConfig()
    traj = world.trajectories[session]
    if len(traj) < 2:
        return []
    q = np.array([p.q for _, p in traj])
    t = np.array([p.t for _, p in traj])
    # true relatives a^-1 b, batched
    qi = se3.quat_conjugate(q[:-1])
    rq = se3.quat_multiply(qi, q[1:])
    rt = se3.quat_rotate(qi, t[1:] - t[:-1])
    lengths = np.linalg.norm(rt, axis=1)
    st, sr = cfg.odometry_noise
    sig = np.sqrt(np.column_stack([np.repeat(lengths[:, None] * sr**2, 3, 1),
                                   np.repeat(lengths[:, None] * st**2, 3, 1)]))
    noise = _rng(world, cfg, "odometry", session).normal(size=sig.shape) * sig
    if np.any(noise):
        nq, nt = se3.se3_exp(noise)
        mt = rt + se3.quat_rotate(rq, nt)
        mq = se3.quat_multiply(rq, nq)
    else:
        mq, mt = rq, rt
    out = []
    for k in range(len(lengths)):
        cov = step_covariance(lengths[k], cfg)
        # floor keeps the factor invertible when the configured noise is zero
        if not np.all(np.diag(cov) > 0):
            cov = cov + np.eye(6) * 1e-12
        out.append((Pose(mq[k], mt[k]), cov))
    return out


# -- provider facade -------------------------------------------------------------------

class OracleProvider:
    """Bundles the oracles behind node-id based calls used by the pipeline."""

    def __init__(self, world: SyntheticWorld, cfg: OracleConfig | None = None):
        self.world = world
        self.cfg = cfg or OracleConfig()

    def descriptor(self, node_id):
        s, _ = split_node_id(node_id)
        return oracle_descriptor(self.world, s, self.world.timestamp(node_id), self.cfg)

    def quality(self, node_id):
        return oracle_quality(self.world, node_id, self.cfg)

    def pairwise(self, a, b) -> PairwisePrediction:
        return oracle_pairwise(self.world, a, b, self.cfg)

    def keypoint_matches(self, a, b):
        pa, pb, _ = oracle_keypoint_matches(self.world, a, b, self.cfg)
        return pa, pb

    def match_count(self, a, b) -> int:
        """Expected verified keypoint count, used as covisibility strength."""
        ov = frustum_overlap(self.world, a, b, self.cfg)
        if a != b and ov < MIN_SHARED_VISIBILITY:
            return 0
        return int(round(self.cfg.keypoint_count * ov * (1 - self.cfg.keypoint_outlier_rate)))

    def odometry(self, session):
        return oracle_odometry(self.world, session, self.cfg)

    def frames(self, session):
        """Frames with odometry-integrated local poses starting at identity."""
        traj = self.world.trajectories[session]
        odo = self.odometry(session)
        pose = Pose.identity()
        frames = []
        for k, (t, _) in enumerate(traj):
            cov = None
            if k > 0:
                rel, cov = odo[k - 1]
                pose = pose @ rel
            nid = make_node_id(session, k)
            frames.append(Frame(t, pose, self.descriptor(nid), self.quality(nid), None, cov))
        return frames

    def submap(self, session, policy: KeyframePolicy | None = None):
        frames = self.frames(session)
        return build_submap(frames, policy, session_id=session, descriptor_dim=self.cfg.descriptor_dim,
                            covis_strength=self.match_count)

    def with_config(self, **kw):
        return OracleProvider(self.world, replace(self.cfg, **kw))


# -- files -----------------------------------------------------------------------------

def write_ground_truth(world: SyntheticWorld, path):
    lines = []
    for s in world.session_ids():
        for t, p in world.trajectories[s]:
            vals = " ".join(repr(float(x)) for x in (*p.q, *p.t))
            lines.append(f"GT {s} {t!r} {vals}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ground_truth(path):
    """Node id -> Pose, with frame indices assigned in file order per session."""
    out, counters = {}, {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] != "GT" or len(parts) != 10:
                raise ValueError(f"{path}:{n}: malformed ground-truth line")
            s = int(parts[1])
            k = counters.get(s, 0)
            counters[s] = k + 1
            vals = [float(x) for x in parts[3:]]
            out[make_node_id(s, k)] = Pose(np.array(vals[:4]), np.array(vals[4:]))
    return out
