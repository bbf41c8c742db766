"""Rigid-body geometry on SO(3)/SE(3).

Conventions used throughout the package:

* quaternions are stored ``(w, x, y, z)`` with ``w >= 0`` after every operation;
* twists and 6x6 covariances are ordered ``(rotation, translation)``;
* ``Pose`` is the transform from the local frame to the parent frame, so
  ``a @ b`` maps points of ``b``'s frame into ``a``'s parent frame;
* perturbations are right-multiplicative: ``T exp(xi)``.

The array kernels (``quat_*``, ``so3_*``, ``se3_exp``/``se3_log`` and the
Jacobians) broadcast over leading dimensions; ``Pose`` wraps them for single
transforms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RotationNearPi

NEAR_PI = np.pi - 1e-6
_SMALL = 1e-3


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_multiply(a, b):
    aw, av = a[..., :1], a[..., 1:]
    bw, bv = b[..., :1], b[..., 1:]
    w = aw * bw - np.sum(av * bv, axis=-1, keepdims=True)
    cross = np.stack(
        [
            av[..., 1] * bv[..., 2] - av[..., 2] * bv[..., 1],
            av[..., 2] * bv[..., 0] - av[..., 0] * bv[..., 2],
            av[..., 0] * bv[..., 1] - av[..., 1] * bv[..., 0],
        ],
        axis=-1,
    )
    return np.concatenate([w, aw * bv + bw * av + cross], axis=-1)


def quat_conjugate(q):
    return np.concatenate([q[..., :1], -q[..., 1:]], axis=-1)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R):
    """Shepperd's method; picks the numerically largest pivot per matrix."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for k, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        diag = (m[0, 0], m[1, 1], m[2, 2])
        if tr >= max(diag):
            s = 2.0 * np.sqrt(1.0 + tr)
            out[k] = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif diag[0] >= diag[1] and diag[0] >= diag[2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            out[k] = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif diag[1] >= diag[2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            out[k] = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            out[k] = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
    return quat_normalize(out.reshape(R.shape[:-2] + (4,)))


def quat_rotate(q, v):
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), v)


def so3_exp(omega):
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    small = theta < _SMALL
    th = np.where(small, 1.0, theta)
    # sin(theta/2)/theta
    k = np.where(small, 0.5 - theta**2 / 48.0 + theta**4 / 3840.0, np.sin(th / 2) / th)
    q = np.concatenate([np.cos(theta / 2), omega * k], axis=-1)
    return quat_normalize(q)


def quat_angle(q):
    """Rotation angle in [0, pi] of (possibly unnormalized-sign) quaternions."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q[..., 1:], axis=-1)
    return 2.0 * np.arctan2(n, np.abs(q[..., 0]))


def so3_log(q, check=True):
    q = quat_normalize(q)
    v = q[..., 1:]
    w = q[..., :1]
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    theta = 2.0 * np.arctan2(n, w)
    if check and np.any(theta >= NEAR_PI):
        raise RotationNearPi(f"rotation angle {float(np.max(theta)):.9f} rad is within 1e-6 of pi")
    small = n < 1e-8
    scale = np.where(small, 2.0 / np.where(w == 0, 1.0, w), theta / np.where(small, 1.0, n))
    return v * scale


def _coeffs_v(theta):
    """Coefficients of V = I + b W + c W^2 and V^-1 = I - W/2 + d W^2."""
    small = theta < _SMALL
    th = np.where(small, 1.0, theta)
    t2 = theta * theta
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, 2.0 * np.sin(th / 2) ** 2 / th**2)
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (th - np.sin(th)) / th**3)
    half = th / 2
    d = np.where(
        small,
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0,
        (1.0 - half * np.cos(half) / np.sin(half)) / th**2,
    )
    return b, c, d


def so3_left_jacobian(omega):
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    b, c, _ = _coeffs_v(theta)
    W = skew(omega)
    return np.eye(3) + b[..., None, None] * W + c[..., None, None] * (W @ W)


def so3_left_jacobian_inv(omega):
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    _, _, d = _coeffs_v(theta)
    W = skew(omega)
    return np.eye(3) - 0.5 * W + d[..., None, None] * (W @ W)


def so3_right_jacobian(omega):
    return so3_left_jacobian(-np.asarray(omega, dtype=float))


def so3_right_jacobian_inv(omega):
    return so3_left_jacobian_inv(-np.asarray(omega, dtype=float))


def se3_exp(xi):
    """Twist ``(..., 6)`` -> quaternion ``(..., 4)``, translation ``(..., 3)``."""
    xi = np.asarray(xi, dtype=float)
    omega, rho = xi[..., :3], xi[..., 3:]
    V = so3_left_jacobian(omega)
    return so3_exp(omega), np.einsum("...ij,...j->...i", V, rho)


def se3_log(q, t, check=True):
    omega = so3_log(q, check=check)
    Vinv = so3_left_jacobian_inv(omega)
    rho = np.einsum("...ij,...j->...i", Vinv, np.asarray(t, dtype=float))
    return np.concatenate([omega, rho], axis=-1)


def _q_block(rho, phi):
    """The coupling block Q(rho, phi) of the SE(3) left Jacobian."""
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < 1e-2
    th = np.where(small, 1.0, theta)
    t2 = theta * theta
    c1 = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (th - np.sin(th)) / th**3)
    c2 = np.where(
        small,
        1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
        (th * th + 2.0 * np.cos(th) - 2.0) / (2.0 * th**4),
    )
    c3 = np.where(
        small,
        1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        (2.0 * th + th * np.cos(th) - 3.0 * np.sin(th)) / (2.0 * th**5),
    )
    P = skew(phi)
    Rh = skew(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    PP = P @ P
    c1 = c1[..., None, None]
    c2 = c2[..., None, None]
    c3 = c3[..., None, None]
    return (
        0.5 * Rh
        + c1 * (PR + RP + PRP)
        + c2 * (PP @ Rh + RP @ P - 3.0 * PRP)
        + c3 * (PRP @ P + PP @ Rh @ P)
    )


def se3_right_jacobian(xi):
    xi = np.asarray(xi, dtype=float)
    omega, rho = xi[..., :3], xi[..., 3:]
    Jr = so3_right_jacobian(omega)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Jr
    out[..., 3:, 3:] = Jr
    out[..., 3:, :3] = _q_block(-rho, -omega)
    return out


def se3_right_jacobian_inv(xi):
    xi = np.asarray(xi, dtype=float)
    omega, rho = xi[..., :3], xi[..., 3:]
    Ji = so3_right_jacobian_inv(omega)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Ji
    out[..., 3:, 3:] = Ji
    out[..., 3:, :3] = -Ji @ _q_block(-rho, -omega) @ Ji
    return out


def adjoint_matrix(R, t):
    """Adjoint of (R, t) acting on (rotation, translation) twists."""
    R = np.asarray(R, dtype=float)
    out = np.zeros(R.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., 3:, :3] = skew(t) @ R
    return out


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform stored as a unit quaternion plus translation (meters)."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = quat_normalize(np.array(self.q, dtype=float).reshape(4))
        t = np.array(self.t, dtype=float).reshape(3)
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t):
        return cls(matrix_to_quat(np.asarray(R)), t)

    @classmethod
    def exp(cls, xi):
        q, t = se3_exp(np.asarray(xi, dtype=float).reshape(6))
        return cls(q, t)

    @classmethod
    def from_tuple(cls, values):
        values = [float(v) for v in values]
        if len(values) != 7:
            raise ValueError("pose tuple needs 7 values (qw qx qy qz tx ty tz)")
        return cls(values[:4], values[4:])

    def to_tuple(self):
        return tuple(float(v) for v in self.q) + tuple(float(v) for v in self.t)

    @property
    def R(self):
        return quat_to_matrix(self.q)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self):
        qi = quat_conjugate(self.q)
        return Pose(qi, -quat_rotate(qi, self.t))

    def __matmul__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return Pose(quat_multiply(self.q, other.q), self.t + quat_rotate(self.q, other.t))

    def apply(self, points):
        """Transform points ``(..., 3)`` from this pose's frame to its parent."""
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def log(self):
        return log_map(self)

    def angle(self):
        return float(quat_angle(self.q))

    def adjoint(self):
        return adjoint_matrix(self.R, self.t)

    def allclose(self, other, atol=1e-9):
        err_t, err_r = pose_error(self, other)
        return err_t <= atol and np.radians(err_r) <= atol

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self.q)
        t = ", ".join(f"{v:.6g}" for v in self.t)
        return f"Pose(q=[{q}], t=[{t}])"


def compose(a: Pose, b: Pose) -> Pose:
    return a @ b


def inverse(p: Pose) -> Pose:
    return p.inverse()


def log_map(p: Pose) -> np.ndarray:
    """Twist ``(rotation, translation)`` with ``exp(log_map(p)) == p``.

    Raises ``RotationNearPi`` for angles within 1e-6 rad of pi, where the
    rotation axis is not uniquely defined.
    """
    return se3_log(p.q, p.t)


def exp_map(xi) -> Pose:
    return Pose.exp(xi)


def relative(a: Pose, b: Pose) -> Pose:
    """``a^-1 b``: pose of ``b`` expressed in ``a``'s frame."""
    return a.inverse() @ b


def pose_error(a: Pose, b: Pose):
    """(translation error in meters, geodesic rotation error in degrees)."""
    dt = float(np.linalg.norm(a.t - b.t))
    dq = quat_multiply(quat_conjugate(a.q), b.q)
    return dt, float(np.degrees(quat_angle(dq)))


def check_covariance(cov, name="covariance"):
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (6, 6):
        raise ValueError(f"{name} must be 6x6, got {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-12, rtol=0):
        raise ValueError(f"{name} is not symmetric")
    if np.min(np.linalg.eigvalsh(cov)) <= 0:
        raise ValueError(f"{name} is not positive definite")
    return cov


def compose_covariance(cov_ab, cov_bc, rel_bc: Pose):
    """Covariance of ``T_ab @ T_bc`` under right perturbations on each factor."""
    Ad = rel_bc.inverse().adjoint()
    out = Ad @ np.asarray(cov_ab) @ Ad.T + np.asarray(cov_bc)
    return 0.5 * (out + out.T)


def random_pose(rng, max_angle=np.pi - 1e-3, max_translation=10.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return Pose(so3_exp(axis * angle), rng.uniform(-max_translation, max_translation, size=3))


def yaw_pose(yaw, t=(0.0, 0.0, 0.0)):
    return Pose(so3_exp(np.array([0.0, 0.0, yaw])), t)
