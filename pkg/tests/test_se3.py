import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topomerge import se3
from topomerge.errors import RotationNearPi
from topomerge.se3 import Pose


def rand_poses(seed, n, max_angle=np.pi - 1e-3):
    rng = np.random.default_rng(seed)
    return [se3.random_pose(rng, max_angle=max_angle) for _ in range(n)]


def test_identity_compose():
    p = se3.compose(Pose.identity(), Pose.identity())
    assert np.allclose(p.matrix(), np.eye(4))


def test_compose_with_inverse_is_identity():
    for p in rand_poses(0, 50):
        e = se3.compose(p, se3.inverse(p))
        assert e.angle() < 1e-9
        assert np.linalg.norm(e.t) < 1e-9


def test_compose_matches_matrix_product():
    a, b = rand_poses(1, 2)
    got = se3.compose(a, b).matrix()
    want = a.matrix() @ b.matrix()
    assert np.max(np.abs(got - want)) < 1e-12


def test_quaternion_stays_unit_over_long_chain():
    rng = np.random.default_rng(2)
    p = Pose.identity()
    for _ in range(5000):
        p = p @ se3.random_pose(rng, max_angle=0.1, max_translation=1.0)
        assert abs(np.linalg.norm(p.q) - 1.0) < 1e-9


def test_associativity_1000_triples():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        a, b, c = (se3.random_pose(rng) for _ in range(3))
        lhs = ((a @ b) @ c).matrix()
        rhs = (a @ (b @ c)).matrix()
        assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_log_identity_is_zero():
    assert np.all(se3.log_map(Pose.identity()) == 0)


def test_log_pure_translation():
    xi = se3.log_map(Pose(np.array([1.0, 0, 0, 0]), [1.0, 2.0, 3.0]))
    assert np.allclose(xi[:3], 0, atol=0)
    assert np.allclose(xi[3:], [1, 2, 3], atol=1e-15)


def test_log_near_pi_raises():
    p = Pose(se3.so3_exp(np.array([0, 0, np.pi - 1e-7])), np.zeros(3))
    with pytest.raises(RotationNearPi):
        se3.log_map(p)


def test_exp_differential_at_zero_matches_finite_difference():
    # d/dh log(P exp(h e_k)) at h=0 equals Jr^-1(log P) e_k
    rng = np.random.default_rng(4)
    p = se3.random_pose(rng, max_angle=0.5, max_translation=1.0)
    xi0 = se3.log_map(p)
    h = 1e-6
    J = np.zeros((6, 6))
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        J[:, k] = (se3.log_map(p @ Pose.exp(e)) - se3.log_map(p @ Pose.exp(-e))) / (2 * h)
    assert np.max(np.abs(J - se3.se3_right_jacobian_inv(xi0))) < 1e-6
    # and exp itself: d exp(h e_k) / dh at 0 is the generator
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        d = (Pose.exp(e).matrix() - Pose.exp(-e).matrix()) / (2 * h)
        gen = np.zeros((4, 4))
        if k < 3:
            gen[:3, :3] = se3.skew(np.eye(3)[k])
        else:
            gen[k - 3, 3] = 1.0
        assert np.max(np.abs(d - gen)) < 1e-6


def test_right_jacobian_inverse_pair():
    rng = np.random.default_rng(5)
    for _ in range(50):
        xi = rng.normal(size=6)
        xi[:3] *= 2.5 / max(np.linalg.norm(xi[:3]), 2.5)
        prod = se3.se3_right_jacobian(xi) @ se3.se3_right_jacobian_inv(xi)
        assert np.allclose(prod, np.eye(6), atol=1e-10)


def round_trip_error_batch(n, seed):
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = rng.uniform(0, np.pi - 1e-5, size=(n, 1))
    q = se3.so3_exp(axis * angle)
    t = rng.uniform(-10, 10, size=(n, 3))
    q2, t2 = se3.se3_exp(se3.se3_log(q, t))
    R1, R2 = se3.quat_to_matrix(q), se3.quat_to_matrix(q2)
    return max(np.max(np.abs(R1 - R2)), np.max(np.abs(t - t2)))


def test_batch_kernels_agree_with_pose_methods():
    rng = np.random.default_rng(12)
    poses = [se3.random_pose(rng) for _ in range(200)]
    q = np.array([p.q for p in poses])
    t = np.array([p.t for p in poses])
    xi = se3.se3_log(q, t)
    for k, p in enumerate(poses):
        assert np.allclose(xi[k], p.log(), atol=1e-13, rtol=0)


def test_round_trip_1e5_poses():
    assert round_trip_error_batch(100_000, 6) < 1e-9


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3),
    st.lists(st.floats(-100.0, 100.0), min_size=3, max_size=3),
)
def test_exp_log_round_trip_property(phi, rho):
    phi = np.array(phi)
    if np.linalg.norm(phi) >= np.pi - 1e-6:
        phi = phi * (np.pi - 1e-3) / np.linalg.norm(phi)
    p = Pose.exp(np.concatenate([phi, rho]))
    assert Pose.exp(p.log()).allclose(p, atol=1e-9)


def test_pose_error_self_is_zero():
    p = rand_poses(7, 1)[0]
    assert se3.pose_error(p, p) == (0.0, 0.0)


def test_pose_error_pure_yaw():
    dt, dr = se3.pose_error(Pose.identity(), se3.yaw_pose(np.pi / 2))
    assert dt == 0.0
    assert abs(dr - 90.0) < 1e-12


def test_pose_error_matches_trace_formula():
    rng = np.random.default_rng(8)
    for _ in range(200):
        a, b = se3.random_pose(rng), se3.random_pose(rng)
        c = (np.trace(a.R.T @ b.R) - 1) / 2
        want = np.degrees(np.arccos(np.clip(c, -1, 1)))
        got = se3.pose_error(a, b)[1]
        # arccos is ill-conditioned near 0 and 180 degrees
        if 1e-3 < want < 179.9:
            assert abs(got - want) < 1e-9 * 180 / np.pi * 1e3


def test_pose_error_symmetry_and_triangle():
    rng = np.random.default_rng(9)
    for _ in range(500):
        a, b, c = (se3.random_pose(rng) for _ in range(3))
        ab = se3.pose_error(a, b)
        assert ab == pytest.approx(se3.pose_error(b, a), abs=1e-9)
        assert ab[1] <= se3.pose_error(a, c)[1] + se3.pose_error(c, b)[1] + 1e-9
        assert 0.0 <= ab[1] <= 180.0


def test_tuple_round_trip():
    p = rand_poses(10, 1)[0]
    q = Pose.from_tuple(p.to_tuple())
    assert np.array_equal(q.q, p.q) and np.array_equal(q.t, p.t)


def test_pose_is_immutable():
    p = Pose.identity()
    with pytest.raises(ValueError):
        p.t[0] = 1.0


def test_compose_covariance_matches_monte_carlo():
    rng = np.random.default_rng(11)
    a = se3.random_pose(rng, max_angle=0.5, max_translation=2.0)
    b = se3.random_pose(rng, max_angle=0.5, max_translation=2.0)
    Sa = np.diag([1e-4, 2e-4, 1e-4, 1e-3, 2e-3, 1e-3])
    Sb = np.diag([2e-4, 1e-4, 1e-4, 3e-3, 1e-3, 1e-3])
    want = se3.compose_covariance(Sa, Sb, b)
    n = 40000
    La, Lb = np.linalg.cholesky(Sa), np.linalg.cholesky(Sb)

    def perturb(p, L):
        dq, dt = se3.se3_exp(rng.normal(size=(n, 6)) @ L.T)
        return se3.quat_multiply(p.q[None], dq), p.t + dt @ p.R.T

    qa, ta = perturb(a, La)
    qb, tb = perturb(b, Lb)
    q = se3.quat_multiply(qa, qb)
    t = ta + np.einsum("nij,nj->ni", se3.quat_to_matrix(qa), tb)
    inv = (a @ b).inverse()
    q_rel = se3.quat_multiply(inv.q[None], q)
    t_rel = inv.t + t @ inv.R.T
    emp = np.cov(se3.se3_log(q_rel, t_rel).T)
    assert np.allclose(emp, want, atol=0.05 * np.max(np.abs(want)))


def test_covariance_checks():
    with pytest.raises(ValueError):
        se3.check_covariance(np.zeros((6, 6)))
    with pytest.raises(ValueError):
        se3.check_covariance(np.eye(5))
