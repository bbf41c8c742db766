import numpy as np
import pytest

from topomerge import se3
from topomerge.errors import SingularSystem
from topomerge.evalkit import ate_rmse
from topomerge.posegraph import (
    Factor,
    FactorGraph,
    RobustKernelConfig,
    export_graph,
    fuse_poses,
    huber_cost,
    huber_weight,
    import_graph,
    integrate_chain,
    optimize,
    residual,
    residual_jacobians,
)
from topomerge.se3 import Pose

COV = np.diag([1e-4] * 3 + [1e-2] * 3)


def test_consistent_factor_has_zero_residual():
    rng = np.random.default_rng(0)
    Ti, Z = se3.random_pose(rng), se3.random_pose(rng, max_angle=1.0)
    f = Factor(0, 1, Z, COV)
    assert np.allclose(residual(f, {0: Ti, 1: Ti @ Z}), 0, atol=1e-12)


def test_residual_sign_convention():
    f = Factor(0, 1, se3.yaw_pose(0, (1.0, 0, 0)), COV)
    r = residual(f, {0: Pose.identity(), 1: Pose.identity()})
    assert np.allclose(r, [0, 0, 0, -1, 0, 0], atol=1e-15)


def test_residual_gauge_symmetry():
    rng = np.random.default_rng(1)
    Ti, Tj, Z, G = (se3.random_pose(rng, max_angle=1.0) for _ in range(4))
    f = Factor(0, 1, Z, COV)
    a = np.linalg.norm(residual(f, {0: Ti, 1: Tj}))
    b = np.linalg.norm(residual(f, {0: G @ Ti, 1: G @ Tj}))
    assert abs(a - b) < 1e-10


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(2)
    h = 1e-6
    for _ in range(30):
        Ti, Tj = se3.random_pose(rng, max_angle=2.0), se3.random_pose(rng, max_angle=2.0)
        Z = se3.relative(Ti, Tj) @ Pose.exp(rng.normal(0, 0.3, 6))
        for f in (Factor(0, 1, Z, COV), Factor(None, 1, Tj @ Pose.exp(rng.normal(0, 0.3, 6)), COV, "prior")):
            poses = {0: Ti, 1: Tj}
            _, Ji, Jj = residual_jacobians(f, poses)
            for key, J in ((0, Ji), (1, Jj)):
                if J is None:
                    continue
                num = np.zeros((6, 6))
                for k in range(6):
                    e = np.zeros(6)
                    e[k] = h
                    p, m = dict(poses), dict(poses)
                    p[key] = poses[key] @ Pose.exp(e)
                    m[key] = poses[key] @ Pose.exp(-e)
                    num[:, k] = (residual(f, p) - residual(f, m)) / (2 * h)
                assert np.max(np.abs(num - J)) <= 1e-5 * max(1.0, np.max(np.abs(J)))


def test_huber_weight_definition():
    rng = np.random.default_rng(3)
    n = rng.uniform(0, 5, 1000)
    w = huber_weight(n, 1.3)
    want = np.array([1.0 if x <= 1.3 else 1.3 / x for x in n])
    assert np.array_equal(w, want)
    assert huber_cost(4.0, 1.0) == pytest.approx(3.0)
    assert huber_cost(0.25, 1.0) == 0.25


def test_exact_chain_reaches_zero_chi2():
    rng = np.random.default_rng(4)
    Z1, Z2 = se3.random_pose(rng, max_angle=1.0), se3.random_pose(rng, max_angle=1.0)
    g = FactorGraph({0: Pose.identity(), 1: se3.random_pose(rng, 0.5, 1.0), 2: se3.random_pose(rng, 0.5, 1.0)},
                    gauge={0})
    g.add_factor(Factor(0, 1, Z1, COV))
    g.add_factor(Factor(1, 2, Z2, COV))
    res = optimize(g, max_iters=50)
    assert res.final_chi2 < 1e-18 and res.converged
    assert res.poses[1].allclose(Z1, 1e-9)
    assert res.poses[2].allclose(Z1 @ Z2, 1e-9)
    assert res.poses[0] is g.variables[0]


def test_two_node_closed_form():
    rng = np.random.default_rng(5)
    T1, Z = se3.random_pose(rng), se3.random_pose(rng, max_angle=2.0)
    g = FactorGraph({1: T1, 2: se3.random_pose(rng)}, gauge={1})
    g.add_factor(Factor(1, 2, Z, COV))
    res = optimize(g)
    want = (T1 @ Z).matrix()
    assert np.max(np.abs(res.poses[2].matrix() - want)) < 1e-10


def test_missing_anchor_is_singular():
    g = FactorGraph({0: Pose.identity(), 1: Pose.identity()})
    g.add_factor(Factor(0, 1, Pose.identity(), COV))
    with pytest.raises(SingularSystem):
        optimize(g)
    g2 = FactorGraph({0: Pose.identity(), 1: Pose.identity(), 2: Pose.identity()}, gauge={0})
    g2.add_factor(Factor(0, 1, Pose.identity(), COV))
    with pytest.raises(SingularSystem):
        optimize(g2)


def square_loop(rng, n_side=25, side=20.0, noise=0.01, rot_noise=5e-3):
    """Closed square path; returns truth, noisy odometry graph and loop-closure factor."""
    truth = {}
    p = Pose.identity()
    step = side / n_side
    k = 0
    for _ in range(4):
        for _ in range(n_side):
            truth[k] = p
            p = p @ se3.yaw_pose(0, (step, 0, 0))
            k += 1
        p = p @ se3.yaw_pose(np.pi / 2)
    n = k
    sig_t = noise * np.sqrt(step)
    sig_r = rot_noise * np.sqrt(step)
    cov = np.diag([sig_r**2] * 3 + [sig_t**2] * 3) + np.eye(6) * 1e-12
    L = np.linalg.cholesky(cov)
    factors = []
    for a in range(n - 1):
        Z = se3.relative(truth[a], truth[a + 1]) @ Pose.exp(L @ rng.normal(size=6))
        factors.append(Factor(a, a + 1, Z, cov))
    lc = Factor(n - 1, 0, se3.relative(truth[n - 1], truth[0]), cov, "loop_closure")
    return truth, factors, lc


def loop_trial(seed):
    rng = np.random.default_rng(seed)
    truth, factors, lc = square_loop(rng)
    init = integrate_chain(factors)
    g = FactorGraph(dict(init), gauge={0})
    for f in factors + [lc]:
        g.add_factor(f)
    res = optimize(g, RobustKernelConfig(huber_delta=1.0))
    return ate_rmse(init, truth)[0], ate_rmse(res.poses, truth)[0], res


def test_noisy_loop_improves_ate_few_seeds():
    for seed in range(5):
        before, after, res = loop_trial(seed)
        assert after < before
        assert res.final_chi2 <= res.initial_chi2


@pytest.mark.slow
def test_noisy_loop_improves_ate_100_trials():
    wins = 0
    for seed in range(100):
        before, after, _ = loop_trial(seed)
        wins += after < before
    assert wins == 100


def test_gauge_invariance():
    rng = np.random.default_rng(6)
    truth, factors, lc = square_loop(rng, n_side=5)
    init = integrate_chain(factors)
    G = se3.random_pose(rng)
    g1 = FactorGraph(dict(init), gauge={0})
    g2 = FactorGraph({k: G @ v for k, v in init.items()}, gauge={0})
    for f in factors + [lc]:
        g1.add_factor(f)
        g2.add_factor(f)
    r1, r2 = optimize(g1), optimize(g2)
    for k in r1.poses:
        assert (G @ r1.poses[k]).allclose(r2.poses[k], atol=1e-8)


def ladder(rng, n=30, step=2.0, gap=3.0, noise=0.01, rot_noise=5e-3):
    """Two parallel traversals tied by a loop closure at every rung."""
    truth = {}
    for k in range(n):
        truth[k] = se3.yaw_pose(0, (k * step, 0, 0))
        truth[100 + k] = se3.yaw_pose(0, (k * step, gap, 0))
    cov = np.diag([rot_noise**2 * step] * 3 + [noise**2 * step] * 3)
    L = np.linalg.cholesky(cov)

    def noisy(a, b, kind="odometry"):
        return Factor(a, b, se3.relative(truth[a], truth[b]) @ Pose.exp(L @ rng.normal(size=6)), cov, kind)

    factors = [noisy(off + k, off + k + 1) for off in (0, 100) for k in range(n - 1)]
    factors += [noisy(k, 100 + k, "loop_closure") for k in range(n)]
    return truth, factors, noisy


def test_outlier_robustness():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        truth, factors, noisy = ladder(rng)
        init = integrate_chain(factors)

        def solve(extra):
            g = FactorGraph(dict(init), gauge={0})
            for f in factors + extra:
                g.add_factor(f)
            return optimize(g, RobustKernelConfig(huber_delta=1.0)).poses

        base = solve([])
        a, b = 10, 120
        honest = noisy(a, b, "loop_closure")
        gross = Factor(a, b, se3.relative(truth[a], truth[b]) @ se3.yaw_pose(0, (10.0, 0, 0)),
                       honest.covariance, "loop_closure")
        moved_h, moved_g = solve([honest]), solve([gross])
        d_honest = max(np.linalg.norm(moved_h[k].t - base[k].t) for k in base)
        d_gross = max(np.linalg.norm(moved_g[k].t - base[k].t) for k in base)
        assert d_gross < 5 * d_honest


def test_fuse_priors_consistent_with_odometry():
    rng = np.random.default_rng(8)
    truth, factors, _ = square_loop(rng, n_side=5, noise=0.0, rot_noise=0.0)
    exact = [Factor(f.i, f.j, se3.relative(truth[f.i], truth[f.j]), f.covariance) for f in factors]
    last = max(truth)
    out = fuse_poses(exact, [(0, truth[0], COV), (last, truth[last], COV)])
    for k in truth:
        assert out[k].allclose(truth[k], atol=1e-8)


def test_fuse_single_prior_anchors_rigidly():
    rng = np.random.default_rng(9)
    truth, factors, _ = square_loop(rng, n_side=5)
    G = se3.random_pose(rng)
    odo = integrate_chain(factors)
    out = fuse_poses(factors, [(0, G, COV)])
    for k in odo:
        assert out[k].allclose(G @ odo[k], atol=1e-8)


def test_fuse_drift_with_endpoint_priors():
    rng = np.random.default_rng(10)
    wins = 0
    for _ in range(10):
        truth, factors, _ = square_loop(rng, n_side=10, noise=0.03)
        last = max(truth)
        tight = np.diag([1e-10] * 3 + [1e-10] * 3)
        out = fuse_poses(factors, [(0, truth[0], tight), (last, truth[last], tight)])
        raw = integrate_chain(factors)
        assert np.linalg.norm(out[last].t - truth[last].t) < 1e-6
        e_fused = np.mean([np.linalg.norm(out[k].t - truth[k].t) for k in truth])
        e_raw = np.mean([np.linalg.norm(raw[k].t - truth[k].t) for k in truth])
        wins += e_fused < e_raw
    assert wins >= 9


def test_g2o_round_trip():
    rng = np.random.default_rng(11)
    truth, factors, lc = square_loop(rng, n_side=3)
    g = FactorGraph(integrate_chain(factors), gauge={0})
    for f in factors + [lc]:
        g.add_factor(f)
    g.add_factor(Factor(None, 3, truth[3], COV, "prior"))
    text = export_graph(g)
    back = import_graph(text)
    assert export_graph(back) == text
    assert len(back.factors) == len(g.factors) and back.gauge == {0}
