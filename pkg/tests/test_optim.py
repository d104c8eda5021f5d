import numpy as np
import pytest

from mcslam.errors import DisconnectedGraph, TooFewEdges
from mcslam.geometry import SE3Pose, Sim3Transform, random_rotation, se3_exp, sim3_exp
from mcslam.optim import (BAProblem, HuberKernel, PoseEdges, PoseGraphProblem, bundle_adjust,
                          build_normal_equations, dense_lm_step, optimize_essential_graph,
                          optimize_pose, posegraph_cost, posegraph_residual_jacobians,
                          reprojection_residual_jacobian, solve_schur)


def unit(v):
    return v / np.linalg.norm(v)


def visible_point(r1, pose, rng, c=None):
    c = int(rng.integers(3)) if c is None else c
    X_cam = np.array([*rng.uniform(-2, 2, 2), rng.uniform(2, 8)])
    return c, pose.apply(r1.extrinsics[c].apply(X_cam))


def observations(r1, pose, rng, n):
    P, C = [], []
    for _ in range(n):
        c, p = visible_point(r1, pose, rng)
        P.append(p)
        C.append(c)
    P, C = np.array(P), np.array(C)
    uv = np.zeros((n, 2))
    for c in range(3):
        sel = C == c
        uv[sel] = r1.project_batch(c, pose, P[sel])[0]
    return PoseEdges(P, C, uv)


def test_huber_kernel():
    k = HuberKernel()
    assert k.e == pytest.approx(2.69)
    r = np.linspace(0, 10, 1001)
    w = k.weight(r)
    assert np.all(w[r <= k.e] == 1.0)
    np.testing.assert_allclose(w[r > k.e], k.e / r[r > k.e])
    assert np.all(w <= 1)
    assert abs(k.weight(k.e + 1e-12) - 1.0) < 1e-9


def test_perfect_observation_zero_residual(r1, rng):
    pose = SE3Pose(random_rotation(rng, 2), rng.normal(size=3))
    c, p = visible_point(r1, pose, rng)
    m, _ = r1.multicol_project(c, pose, p)
    r, _, _ = reprojection_residual_jacobian(pose, p, c, r1, m)
    assert np.abs(r).max() < 1e-9


def test_reprojection_jacobians_finite_differences(r1, rng):
    h = 1e-6
    worst = 0.0
    for _ in range(200):
        pose = SE3Pose(random_rotation(rng, 3.0), rng.uniform(-5, 5, 3))
        c, p = visible_point(r1, pose, rng)
        meas = np.zeros(2)
        r, Jp, Jl = reprojection_residual_jacobian(pose, p, c, r1, meas)
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            rp, *_ = reprojection_residual_jacobian(se3_exp(d).compose(pose), p, c, r1, meas)
            rm, *_ = reprojection_residual_jacobian(se3_exp(-d).compose(pose), p, c, r1, meas)
            fd = (rp - rm) / (2 * h)
            worst = max(worst, np.abs(fd - Jp[:, k]).max() / max(np.abs(fd).max(), 1.0))
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            rp, *_ = reprojection_residual_jacobian(pose, p + d, c, r1, meas)
            rm, *_ = reprojection_residual_jacobian(pose, p - d, c, r1, meas)
            fd = (rp - rm) / (2 * h)
            worst = max(worst, np.abs(fd - Jl[:, k]).max() / max(np.abs(fd).max(), 1.0))
    assert worst < 1e-5


def test_residual_gauge_invariance(r1, rng):
    pose = SE3Pose(random_rotation(rng, 2), rng.normal(size=3))
    c, p = visible_point(r1, pose, rng)
    meas = np.array([100.0, 200.0])
    r0, *_ = reprojection_residual_jacobian(pose, p, c, r1, meas)
    G = SE3Pose(random_rotation(rng, 3), rng.normal(size=3) * 10)
    r1_, *_ = reprojection_residual_jacobian(G.compose(pose), G.apply(p), c, r1, meas)
    assert np.abs(r0 - r1_).max() < 1e-9


def perturb(pose, rng, ang_deg, trans):
    d = np.r_[np.radians(ang_deg) * unit(rng.normal(size=3)), trans * unit(rng.normal(size=3))]
    return se3_exp(d).compose(pose)


def test_optimize_pose_noise_free(r1, rng):
    pose = SE3Pose(random_rotation(rng, 2), rng.normal(size=3))
    edges = observations(r1, pose, rng, 80)
    res = optimize_pose(perturb(pose, rng, 2, 0.02), edges, r1)
    assert np.abs(res.pose.matrix() - pose.matrix()).max() < 1e-7
    assert res.inliers.all()


def test_optimize_pose_contamination(r1, rng):
    pose = SE3Pose(random_rotation(rng, 2), rng.normal(size=3))
    edges = observations(r1, pose, rng, 100)
    bad = rng.choice(100, 20, replace=False)
    ang = rng.uniform(0, 2 * np.pi, 20)
    edges.uv[bad] += 50 * np.column_stack([np.cos(ang), np.sin(ang)])
    res = optimize_pose(perturb(pose, rng, 1, 0.01), edges, r1)
    assert not res.inliers[bad].any()
    good = np.setdiff1d(np.arange(100), bad)
    assert res.inliers[good].all()
    assert np.abs(res.pose.matrix() - pose.matrix()).max() < 1e-4


def test_optimize_pose_fixed_point_and_too_few(r1, rng):
    pose = SE3Pose(random_rotation(rng, 2), rng.normal(size=3))
    edges = observations(r1, pose, rng, 30)
    res = optimize_pose(pose, edges, r1)
    assert np.abs(res.pose.matrix() - pose.matrix()).max() < 1e-10
    with pytest.raises(TooFewEdges):
        optimize_pose(pose, PoseEdges(edges.points[:3], edges.cams[:3], edges.uv[:3]), r1)


def test_robust_cost_non_increasing(r1, rng):
    from mcslam.optim import lm_pose
    pose = SE3Pose(random_rotation(rng, 2), rng.normal(size=3))
    edges = observations(r1, pose, rng, 60)
    edges.uv[:10] += 30
    res = lm_pose(perturb(pose, rng, 3, 0.05), edges, r1, HuberKernel(), 30)
    assert all(a >= b for a, b in zip(res.costs, res.costs[1:]))


# ------------------------------------------------------------------ BA


def ba_fixture(r1, rng, n_poses, n_points, noise=0.0, step=0.3):
    poses = [SE3Pose(random_rotation(rng, 0.2), [step * k, 0.05 * k, 0.0])
             for k in range(n_poses)]
    pts = []
    while len(pts) < n_points:
        pts.append(rng.uniform([-8, -8, -2], [8, 8, 2]))
        if np.linalg.norm(pts[-1][:2]) < 3:
            pts.pop()
    pts = np.array(pts)
    ep, el, ec, euv = [], [], [], []
    for i, M in enumerate(poses):
        for c in range(3):
            uv, valid, _ = r1.project_batch(c, M, pts)
            for j in np.flatnonzero(valid):
                ep.append(i)
                el.append(j)
                ec.append(c)
                euv.append(uv[j] + rng.normal(scale=noise, size=2) if noise else uv[j])
    fixed = np.zeros(n_poses, dtype=bool)
    fixed[0] = True
    return poses, pts, BAProblem(list(poses), fixed, pts.copy(), np.array(ep), np.array(el),
                                 np.array(ec), np.array(euv))


def test_schur_matches_dense(r1, rng):
    _, _, prob = ba_fixture(r1, rng, 3, 30)
    prob.poses = [prob.poses[0]] + [perturb(p, rng, 1, 0.02) for p in prob.poses[1:]]
    prob.points = prob.points + rng.normal(scale=0.05, size=prob.points.shape)
    H, g, n_pose, *_ = build_normal_equations(prob, prob.poses, prob.points, HuberKernel(), r1)
    for mu in (0.0, 1e-3, 10.0):
        a = solve_schur(H, g, n_pose, mu)
        b = dense_lm_step(H, g, mu)
        assert np.abs(a - b).max() / np.abs(b).max() < 1e-8


def test_noise_free_ba_converges(r1, rng):
    poses, pts, prob = ba_fixture(r1, rng, 5, 200)
    prob.poses = [prob.poses[0]] + [perturb(p, rng, 0.5, 0.02) for p in prob.poses[1:]]
    prob.points = prob.points + rng.normal(scale=0.03, size=prob.points.shape)
    res = bundle_adjust(prob, r1, max_iterations=30)
    assert res.costs[-1] < 1e-12
    assert max(np.abs(a.matrix() - b.matrix()).max() for a, b in zip(res.poses, poses)) < 1e-6
    assert np.abs(res.points - pts).max() < 1e-5
    assert not res.outliers.any()


def test_noisy_ba_improves(r1, rng):
    # one fixed gauge pose plus 5 free ones; initial errors at triangulation level
    poses, pts, prob = ba_fixture(r1, rng, 6, 200, noise=0.5, step=0.8)
    prob.poses = [prob.poses[0]] + [perturb(p, rng, 1.0, 0.03) for p in prob.poses[1:]]
    prob.points = prob.points + rng.normal(scale=0.15, size=prob.points.shape)
    pts_before = np.sqrt(np.mean(np.sum((prob.points - pts) ** 2, 1)))
    res = bundle_adjust(prob, r1)
    assert res.costs[-1] < res.costs[0]
    pts_after = np.sqrt(np.mean(np.sum((res.points - pts) ** 2, 1)))
    assert pts_after < pts_before


# ------------------------------------------------------------ pose graph


def rand_sim3(rng, s=(0.7, 1.4)):
    return Sim3Transform(rng.uniform(*s), random_rotation(rng, 2.5), rng.normal(size=3))


def test_posegraph_jacobians(rng):
    h = 1e-6
    worst = 0.0
    for _ in range(200):
        dS, Si, Sj = rand_sim3(rng), rand_sim3(rng), rand_sim3(rng)
        # keep the residual away from the pi-rotation cut
        Sj = sim3_exp(rng.normal(scale=0.3, size=7)).compose(dS.compose(Si))
        r, Ji, Jj = posegraph_residual_jacobians(dS, Si, Sj)
        for k in range(7):
            d = np.zeros(7)
            d[k] = h
            for J, which in ((Ji, 0), (Jj, 1)):
                a = [Si, Sj]
                b = [Si, Sj]
                a[which] = sim3_exp(d).compose(a[which])
                b[which] = sim3_exp(-d).compose(b[which])
                rp = posegraph_residual_jacobians(dS, *a)[0]
                rm = posegraph_residual_jacobians(dS, *b)[0]
                fd = (rp - rm) / (2 * h)
                worst = max(worst, np.abs(fd - J[:, k]).max() / max(np.abs(fd).max(), 1.0))
    assert worst < 1e-5


def chain(rng, n):
    V = [Sim3Transform.identity()]
    for _ in range(n - 1):
        V.append(Sim3Transform.from_rigid(se3_exp(rng.normal(scale=0.2, size=6))).compose(V[-1]))
    edges = [(i, i + 1, V[i + 1].compose(V[i].inverse())) for i in range(n - 1)]
    return V, edges


def test_consistent_graph_unchanged(rng):
    V, edges = chain(rng, 10)
    fixed = np.zeros(10, dtype=bool)
    fixed[0] = True
    loop = (0, 9, V[9].compose(V[0].inverse()))
    out = optimize_essential_graph(PoseGraphProblem(V, fixed, edges), loop)
    for a, b in zip(out, V):
        assert np.abs(a.matrix() - b.matrix()).max() < 1e-9


def test_cost_never_increases(rng):
    for seed in range(20):
        r = np.random.default_rng(seed)
        V, edges = chain(r, 8)
        noisy = [V[0]] + [sim3_exp(r.normal(scale=0.05, size=7)).compose(v) for v in V[1:]]
        fixed = np.zeros(8, dtype=bool)
        fixed[0] = True
        prob = PoseGraphProblem(noisy, fixed, edges + [(0, 7, V[7].compose(V[0].inverse()))])
        before = posegraph_cost(prob)
        out = optimize_essential_graph(prob)
        assert posegraph_cost(prob, out) <= before


def test_disconnected_graph(rng):
    V, edges = chain(rng, 5)
    fixed = np.zeros(5, dtype=bool)
    fixed[0] = True
    with pytest.raises(DisconnectedGraph):
        optimize_essential_graph(PoseGraphProblem(V, fixed, edges[:2]))
