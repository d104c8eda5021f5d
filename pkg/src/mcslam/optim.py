"""Robust Levenberg-Marquardt solvers: pose-only, bundle adjustment, Sim(3) pose graph."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve

from .errors import DisconnectedGraph, ProjectionInvalid, TooFewEdges
from .geometry import SE3Pose, Sim3Transform, se3_exp, sim3_exp, sim3_left_jacobian, sim3_log

log = logging.getLogger(__name__)

HUBER_SIGMA = 2.0
HUBER_E = 1.345 * HUBER_SIGMA


@dataclass(frozen=True)
class HuberKernel:
    e: float = HUBER_E

    def weight(self, r):
        r = np.abs(np.asarray(r, dtype=float))
        return np.where(r <= self.e, 1.0, self.e / np.maximum(r, 1e-300))

    def rho(self, r):
        """Huber cost with ``rho(r) = r^2`` inside the tuning constant."""
        r = np.abs(np.asarray(r, dtype=float))
        return np.where(r <= self.e, r * r, 2.0 * self.e * r - self.e * self.e)


def _cost(norms, kernel):
    return float(np.sum(norms**2)) if kernel is None else float(np.sum(kernel.rho(norms)))


# ----------------------------------------------------------- reprojection


def _rig_arrays(mcs):
    cached = getattr(mcs, "_rig_arrays_cache", None)
    if cached is None:
        RcT = np.stack([M.rotation.T for M in mcs.extrinsics])
        tc = np.stack([M.translation for M in mcs.extrinsics])
        cached = (RcT, tc)
        object.__setattr__(mcs, "_rig_arrays_cache", cached)
    return cached


def _intrinsic_groups(mcs):
    cached = getattr(mcs, "_intrinsic_groups_cache", None)
    if cached is None:
        groups: dict[int, tuple] = {}
        for c, cam in enumerate(mcs.cameras):
            groups.setdefault(id(cam), (cam, []))[1].append(c)
        cached = [(cam, np.array(m)) for cam, m in groups.values()]
        object.__setattr__(mcs, "_intrinsic_groups_cache", cached)
    return cached


def reproject_batch(M_t: SE3Pose, P: np.ndarray, cams: np.ndarray, uv: np.ndarray, mcs,
                    jacobians: bool = True):
    """Residuals (N, 2), pose Jacobians (N, 2, 6), point Jacobians (N, 2, 3), valid mask.

    Pose Jacobians are for the left perturbation ``M_t <- exp(delta) M_t``
    with ``delta = (omega, upsilon)``.
    """
    return _reproject(M_t.rotation, M_t.translation, P, cams, uv, mcs, jacobians)


def _reproject(R, t, P, cams, uv, mcs, jacobians):
    """Shared core; ``R``/``t`` are one pose (3, 3)/(3,) or per-edge (N, 3, 3)/(N, 3)."""
    P = np.atleast_2d(P)
    cams = np.asarray(cams, dtype=np.int64)
    N = P.shape[0]
    res = np.zeros((N, 2))
    Jpose = np.zeros((N, 2, 6)) if jacobians else None
    Jpt = np.zeros((N, 2, 3)) if jacobians else None
    valid = np.zeros(N, dtype=bool)
    if N == 0:
        return res, Jpose, Jpt, valid
    RcT, tc = _rig_arrays(mcs)
    per_edge = R.ndim == 3
    if per_edge:
        body = np.einsum("nji,nj->ni", R, P - t)
        A = RcT[cams] @ R.transpose(0, 2, 1)               # d p_cam / d p
    else:
        body = (P - t) @ R
        A = RcT[cams] @ R.T
    X = np.einsum("nij,nj->ni", RcT[cams], body - tc[cams])
    # cameras sharing one intrinsic model are projected in a single call
    for cam, members in _intrinsic_groups(mcs):
        sel = np.flatnonzero(np.isin(cams, members)) if len(members) > 1 else \
            np.flatnonzero(cams == members[0])
        if sel.size == 0:
            continue
        Xs = X[sel]
        valid[sel] = (np.linalg.norm(Xs, axis=1) > 1e-12) & \
            (cam.ray_angles(Xs) <= cam.theta_max + 1e-9)
        if jacobians:
            proj, Jp = cam.project_with_jacobian(Xs)
            JA = Jp @ A[sel]
            Jpt[sel] = JA
            Jpose[sel, :, :3] = np.cross(JA, P[sel][:, None, :])
            Jpose[sel, :, 3:] = -JA
        else:
            proj = cam.project_points(Xs)
        res[sel] = proj - uv[sel]
    return res, Jpose, Jpt, valid


def reprojection_residual_jacobian(M_t: SE3Pose, p, c: int, mcs, measured):
    """Single-edge residual (projected - measured) with pose and point Jacobians."""
    uv = measured.uv if hasattr(measured, "uv") else np.asarray(measured, dtype=float)
    r, Jp, Jl, valid = reproject_batch(M_t, np.asarray(p, dtype=float)[None], np.array([c]),
                                       uv[None], mcs)
    if not valid[0]:
        raise ProjectionInvalid("point does not project into the camera")
    return r[0], Jp[0], Jl[0]


# -------------------------------------------------------------- pose only


@dataclass
class PoseEdges:
    points: np.ndarray
    cams: np.ndarray
    uv: np.ndarray


@dataclass
class PoseResult:
    pose: SE3Pose
    inliers: np.ndarray
    rmse_initial: float
    rmse_final: float
    iterations: int
    converged: bool
    costs: list = field(default_factory=list)


def lm_pose(initial: SE3Pose, edges: PoseEdges, mcs, kernel: HuberKernel | None = None,
            max_iterations: int = 10, active: np.ndarray | None = None) -> PoseResult:
    """Levenberg-Marquardt over the 6-DoF body pose; IRLS when a kernel is given."""
    n = len(edges.cams)
    active = np.ones(n, dtype=bool) if active is None else active.copy()
    pose = initial
    r, Jp, _, valid = reproject_batch(pose, edges.points, edges.cams, edges.uv, mcs)
    use = active & valid
    norms = np.linalg.norm(r, axis=1)
    rmse0 = float(np.sqrt(np.mean(norms[use]**2))) if use.any() else np.inf
    cost = _cost(norms[use], kernel)
    costs = [cost]
    mu = None
    it = 0
    converged = False
    while it < max_iterations:
        it += 1
        w = np.ones(n) if kernel is None else kernel.weight(norms)
        w = np.where(use, w, 0.0)
        J2 = Jp.reshape(-1, 6)
        WJ = J2 * np.repeat(w, 2)[:, None]
        H = WJ.T @ J2
        g = WJ.T @ r.ravel()
        if mu is None:
            mu = 1e-4 * max(np.max(np.diag(H)), 1e-12)
        if np.abs(g).max() < 1e-14 * max(1.0, cost):
            converged = True
            break
        accepted = False
        while not accepted and mu < 1e32:
            step = -np.linalg.solve(H + mu * np.eye(6), g)
            cand = se3_exp(step).compose(pose)
            r2, Jp2, _, valid2 = reproject_batch(cand, edges.points, edges.cams, edges.uv, mcs)
            use2 = active & valid2
            norms2 = np.linalg.norm(r2, axis=1)
            cost2 = _cost(norms2[use2], kernel)
            if use2.sum() >= use.sum() and cost2 <= cost:
                accepted = True
                pose, r, Jp, use, norms = cand, r2, Jp2, use2, norms2
                rel = (cost - cost2) / max(cost, 1e-300)
                cost = cost2
                costs.append(cost)
                mu = max(mu / 10.0, 1e-12)
                if np.linalg.norm(step) < 1e-12 or rel < 1e-12:
                    converged = True
            else:
                mu *= 10.0
        if not accepted or converged:
            converged = True
            break
    rmse = float(np.sqrt(np.mean(norms[use]**2))) if use.any() else np.inf
    inl = use.copy()
    if kernel is not None:
        inl &= norms <= kernel.e
    return PoseResult(pose, inl, rmse0, rmse, it, converged, costs)


def optimize_pose(initial: SE3Pose, edges: PoseEdges, mcs, kernel: HuberKernel = HuberKernel(),
                  iterations: int = 10, rounds: int = 4, min_edges: int = 4) -> PoseResult:
    """Robust pose-only optimization on fixed map points.

    Each round runs IRLS-LM on the edges currently classified as inliers,
    then re-classifies every edge against the Huber constant; the mask of
    the last round is returned.
    """
    if len(edges.cams) < min_edges:
        raise TooFewEdges(f"{len(edges.cams)} edges, need {min_edges}")
    active = np.ones(len(edges.cams), dtype=bool)
    pose = initial
    res = None
    total = 0
    for k in range(rounds):
        res = lm_pose(pose, edges, mcs, kernel, iterations, active)
        total += res.iterations
        pose = res.pose
        r, _, _, valid = reproject_batch(pose, edges.points, edges.cams, edges.uv, mcs,
                                         jacobians=False)
        new_active = valid & (np.linalg.norm(r, axis=1) <= kernel.e)
        if new_active.sum() < min_edges:
            break
        if np.array_equal(new_active, active) and k > 0:
            active = new_active
            break
        active = new_active
    res.inliers = active
    res.iterations = total
    return res


# ------------------------------------------------------ bundle adjustment


@dataclass
class BAProblem:
    """Poses (body->world), points, and observation edges (pose, point, camera, uv)."""

    poses: list
    fixed: np.ndarray
    points: np.ndarray
    edge_pose: np.ndarray
    edge_point: np.ndarray
    edge_cam: np.ndarray
    edge_uv: np.ndarray


@dataclass
class BAResult:
    poses: list
    points: np.ndarray
    outliers: np.ndarray
    costs: list
    iterations: int


def _pose_arrays(poses):
    return (np.stack([p.rotation for p in poses]), np.stack([p.translation for p in poses]))


def _ba_linearize(problem: BAProblem, poses, points, kernel, mcs, jacobians: bool = True):
    R, t = _pose_arrays(poses)
    ep = problem.edge_pose
    res, Jp, Jl, valid = _reproject(R[ep], t[ep], points[problem.edge_point],
                                    problem.edge_cam, problem.edge_uv, mcs, jacobians)
    norms = np.linalg.norm(res, axis=1)
    w = np.ones(len(ep)) if kernel is None else kernel.weight(norms)
    w = np.where(valid, w, 0.0)
    return res, Jp, Jl, valid, norms, w


def ba_cost(problem: BAProblem, poses, points, kernel, mcs):
    """(robust cost, valid mask, residual norms) without Jacobians."""
    _, _, _, valid, norms, _ = _ba_linearize(problem, poses, points, kernel, mcs, False)
    return _cost(norms[valid], kernel), valid, norms


def _block_entries(blocks, r0, c0):
    """COO (rows, cols, data) for dense blocks (n, a, b) placed at (r0, c0)."""
    n, a, b = blocks.shape
    rows = np.broadcast_to(r0[:, None, None] + np.arange(a)[None, :, None], blocks.shape)
    cols = np.broadcast_to(c0[:, None, None] + np.arange(b)[None, None, :], blocks.shape)
    return rows.ravel(), cols.ravel(), blocks.ravel()


def build_normal_equations(problem: BAProblem, poses, points, kernel, mcs):
    """Sparse (H, g) over [free poses (6 each), points (3 each)] and the cost."""
    res, Jp, Jl, valid, norms, w = _ba_linearize(problem, poses, points, kernel, mcs)
    free_idx = -np.ones(len(poses), dtype=int)
    free = np.flatnonzero(~problem.fixed)
    free_idx[free] = np.arange(free.size)
    n_pose = 6 * free.size
    L = points.shape[0]
    n = n_pose + 3 * L
    wJl = Jl * w[:, None, None]
    g = np.zeros(n)
    pcol = n_pose + 3 * problem.edge_point
    ll = wJl.transpose(0, 2, 1) @ Jl
    gl = (wJl.transpose(0, 2, 1) @ res[:, :, None])[:, :, 0]
    np.add.at(g, pcol[:, None] + np.arange(3)[None], gl)
    parts = [_block_entries(ll, pcol, pcol)]
    pe = free_idx[problem.edge_pose]
    m = pe >= 0
    if m.any():
        wJp = Jp[m] * w[m, None, None]
        prow = 6 * pe[m]
        wJpT = wJp.transpose(0, 2, 1)
        pp = wJpT @ Jp[m]
        pl = wJpT @ Jl[m]
        np.add.at(g, prow[:, None] + np.arange(6)[None], (wJpT @ res[m][:, :, None])[:, :, 0])
        parts += [_block_entries(pp, prow, prow), _block_entries(pl, prow, pcol[m]),
                  _block_entries(pl.transpose(0, 2, 1), pcol[m], prow)]
    rr, cc, dd = (np.concatenate(x) for x in zip(*parts))
    H = sp.csr_matrix((dd, (rr, cc)), shape=(n, n))
    return H, g, n_pose, _cost(norms[valid], kernel), valid, norms


def solve_schur(H, g, n_pose: int, mu: float = 0.0) -> np.ndarray:
    """Solve ``(H + mu I) x = -g`` by eliminating the 3x3 point blocks."""
    n = H.shape[0]
    L = (n - n_pose) // 3
    H = H.tocsr()
    Hpp = H[:n_pose, :n_pose].toarray() + mu * np.eye(n_pose)
    Hpl = H[:n_pose, n_pose:]
    Hll = H[n_pose:, n_pose:]
    # block-diagonal point Hessian, inverted block by block
    blocks = np.zeros((L, 3, 3))
    coo = Hll.tocoo()
    bi = coo.row // 3
    same = bi == coo.col // 3
    np.add.at(blocks, (bi[same], coo.row[same] % 3, coo.col[same] % 3), coo.data[same])
    blocks += mu * np.eye(3)[None]
    # guard points without usable observations
    det = np.linalg.det(blocks)
    bad = np.abs(det) < 1e-18
    blocks[bad] = np.eye(3)
    inv = np.linalg.inv(blocks)
    inv[bad] = 0.0
    ridx = np.repeat(np.arange(3 * L).reshape(L, 3, 1), 3, axis=2)
    cidx = np.repeat(np.arange(3 * L).reshape(L, 1, 3), 3, axis=1)
    Hll_inv = sp.csr_matrix((inv.ravel(), (ridx.ravel(), cidx.ravel())), shape=(3 * L, 3 * L))
    gp, gl = g[:n_pose], g[n_pose:]
    if n_pose:
        if n_pose * 3 * L <= 4e7:
            # dense pose rows are cheaper than sparse products at local-window sizes
            Hd = Hpl.toarray()
            Y = (Hd.reshape(n_pose, L, 3).transpose(1, 0, 2) @ inv).transpose(1, 0, 2)
            Y = Y.reshape(n_pose, 3 * L)
            S = Hpp - Y @ Hd.T
        else:
            Y = Hpl @ Hll_inv
            S = Hpp - (Y @ Hpl.T).toarray()
        rhs = -gp + Y @ gl
        try:
            dp = cho_solve(cho_factor(S), rhs)
        except np.linalg.LinAlgError:
            dp = np.linalg.lstsq(S, rhs, rcond=None)[0]
    else:
        dp = np.zeros(0)
    dl = Hll_inv @ (-gl - Hpl.T @ dp)
    return np.concatenate([dp, dl])


def _apply_ba_step(problem, poses, points, step, n_pose):
    free = np.flatnonzero(~problem.fixed)
    new_poses = list(poses)
    for k, i in enumerate(free):
        new_poses[i] = se3_exp(step[6 * k:6 * k + 6]).compose(poses[i])
    new_points = points + step[n_pose:].reshape(-1, 3)
    return new_poses, new_points


def bundle_adjust(problem: BAProblem, mcs, kernel: HuberKernel | None = HuberKernel(),
                  max_iterations: int = 20, tol: float = 1e-14) -> BAResult:
    """LM with Schur-complement steps. Outliers are flagged after the last iteration."""
    poses, points = list(problem.poses), np.array(problem.points, dtype=float)
    H, g, n_pose, cost, valid, norms = build_normal_equations(problem, poses, points, kernel, mcs)
    costs = [cost]
    mu = 1e-4 * max(H.diagonal().max() if H.nnz else 1.0, 1e-12)
    it = 0
    while it < max_iterations:
        it += 1
        if cost < 1e-30 or np.abs(g).max() < 1e-15:
            break
        accepted = False
        while not accepted and mu < 1e32:
            step = solve_schur(H, g, n_pose, mu)
            cp, cl = _apply_ba_step(problem, poses, points, step, n_pose)
            cost2, valid2, _ = ba_cost(problem, cp, cl, kernel, mcs)
            if cost2 <= cost and valid2.sum() >= valid.sum():
                accepted = True
                rel = (cost - cost2) / max(cost, 1e-300)
                poses, points = cp, cl
                H, g, _, cost, valid, norms = build_normal_equations(problem, poses, points,
                                                                     kernel, mcs)
                costs.append(cost)
                mu = max(mu / 10.0, 1e-15)
            else:
                mu *= 10.0
        if not accepted or rel < tol:
            break
    thr = kernel.e if kernel is not None else np.inf
    outliers = ~valid | (norms > thr)
    return BAResult(poses, points, outliers, costs, it)


def dense_lm_step(H, g, mu: float = 0.0) -> np.ndarray:
    """Reference dense solve of ``(H + mu I) x = -g`` (for verification)."""
    Hd = H.toarray() if sp.issparse(H) else np.asarray(H)
    n = Hd.shape[0]
    return np.linalg.solve(Hd + mu * np.eye(n), -g)


# ----------------------------------------------------------- pose graph


def _jl_inv(r):
    return np.linalg.inv(sim3_left_jacobian(r))


def posegraph_residual_jacobians(dS: Sim3Transform, Si: Sim3Transform, Sj: Sim3Transform):
    """``r = log(dS Si Sj^-1)`` and its Jacobians for left perturbations of Si, Sj."""
    Ei = dS.compose(Si)
    E = Ei.compose(Sj.inverse())
    r = sim3_log(E)
    Jinv = _jl_inv(r)
    return r, Jinv @ dS.adjoint(), -Jinv @ E.adjoint()


@dataclass
class PoseGraphProblem:
    """Sim(3) vertices (world->body) and relative edges ``dS_ij ~ S_j S_i^-1``."""

    vertices: list
    fixed: np.ndarray
    edges: list  # (i, j, Sim3Transform)


def posegraph_cost(problem: PoseGraphProblem, vertices=None) -> float:
    V = problem.vertices if vertices is None else vertices
    total = 0.0
    for i, j, dS in problem.edges:
        r = sim3_log(dS.compose(V[i]).compose(V[j].inverse()))
        total += float(r @ r)
    return total


def _check_connected(problem: PoseGraphProblem):
    n = len(problem.vertices)
    adj = [[] for _ in range(n)]
    for i, j, _ in problem.edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = set(np.flatnonzero(problem.fixed).tolist())
    if not seen:
        raise DisconnectedGraph("no fixed vertex")
    stack = list(seen)
    while stack:
        a = stack.pop()
        for b in adj[a]:
            if b not in seen:
                seen.add(b)
                stack.append(b)
    if len(seen) != n:
        raise DisconnectedGraph(f"{n - len(seen)} vertices unreachable from a fixed vertex")


def optimize_essential_graph(problem: PoseGraphProblem, loop_edge=None,
                             iterations: int = 50) -> list:
    """LM over 7-DoF vertices minimizing the sum of squared Sim(3) edge residuals."""
    if loop_edge is not None:
        problem = PoseGraphProblem(problem.vertices, problem.fixed,
                                   list(problem.edges) + [loop_edge])
    _check_connected(problem)
    V = list(problem.vertices)
    free = np.flatnonzero(~np.asarray(problem.fixed))
    fidx = -np.ones(len(V), dtype=int)
    fidx[free] = np.arange(free.size)
    n = 7 * free.size

    def linearize(Vs):
        H = np.zeros((n, n))
        g = np.zeros(n)
        cost = 0.0
        for i, j, dS in problem.edges:
            r, Ji, Jj = posegraph_residual_jacobians(dS, Vs[i], Vs[j])
            cost += float(r @ r)
            blocks = [(fidx[i], Ji), (fidx[j], Jj)]
            for a, Ja in blocks:
                if a < 0:
                    continue
                g[7 * a:7 * a + 7] += Ja.T @ r
                for b, Jb in blocks:
                    if b < 0:
                        continue
                    H[7 * a:7 * a + 7, 7 * b:7 * b + 7] += Ja.T @ Jb
        return H, g, cost

    H, g, cost = linearize(V)
    if n == 0:
        return V
    mu = 1e-4 * max(np.diag(H).max(), 1e-12)
    for _ in range(iterations):
        if cost < 1e-30 or np.abs(g).max() < 1e-15:
            break
        accepted = False
        while not accepted and mu < 1e32:
            step = -np.linalg.solve(H + mu * np.eye(n), g)
            cand = list(V)
            for k, i in enumerate(free):
                cand[i] = sim3_exp(step[7 * k:7 * k + 7]).compose(V[i])
            H2, g2, cost2 = linearize(cand)
            if cost2 <= cost:
                accepted = True
                rel = (cost - cost2) / max(cost, 1e-300)
                V, H, g, cost = cand, H2, g2, cost2
                mu = max(mu / 10.0, 1e-15)
            else:
                mu *= 10.0
        if not accepted or rel < 1e-14:
            break
    return V
