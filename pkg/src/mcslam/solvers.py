"""Geometric estimators and a generic RANSAC engine."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import (AmbiguousDecomposition, CollinearPoints, DegenerateConfiguration,
                     InsufficientParallax, NoModelFound, NoRealSolution, ZeroSpread)
from .geometry import SE3Pose, Sim3Transform, skew

# ---------------------------------------------------------------- essential


def essential_8pt(va: np.ndarray, vb: np.ndarray, rank_tol: float = 1e-9) -> np.ndarray:
    """Essential matrix with ``vb^T E va = 0`` from >= 8 bearing pairs.

    The result is projected onto the essential manifold and has unit
    Frobenius norm. ``X_b = R X_a + t`` gives ``E = [t]x R``.
    """
    va = np.atleast_2d(np.asarray(va, dtype=float))
    vb = np.atleast_2d(np.asarray(vb, dtype=float))
    if va.shape[0] < 8 or va.shape != vb.shape:
        raise DegenerateConfiguration("need at least 8 bearing pairs")
    A = (vb[:, :, None] * va[:, None, :]).reshape(-1, 9)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    sv = np.zeros(9)
    sv[:s.size] = s
    if sv[7] < rank_tol * sv[0]:
        raise DegenerateConfiguration("design matrix nullspace has dimension > 1")
    E = Vt[-1].reshape(3, 3)
    U, _, Vt = np.linalg.svd(E)
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt
    return E / np.linalg.norm(E)


def essential_from_pose(pose: SE3Pose) -> np.ndarray:
    """``[t]x R`` for the transform mapping frame-a coordinates to frame b."""
    return skew(pose.translation) @ pose.rotation


def _depths_two_rays(R, t, va, vb):
    """Depths (la, lb) with ``lb vb ~= la R va + t`` (least squares, batched)."""
    Rva = va @ R.T
    # [Rva, -vb] [la, lb]^T = -t
    a11 = np.einsum("ij,ij->i", Rva, Rva)
    a12 = -np.einsum("ij,ij->i", Rva, vb)
    a22 = np.einsum("ij,ij->i", vb, vb)
    b1 = -Rva @ t
    b2 = vb @ t
    det = a11 * a22 - a12 * a12
    with np.errstate(divide="ignore", invalid="ignore"):
        la = (a22 * b1 - a12 * b2) / det
        lb = (a11 * b2 - a12 * b1) / det
    return la, lb


def decompose_essential(E: np.ndarray, va: np.ndarray, vb: np.ndarray) -> SE3Pose:
    """Pick the (R, t) candidate with most points in front of both cameras."""
    va = np.atleast_2d(va)
    vb = np.atleast_2d(vb)
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    cands = [(U @ W @ Vt, t), (U @ W @ Vt, -t), (U @ W.T @ Vt, t), (U @ W.T @ Vt, -t)]
    counts = []
    for R, tt in cands:
        la, lb = _depths_two_rays(R, tt, va, vb)
        counts.append(int(np.sum((la > 0) & (lb > 0))))
    order = np.argsort(counts, kind="stable")[::-1]
    if counts[order[0]] == counts[order[1]]:
        raise AmbiguousDecomposition(f"cheirality tie between candidates: counts {counts}")
    R, tt = cands[order[0]]
    return SE3Pose(R, tt)


def epipolar_great_circle_error(E, va: np.ndarray, vb: np.ndarray) -> np.ndarray:
    """Angle (rad) between ``vb`` and the great circle with normal ``E va``.

    ``E`` may be an essential matrix or an :class:`SE3Pose` a->b. Works on
    single vectors or (N, 3) batches.
    """
    if isinstance(E, SE3Pose):
        E = essential_from_pose(E)
    single = np.ndim(va) == 1
    va = np.atleast_2d(va)
    vb = np.atleast_2d(vb)
    n = va @ np.asarray(E).T
    nn = np.linalg.norm(n, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.einsum("ij,ij->i", vb, n) / nn
    err = np.abs(np.arcsin(np.clip(s, -1.0, 1.0)))
    err = np.where(nn > 1e-15, err, 0.0)
    return float(err[0]) if single else err


def symmetric_epipolar_error(E, va, vb) -> np.ndarray:
    """Larger of the two one-sided great-circle distances."""
    if isinstance(E, SE3Pose):
        E = essential_from_pose(E)
    return np.maximum(epipolar_great_circle_error(E, va, vb),
                      epipolar_great_circle_error(np.asarray(E).T, vb, va))


# ------------------------------------------------------------ triangulation


def triangulate_bearings(origins: np.ndarray, directions: np.ndarray,
                         min_parallax_deg: float = 1.0) -> tuple[np.ndarray, float]:
    """Least-squares ray intersection; returns (point, max pairwise parallax in rad).

    For two rays this is the midpoint of the common perpendicular.
    """
    O = np.atleast_2d(np.asarray(origins, dtype=float))
    D = np.atleast_2d(np.asarray(directions, dtype=float))
    if O.shape[0] < 2:
        raise InsufficientParallax("need at least two rays")
    D = D / np.linalg.norm(D, axis=1, keepdims=True)
    cosines = np.clip(D @ D.T, -1.0, 1.0)
    parallax = float(np.arccos(cosines.min()))
    if parallax < math.radians(min_parallax_deg):
        raise InsufficientParallax(f"parallax {math.degrees(parallax):.3f} deg below minimum")
    Pm = np.eye(3)[None] - D[:, :, None] * D[:, None, :]
    A = Pm.sum(axis=0)
    b = np.einsum("nij,nj->i", Pm, O)
    return np.linalg.solve(A, b), parallax


def triangulate_pairs(o1: np.ndarray, d1: np.ndarray, o2: np.ndarray, d2: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batched two-ray midpoint: (points, depth1, depth2, parallax)."""
    w = o1 - o2
    a = np.einsum("ij,ij->i", d1, d1)
    b = np.einsum("ij,ij->i", d1, d2)
    c = np.einsum("ij,ij->i", d2, d2)
    d = np.einsum("ij,ij->i", d1, w)
    e = np.einsum("ij,ij->i", d2, w)
    den = a * c - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (b * e - c * d) / den
        t = (a * e - b * d) / den
    X = 0.5 * ((o1 + s[:, None] * d1) + (o2 + t[:, None] * d2))
    cosp = b / np.sqrt(a * c)
    return X, s, t, np.arccos(np.clip(cosp, -1.0, 1.0))


# --------------------------------------------------------------------- GP3P


def _rigid_align(X: np.ndarray, Y: np.ndarray) -> SE3Pose:
    """Rigid T with ``T X ~= Y`` (Kabsch)."""
    cx, cy = X.mean(0), Y.mean(0)
    H = (X - cx).T @ (Y - cy)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return SE3Pose(R, cy - R @ cx)


def _gp3p_residuals(lam, O, D, dist2):
    X = O + lam[:, None] * D
    r = np.empty(3)
    J = np.zeros((3, 3))
    for k, (i, j) in enumerate(((0, 1), (0, 2), (1, 2))):
        diff = X[i] - X[j]
        r[k] = diff @ diff - dist2[k]
        J[k, i] = 2 * diff @ D[i]
        J[k, j] = -2 * diff @ D[j]
    return r, J


def gp3p(points: np.ndarray, origins: np.ndarray, directions: np.ndarray) -> list[SE3Pose]:
    """Generalized P3P: body->world poses ``M_t`` with ``M_t(o_i + l_i d_i) = p_i``.

    The three distance constraints are reduced to an octic in the first
    depth by eliminating the third depth (which enters one combination of the
    constraints only linearly) and taking the resultant with respect to the
    second depth. Real positive roots are polished by Newton iterations.
    """
    Pw = np.asarray(points, dtype=float).reshape(3, 3)
    O = np.asarray(origins, dtype=float).reshape(3, 3)
    D = np.asarray(directions, dtype=float).reshape(3, 3)
    D = D / np.linalg.norm(D, axis=1, keepdims=True)
    span = max(np.linalg.norm(Pw[1] - Pw[0]), np.linalg.norm(Pw[2] - Pw[0]), 1e-300)
    if np.linalg.norm(np.cross(Pw[1] - Pw[0], Pw[2] - Pw[0])) < 1e-9 * span * span:
        raise CollinearPoints("world points are collinear")
    # work in normalized units for conditioning
    scale = span
    Ps, Os = Pw / scale, O / scale
    dist2 = np.array([np.sum((Ps[0] - Ps[1])**2), np.sum((Ps[0] - Ps[2])**2),
                      np.sum((Ps[1] - Ps[2])**2)])

    def pair(i, j, k):
        # |o_ij + l_i d_i - l_j d_j|^2 = dist2_k
        oij = Os[i] - Os[j]
        return (D[i] @ D[j], D[i] @ oij, D[j] @ oij, oij @ oij - dist2[k])

    c12, a1, b2, e12 = pair(0, 1, 0)
    c13, a1p, b3, e13 = pair(0, 2, 1)
    c23, a2, b3p, e23 = pair(1, 2, 2)
    # eq12: l2^2 + A1 l2 + A0 with A* polynomials in l1
    A1 = np.array([-2 * b2, -2 * c12])
    A0 = np.array([e12, 2 * a1, 1.0])
    # eq13 in l3: l3^2 + beta l3 + gamma
    beta = np.array([-2 * b3, -2 * c13])
    gamma = np.array([e13, 2 * a1p, 1.0])
    # eq23 with l2^2, l3^2 replaced from eq12/eq13 -> l3 * L + Q = 0
    # eq23: l2^2 + l3^2 - 2 c23 l2 l3 + 2 a2 l2 - 2 b3p l3 + e23
    # l2^2 = -(A1 l2 + A0), l3^2 = -(beta l3 + gamma)
    # L = -beta - 2 c23 l2 - 2 b3p ; Q = -A1 l2 - A0 - gamma + 2 a2 l2 + e23
    L1 = np.array([-2 * c23])                       # coefficient of l2
    L0 = P.polysub(-beta, [2 * b3p])                # l2-free part
    Q1 = P.polyadd(-A1, [2 * a2])
    Q0 = P.polyadd(P.polysub(-A0, gamma), [e23])
    # F = Q^2 - beta Q L + gamma L^2, quadratic in l2: f2 l2^2 + f1 l2 + f0
    mul = P.polymul
    f2 = P.polyadd(P.polysub(mul(Q1, Q1), mul(beta, mul(Q1, L1))), mul(gamma, mul(L1, L1)))
    f1 = P.polyadd(P.polysub(2 * mul(Q1, Q0), mul(beta, P.polyadd(mul(Q1, L0), mul(Q0, L1)))),
                   2 * mul(gamma, mul(L1, L0)))
    f0 = P.polyadd(P.polysub(mul(Q0, Q0), mul(beta, mul(Q0, L0))), mul(gamma, mul(L0, L0)))
    a2c = np.array([1.0])
    # resultant of (a2c, A1, A0) and (f2, f1, f0) in l2
    t1 = P.polysub(mul(a2c, f0), mul(A0, f2))
    t2 = P.polysub(mul(a2c, f1), mul(A1, f2))
    t3 = P.polysub(mul(A1, f0), mul(A0, f1))
    res = P.polysub(mul(t1, t1), mul(t2, t3))
    res = np.trim_zeros(res, "b")
    if res.size < 2:
        raise NoRealSolution("degenerate resultant")
    roots = np.roots(res[::-1])
    l1s = roots[np.abs(roots.imag) < 1e-6 * np.maximum(1.0, np.abs(roots))].real
    l1s = l1s[l1s > 0]

    sols: list[np.ndarray] = []
    for l1 in l1s:
        q2 = np.roots([1.0, P.polyval(l1, A1), P.polyval(l1, A0)])
        q3 = np.roots([1.0, P.polyval(l1, beta), P.polyval(l1, gamma)])
        best = None
        for l2 in q2.real:
            for l3 in q3.real:
                lam = np.array([l1, l2, l3])
                r, _ = _gp3p_residuals(lam, Os, D, dist2)
                score = np.abs(r).max()
                if best is None or score < best[0]:
                    best = (score, lam)
        if best is None:
            continue
        lam = best[1]
        for _ in range(20):
            r, J = _gp3p_residuals(lam, Os, D, dist2)
            try:
                step = np.linalg.solve(J, r)
            except np.linalg.LinAlgError:
                break
            lam = lam - step
            if np.abs(step).max() < 1e-15 * max(1.0, np.abs(lam).max()):
                break
        r, _ = _gp3p_residuals(lam, Os, D, dist2)
        if np.abs(r).max() > 1e-6 or np.any(lam <= 0):
            continue
        if any(np.abs(lam - s).max() < 1e-7 for s in sols):
            continue
        sols.append(lam)
    if not sols:
        raise NoRealSolution("no real positive depth solution")
    poses = []
    for lam in sols:
        Xb = O + (lam * scale)[:, None] * D
        poses.append(_rigid_align(Xb, Pw))
    return poses


# ----------------------------------------------------------------- Horn


def horn_similarity(points_a: np.ndarray, points_b: np.ndarray) -> Sim3Transform:
    """Least-squares similarity with ``S b ~= a`` (Horn's quaternion method)."""
    A = np.atleast_2d(np.asarray(points_a, dtype=float))
    B = np.atleast_2d(np.asarray(points_b, dtype=float))
    if A.shape != B.shape or A.shape[0] < 3:
        raise CollinearPoints("need at least 3 point pairs")
    ca, cb = A.mean(0), B.mean(0)
    Ac, Bc = A - ca, B - cb
    va, vb = np.sum(Ac * Ac), np.sum(Bc * Bc)
    if va < 1e-24 or vb < 1e-24:
        raise ZeroSpread("point cloud has zero spread")
    for C, v in ((Ac, va), (Bc, vb)):
        sv = np.linalg.svd(C, compute_uv=False)
        if sv[1] < 1e-9 * sv[0]:
            raise CollinearPoints("point cloud is collinear")
    M = Bc.T @ Ac  # sum b a^T
    Sxx, Sxy, Sxz = M[0]
    Syx, Syy, Syz = M[1]
    Szx, Szy, Szz = M[2]
    N = np.array([
        [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
        [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
        [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
        [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz],
    ])
    w, V = np.linalg.eigh(N)
    q0, qx, qy, qz = V[:, -1]
    R = np.array([
        [q0*q0 + qx*qx - qy*qy - qz*qz, 2*(qx*qy - q0*qz), 2*(qx*qz + q0*qy)],
        [2*(qy*qx + q0*qz), q0*q0 - qx*qx + qy*qy - qz*qz, 2*(qy*qz - q0*qx)],
        [2*(qz*qx - q0*qy), 2*(qz*qy + q0*qx), q0*q0 - qx*qx - qy*qy + qz*qz],
    ])
    s = float(np.sum(Ac * (Bc @ R.T)) / vb)
    if s <= 0:
        raise CollinearPoints("non-positive scale; clouds are not similar")
    return Sim3Transform(s, R, ca - s * R @ cb)


# --------------------------------------------------------------- RANSAC


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 300
    inlier_threshold: float = 1.0
    confidence: float = 0.99
    min_inliers: int = 1

    def __post_init__(self):
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


class RansacProblem(Protocol):
    sample_size: int

    def __len__(self) -> int: ...

    def fit(self, idx: np.ndarray) -> Sequence: ...

    def residuals(self, model) -> np.ndarray: ...


@dataclass
class RansacResult:
    model: object
    inliers: np.ndarray
    iterations: int


def adaptive_bound(inlier_ratio: float, sample_size: int, confidence: float) -> float:
    if inlier_ratio <= 0:
        return math.inf
    p_good = inlier_ratio ** sample_size
    if p_good >= 1.0:
        return 0.0
    denom = math.log1p(-p_good)
    if denom == 0.0:
        return math.inf
    return math.log(1.0 - confidence) / denom


def ransac(problem: RansacProblem, config: RansacConfig, seed: int = 0) -> RansacResult:
    n = len(problem)
    m = problem.sample_size
    if n < m or n == 0:
        raise NoModelFound(f"{n} data points, need at least {m}")
    rng = np.random.default_rng(seed)
    best_model, best_mask, best_count = None, None, -1
    bound = math.inf
    it = 0
    while it < config.max_iterations and it < bound:
        it += 1
        idx = rng.choice(n, size=m, replace=False)
        try:
            models = problem.fit(idx)
        except (DegenerateConfiguration, CollinearPoints, NoRealSolution, ZeroSpread,
                AmbiguousDecomposition, np.linalg.LinAlgError):
            continue
        for model in models:
            mask = problem.residuals(model) < config.inlier_threshold
            count = int(mask.sum())
            if count > best_count:
                best_model, best_mask, best_count = model, mask, count
                bound = adaptive_bound(count / n, m, config.confidence)
    if best_model is None or best_count < config.min_inliers:
        raise NoModelFound(f"best hypothesis has {max(best_count, 0)} inliers")
    return RansacResult(best_model, best_mask, it)


class EssentialProblem:
    """Residual: symmetric great-circle distance in radians."""

    sample_size = 8

    def __init__(self, va, vb):
        self.va = np.atleast_2d(va)
        self.vb = np.atleast_2d(vb)

    def __len__(self):
        return self.va.shape[0]

    def fit(self, idx):
        return [essential_8pt(self.va[idx], self.vb[idx])]

    def residuals(self, E):
        return symmetric_epipolar_error(E, self.va, self.vb)


class HornProblem:
    """Residual: ``|S b - a|`` in the units of ``a``."""

    sample_size = 3

    def __init__(self, points_a, points_b):
        self.a = np.atleast_2d(points_a)
        self.b = np.atleast_2d(points_b)

    def __len__(self):
        return self.a.shape[0]

    def fit(self, idx):
        return [horn_similarity(self.a[idx], self.b[idx])]

    def residuals(self, S):
        return np.linalg.norm(S.apply(self.b) - self.a, axis=1)


@dataclass
class GP3PProblem:
    """World points observed as pixels by cameras of a rig; residual in pixels."""

    mcs: object
    points: np.ndarray
    cams: np.ndarray
    uv: np.ndarray
    sample_size: int = 3
    origins: np.ndarray = field(init=False)
    dirs: np.ndarray = field(init=False)

    def __post_init__(self):
        self.points = np.atleast_2d(self.points)
        self.cams = np.asarray(self.cams, dtype=int)
        self.uv = np.atleast_2d(self.uv)
        self.origins = np.zeros_like(self.points)
        self.dirs = np.zeros_like(self.points)
        for c in np.unique(self.cams):
            sel = self.cams == c
            v = self.mcs.cameras[c].unproject_points(self.uv[sel])
            self.origins[sel], self.dirs[sel] = self.mcs.body_rays(c, v)

    def __len__(self):
        return self.points.shape[0]

    def fit(self, idx):
        return gp3p(self.points[idx], self.origins[idx], self.dirs[idx])

    def residuals(self, pose):
        err = np.full(len(self), np.inf)
        for c in np.unique(self.cams):
            sel = np.flatnonzero(self.cams == c)
            uv, valid, _ = self.mcs.project_batch(c, pose, self.points[sel])
            e = np.linalg.norm(uv - self.uv[sel], axis=1)
            err[sel] = np.where(valid, e, np.inf)
        return err


def refine_pose_nonlinear(initial: SE3Pose, points: np.ndarray, cams: np.ndarray,
                          uv: np.ndarray, mcs, max_iterations: int = 20):
    """LM refinement of the body pose on all given (inlier) correspondences."""
    from .optim import PoseEdges, lm_pose
    edges = PoseEdges(np.atleast_2d(points), np.asarray(cams, dtype=int), np.atleast_2d(uv))
    if len(edges.cams) < 4:
        raise DegenerateConfiguration("need at least 4 correspondences")
    return lm_pose(initial, edges, mcs, kernel=None, max_iterations=max_iterations)
