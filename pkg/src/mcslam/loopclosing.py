"""Loop detection, Sim(3) estimation between MKFs, and loop correction."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import minimum_spanning_tree

from .config import SlamConfig
from .errors import (CollinearPoints, RansacFailed, SlamError, TooFewInliers, ZeroSpread)
from .geometry import (SE3Pose, Sim3Transform, rotation_to_quaternion, sim3_exp, sim3_to_rigid)
from .mapdb import Map, MultiKeyframe, update_point_statistics
from .mapping import _fuse_into
from .matching import match_descriptors, search_by_projection
from .optim import PoseGraphProblem, optimize_essential_graph, posegraph_cost
from .solvers import horn_similarity
from .vocabulary import similarity_score

log = logging.getLogger(__name__)

_IDENTITY = SE3Pose.identity()


@dataclass
class ConsistencyGroup:
    mkfs: frozenset
    count: int


@dataclass
class LoopEvent:
    query: int
    candidate: int
    scale: float
    rotation: list
    translation: list
    inliers: int
    fused: int = 0
    cost_before: float = 0.0
    cost_after: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ------------------------------------------------------------- detection


def similarity_floor(map_: Map, mkf: MultiKeyframe) -> float | None:
    """s_sim: lowest BoW similarity between the MKF and its co-visible neighbors."""
    scores = [similarity_score(mkf.bow, map_.mkfs[n].bow)
              for n in map_.covis.neighbors(mkf.id) if n in map_.mkfs]
    return min(scores) if scores else None


def detect_candidates(db, map_: Map, mkf: MultiKeyframe, groups: list[ConsistencyGroup],
                      consistency: int = 3) -> tuple[list[int], list[ConsistencyGroup]]:
    """Candidates whose consistency group has persisted for ``consistency`` insertions.

    Returns (accepted candidate ids, new group list). A candidate that shares
    an MKF with a group of the previous insertion continues that group's
    count; otherwise it starts a new group with count one.
    """
    s_sim = similarity_floor(map_, mkf)
    if s_sim is None:
        return [], []
    neighbors = set(map_.covis.neighbors(mkf.id))
    cands = [m for m, _ in db.query(mkf.bow, s_sim, exclude=neighbors | {mkf.id})
             if m in map_.mkfs]
    accepted, new_groups = [], []
    for c in cands:
        members = frozenset([c, *map_.covis.neighbors(c)])
        count = 1
        for g in groups:
            if g.mkfs & members:
                count = max(count, g.count + 1)
        new_groups.append(ConsistencyGroup(members, count))
        if count >= consistency:
            accepted.append(c)
    return accepted, new_groups


# ------------------------------------------------------------- Sim(3)


def _representative(map_: Map, pid: int, mid: int) -> int:
    return map_.points[pid].obs[mid][0]


def _project_body(mcs, cams, X):
    """Pixels of body-frame points in the given cameras; (uv, valid)."""
    uv = np.zeros((len(cams), 2))
    valid = np.zeros(len(cams), dtype=bool)
    for c in np.unique(cams):
        sel = cams == c
        uv[sel], valid[sel], _ = mcs.project_batch(int(c), _IDENTITY, X[sel])
    return uv, valid


class LoopSim3Problem:
    """Body-frame point pairs a (in MKF i) and b (in MKF c), residual = worse reprojection."""

    sample_size = 3

    def __init__(self, a, b, cam_a, uv_a, cam_b, uv_b, thr_a, thr_b, mcs):
        self.a, self.b = a, b
        self.cam_a, self.uv_a, self.cam_b, self.uv_b = cam_a, uv_a, cam_b, uv_b
        self.thr_a, self.thr_b = thr_a, thr_b
        self.mcs = mcs

    def __len__(self):
        return self.a.shape[0]

    def fit(self, idx):
        return [horn_similarity(self.a[idx], self.b[idx])]

    def errors(self, S):
        ua, va = _project_body(self.mcs, self.cam_a, S.apply(self.b))
        ub, vb = _project_body(self.mcs, self.cam_b, S.inverse().apply(self.a))
        ea = np.where(va, np.linalg.norm(ua - self.uv_a, axis=1), np.inf)
        eb = np.where(vb, np.linalg.norm(ub - self.uv_b, axis=1), np.inf)
        return ea, eb

    def residuals(self, S):
        """Error normalized by the octave-scaled threshold (inlier iff < 1)."""
        ea, eb = self.errors(S)
        return np.maximum(ea / self.thr_a, eb / self.thr_b)


def _pairs_problem(map_: Map, mkf_i, mkf_c, pi, pc, mcs, cfg: SlamConfig) -> LoopSim3Problem:
    Ti, Tc = mkf_i.pose.inverse(), mkf_c.pose.inverse()
    a = Ti.apply(np.array([map_.points[p].position for p in pi]).reshape(-1, 3))
    b = Tc.apply(np.array([map_.points[p].position for p in pc]).reshape(-1, 3))
    ka = np.array([_representative(map_, p, mkf_i.id) for p in pi], dtype=np.int64)
    kb = np.array([_representative(map_, p, mkf_c.id) for p in pc], dtype=np.int64)
    f = cfg.scale_factor
    return LoopSim3Problem(a, b, mkf_i.kps.cam[ka], mkf_i.kps.uv[ka], mkf_c.kps.cam[kb],
                           mkf_c.kps.uv[kb], cfg.sim3_threshold_px * f ** mkf_i.kps.octave[ka],
                           cfg.sim3_threshold_px * f ** mkf_c.kps.octave[kb], mcs)


def _sim3_ransac(prob: LoopSim3Problem, iterations: int, seed: int):
    n = len(prob)
    if n < 3:
        raise RansacFailed(f"{n} correspondences")
    rng = np.random.default_rng(seed)
    best, best_mask = None, None
    for _ in range(iterations):
        idx = rng.choice(n, size=3, replace=False)
        try:
            S = prob.fit(idx)[0]
        except (CollinearPoints, ZeroSpread, ValueError):
            continue
        mask = prob.residuals(S) < 1.0
        if best_mask is None or mask.sum() > best_mask.sum():
            best, best_mask = S, mask
    if best is None or best_mask.sum() < 3:
        raise RansacFailed("no similarity explains the correspondences")
    return best, best_mask


def refine_sim3(prob: LoopSim3Problem, S0: Sim3Transform, mask, huber_e: float
                ) -> Sim3Transform:
    """Sim(3)-only LM on both reprojection directions with a Huber loss.

    Jacobians are finite differences; the parameter is a left increment
    ``exp(xi) S0``.
    """
    idx = np.flatnonzero(mask)
    sub = LoopSim3Problem(prob.a[idx], prob.b[idx], prob.cam_a[idx], prob.uv_a[idx],
                          prob.cam_b[idx], prob.uv_b[idx], prob.thr_a[idx], prob.thr_b[idx],
                          prob.mcs)

    def fun(xi):
        S = sim3_exp(xi).compose(S0)
        ua, va = _project_body(sub.mcs, sub.cam_a, S.apply(sub.b))
        ub, vb = _project_body(sub.mcs, sub.cam_b, S.inverse().apply(sub.a))
        ra = np.where(va[:, None], ua - sub.uv_a, 0.0)
        rb = np.where(vb[:, None], ub - sub.uv_b, 0.0)
        return np.concatenate([ra.ravel(), rb.ravel()])

    res = least_squares(fun, np.zeros(7), loss="huber", f_scale=huber_e, method="trf",
                        max_nfev=100, x_scale="jac")
    return sim3_exp(res.x).compose(S0)


def loop_point_set(map_: Map, mid: int) -> list[int]:
    """Points of an MKF and its co-visible neighbors."""
    pts = set(map_.mkfs[mid].point_set())
    for n in map_.covis.neighbors(mid):
        pts |= map_.mkfs[n].point_set()
    return sorted(pts)


def estimate_loop_sim3(map_: Map, mkf_i: MultiKeyframe, mkf_c: MultiKeyframe, mcs,
                       cfg: SlamConfig, seed: int = 0):
    """Similarity S mapping c-body coordinates onto i-body coordinates.

    Returns (S, list of (point in i, point in c) inlier pairs).
    """
    pts_i = sorted(mkf_i.point_set())
    pts_c = sorted(mkf_c.point_set())
    if not pts_i or not pts_c:
        raise RansacFailed("an MKF has no map points")
    Di = np.array([map_.points[p].descriptor for p in pts_i], dtype=np.uint64)
    Dc = np.array([map_.points[p].descriptor for p in pts_c], dtype=np.uint64)
    ia, ic = match_descriptors(Di, Dc, max_distance=cfg.match_threshold, ratio=cfg.match_ratio)
    pairs = [(pts_i[a], pts_c[c]) for a, c in zip(ia, ic) if pts_i[a] != pts_c[c]]
    if len(pairs) < 3:
        raise RansacFailed(f"{len(pairs)} descriptor matches")
    pi, pc = [p for p, _ in pairs], [q for _, q in pairs]
    prob = _pairs_problem(map_, mkf_i, mkf_c, pi, pc, mcs, cfg)
    S, mask = _sim3_ransac(prob, cfg.sim3_iterations, seed)

    # guided matching: project the candidate's neighborhood into every camera of MKF i
    used_i = {p for p, m in zip(pi, mask) if m}
    used_c = {q for q, m in zip(pc, mask) if m}
    cand = [q for q in loop_point_set(map_, mkf_c.id) if q not in used_c]
    if cand:
        Pc = mkf_c.pose.inverse().apply(np.array([map_.points[q].position for q in cand]))
        Dq = np.array([map_.points[q].descriptor for q in cand], dtype=np.uint64)
        taken = np.zeros(mkf_i.kps.n, dtype=bool)
        for k in np.flatnonzero(mkf_i.point_ids >= 0):
            if int(mkf_i.point_ids[k]) in used_i:
                taken[k] = True
        qi, ki, _ = search_by_projection(mkf_i.kps, S.apply(Pc), Dq, _IDENTITY, mcs,
                                         cfg.sim3_threshold_px * 2, taken=taken,
                                         max_distance=cfg.match_threshold,
                                         ratio=cfg.match_ratio, scale_factor=cfg.scale_factor)
        for q, k in zip(qi, ki):
            p = int(mkf_i.point_ids[k])
            if p >= 0 and p not in used_i and p != cand[q]:
                pi.append(p)
                pc.append(cand[q])
                used_i.add(p)
        prob = _pairs_problem_general(map_, mkf_i, mkf_c, pi, pc, mcs, cfg)
        mask = prob.residuals(S) < 1.0
    S = refine_sim3(prob, S, mask, cfg.huber_e)
    ea, eb = prob.errors(S)
    inl = (ea < prob.thr_a) & (eb < prob.thr_b * 1.0) & (ea < cfg.huber_e * 2) & \
        (eb < cfg.huber_e * 2)
    n = int(inl.sum())
    if n <= cfg.loop_min_inliers:
        raise TooFewInliers(f"{n} inliers after Sim(3) refinement")
    return S, [(pi[k], pc[k]) for k in np.flatnonzero(inl)]


def _pairs_problem_general(map_: Map, mkf_i, mkf_c, pi, pc, mcs, cfg: SlamConfig):
    """Like the plain pair problem, but b-side points may be observed by other MKFs only.

    For a candidate-side point not observed in MKF c itself, the c-side
    residual is evaluated in whichever observing MKF is listed first.
    """
    own = [q for q in pc if mkf_c.id in map_.points[q].obs]
    if len(own) == len(pc):
        return _pairs_problem(map_, mkf_i, mkf_c, pi, pc, mcs, cfg)
    Ti, Tc = mkf_i.pose.inverse(), mkf_c.pose.inverse()
    a = Ti.apply(np.array([map_.points[p].position for p in pi]))
    b = Tc.apply(np.array([map_.points[q].position for q in pc]))
    ka = np.array([_representative(map_, p, mkf_i.id) for p in pi], dtype=np.int64)
    cam_b = np.zeros(len(pc), dtype=np.int64)
    uv_b = np.zeros((len(pc), 2))
    oct_b = np.zeros(len(pc), dtype=np.int64)
    for j, q in enumerate(pc):
        pt = map_.points[q]
        if mkf_c.id in pt.obs:
            k = pt.obs[mkf_c.id][0]
            cam_b[j], uv_b[j], oct_b[j] = mkf_c.kps.cam[k], mkf_c.kps.uv[k], mkf_c.kps.octave[k]
        else:
            # predict where MKF c would see it; this side only checks visibility
            c_best, uv_best = -1, None
            for c in range(mcs.n_cameras):
                uv, valid, _ = mcs.project_batch(c, _IDENTITY, b[j][None])
                if valid[0]:
                    c_best, uv_best = c, uv[0]
                    break
            if c_best < 0:
                c_best, uv_best = 0, np.array([np.inf, np.inf])
            cam_b[j], uv_b[j] = c_best, uv_best
    f = cfg.scale_factor
    prob = LoopSim3Problem(a, b, mkf_i.kps.cam[ka], mkf_i.kps.uv[ka], cam_b, uv_b,
                           cfg.sim3_threshold_px * f ** mkf_i.kps.octave[ka],
                           cfg.sim3_threshold_px * f ** oct_b, mcs)
    return prob


# ------------------------------------------------------------- correction


def _vertex(pose: SE3Pose) -> Sim3Transform:
    """World-to-body similarity with unit scale."""
    return Sim3Transform.from_rigid(pose.inverse())


def _pose_from_vertex(V: Sim3Transform) -> SE3Pose:
    return sim3_to_rigid(V).inverse()


def essential_graph_edges(map_: Map, min_weight: int) -> set[tuple[int, int]]:
    """Maximum spanning tree of the co-visibility graph plus all strong edges."""
    ids = sorted(map_.mkfs)
    index = {m: i for i, m in enumerate(ids)}
    rows, cols, vals = [], [], []
    strong = set()
    for a, b, w in map_.covis.edges():
        if a not in index or b not in index:
            continue
        rows.append(index[a])
        cols.append(index[b])
        vals.append(-float(w))
        if w > min_weight:
            strong.add((min(a, b), max(a, b)))
    if vals:
        G = csr_matrix((vals, (rows, cols)), shape=(len(ids), len(ids)))
        T = minimum_spanning_tree(G).tocoo()
        for r, c in zip(T.row, T.col):
            a, b = ids[r], ids[c]
            strong.add((min(a, b), max(a, b)))
    return strong


def correct_loop(map_: Map, mkf_i: MultiKeyframe, mkf_c: MultiKeyframe, S: Sim3Transform,
                 mcs, cfg: SlamConfig, db=None) -> LoopEvent:
    """Propagate the loop similarity locally, fuse across the junction, then optimize.

    ``S`` maps c-body coordinates to i-body coordinates. Returns the event and
    the similarity that carries old world coordinates near MKF i to new ones.
    """
    old_poses = {m: k.pose for m, k in map_.mkfs.items()}
    old_neighbors = {m: set(map_.covis.neighbors(m)) for m in map_.mkfs}
    # (a) corrected body-to-world similarities around MKF i
    G_i = Sim3Transform.from_rigid(mkf_c.pose).compose(S.inverse())
    Ti_inv = mkf_i.pose.inverse()
    local = [mkf_i.id] + [m for m in map_.covis.neighbors(mkf_i.id) if m != mkf_c.id]
    loop_side = set(loop_point_set(map_, mkf_c.id))
    G = {}
    for m in local:
        rel = Ti_inv.compose(map_.mkfs[m].pose)
        G[m] = G_i.compose(Sim3Transform.from_rigid(rel))
    # (b) points seen from the corrected MKFs; G_t T_t^-1 is the same for all t
    W = G_i.compose(Sim3Transform.from_rigid(Ti_inv))
    moved = set()
    for m in local:
        for p in map_.mkfs[m].point_set():
            if p not in moved and p not in loop_side:
                map_.points[p].position = W.apply(map_.points[p].position)
                moved.add(p)
    for m in local:
        Gm = G[m]
        map_.mkfs[m].pose = SE3Pose(Gm.rotation, Gm.translation)
    # (c) fuse the candidate neighborhood into the corrected MKFs
    fused = 0
    loop_pts = sorted(loop_side)
    for m in local:
        if m in map_.mkfs:
            fused += _fuse_into(map_, loop_pts, map_.mkfs[m], mcs, cfg)
    # (d) essential graph over all MKFs
    ids = sorted(map_.mkfs)
    index = {m: i for i, m in enumerate(ids)}
    V_old = [_vertex(old_poses[m]) for m in ids]
    V_init = [G[m].inverse() if m in G else V_old[index[m]] for m in ids]
    edges = []
    corrected = set(G)
    for a, b in sorted(essential_graph_edges(map_, cfg.essential_graph_min_weight)):
        new_link = (a in corrected) != (b in corrected) and b not in old_neighbors.get(a, ())
        src = V_init if new_link else V_old
        i, j = index[a], index[b]
        edges.append((i, j, src[j].compose(src[i].inverse())))
    loop_edge = (index[mkf_c.id], index[mkf_i.id], S)
    fixed = np.array([m == map_.origin_id for m in ids])
    prob = PoseGraphProblem(V_init, fixed, edges)
    cost_before = posegraph_cost(PoseGraphProblem(V_init, fixed, edges + [loop_edge]))
    V_opt = optimize_essential_graph(prob, loop_edge, cfg.essential_graph_iterations)
    cost_after = posegraph_cost(PoseGraphProblem(V_opt, fixed, edges + [loop_edge]))
    # (e) points follow their reference MKF, poses lose their scale
    for p in map_.points.values():
        r = p.ref_mkf if p.ref_mkf in index else min(p.obs)
        k = index[r]
        p.position = V_opt[k].inverse().apply(V_init[k].apply(p.position))
    for m in ids:
        map_.mkfs[m].pose = _pose_from_vertex(V_opt[index[m]])
    k = index[mkf_i.id]
    correction = V_opt[k].inverse().compose(_vertex(old_poses[mkf_i.id]))
    for p in map_.points.values():
        update_point_statistics(p, map_, cfg.scale_factor, cfg.n_levels)
    map_.version += 1
    q = rotation_to_quaternion(S.rotation)
    ev = LoopEvent(mkf_i.id, mkf_c.id, float(S.scale), [float(x) for x in q],
                   [float(x) for x in S.translation], 0, fused, cost_before, cost_after)
    return ev, correction


class LoopCloser:
    """Consumes MKFs after mapping; closes at most one loop per MKF."""

    def __init__(self, map_: Map, db, mcs, cfg: SlamConfig):
        self.map = map_
        self.db = db
        self.mcs = mcs
        self.cfg = cfg
        self.groups: list[ConsistencyGroup] = []
        self.events: list[LoopEvent] = []
        self.last_loop_mkf = -10**9
        self.n_seen = 0
        # old-world -> new-world similarity at the query MKF of the last loop
        self.last_correction: Sim3Transform | None = None

    def process(self, mkf: MultiKeyframe) -> LoopEvent | None:
        cfg, map_ = self.cfg, self.map
        self.n_seen += 1
        with map_.lock:
            if mkf.id not in map_.mkfs:
                return None
            if (self.n_seen <= cfg.loop_min_mkf_gap
                    or mkf.id - self.last_loop_mkf < cfg.loop_min_mkf_gap):
                self.groups = []
                return None
            accepted, self.groups = detect_candidates(self.db, map_, mkf, self.groups,
                                                      cfg.loop_consistency)
            if not accepted:
                return None
            ranked = sorted(accepted, key=lambda c: (-similarity_score(mkf.bow,
                                                                        map_.mkfs[c].bow), c))
            for c in ranked:
                try:
                    S, inliers = estimate_loop_sim3(map_, mkf, map_.mkfs[c], self.mcs, cfg,
                                                    seed=cfg.seed + mkf.id)
                except SlamError as exc:
                    log.debug("loop candidate %d rejected: %s", c, exc)
                    continue
                ev, self.last_correction = correct_loop(map_, mkf, map_.mkfs[c], S, self.mcs,
                                                        cfg, self.db)
                ev.inliers = len(inliers)
                self.events.append(ev)
                self.groups = []
                self.last_loop_mkf = mkf.id
                log.info("loop closed: MKF %d -> %d, scale %.4f, %d inliers", mkf.id, c,
                         S.scale, ev.inliers)
                return ev
        return None
