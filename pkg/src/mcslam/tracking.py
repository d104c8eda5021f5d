"""Frame-rate tracking: initialization, motion-model tracking, local map, relocalization."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .config import SlamConfig
from .errors import (InitializationFailed, InsufficientParallax, NoModelFound, SlamError,
                     TooFewEdges, TooFewInliers)
from .geometry import SE3Pose, se3_exp, se3_log, skew, so3_exp
from .mapdb import KeypointSet, Map, MultiKeyframe, predict_octaves, update_point_statistics
from .matching import match_descriptors, search_by_projection
from .optim import BAProblem, HuberKernel, PoseEdges, bundle_adjust, optimize_pose
from .solvers import (EssentialProblem, GP3PProblem, RansacConfig, decompose_essential,
                      ransac, refine_pose_nonlinear, triangulate_pairs)

log = logging.getLogger(__name__)


class Status(enum.Enum):
    UNINITIALIZED = "UNINITIALIZED"
    OK = "OK"
    LOST = "LOST"


class Frame:
    """Keypoints of one rig image set plus their current map-point assignment."""

    def __init__(self, index: int, timestamp: float, kps: KeypointSet):
        self.index = index
        self.timestamp = timestamp
        self.kps = kps
        self.pose: SE3Pose | None = None
        self.point_ids = -np.ones(kps.n, dtype=np.int64)
        self.bow: dict[int, float] | None = None

    @classmethod
    def from_record(cls, index: int, record, mcs) -> "Frame":
        return cls(index, record.timestamp, KeypointSet(mcs, record.cameras[:mcs.n_cameras]))

    def matched(self) -> np.ndarray:
        return np.flatnonzero(self.point_ids >= 0)

    def n_matched_points(self) -> int:
        return int(np.unique(self.point_ids[self.point_ids >= 0]).size)


@dataclass
class FrameState:
    timestamp: float
    pose: SE3Pose | None
    status: Status
    n_matches: int
    velocity: np.ndarray


def predict_pose(previous: SE3Pose, velocity) -> SE3Pose:
    """Constant-velocity prediction ``M_prev exp(velocity)``."""
    return previous.compose(se3_exp(np.asarray(velocity, dtype=float)))


def update_velocity(previous: SE3Pose, current: SE3Pose) -> np.ndarray:
    return se3_log(previous.inverse().compose(current))


def should_insert_mkf(frames_since_mkf: int, mapping_idle: bool, frames_since_reloc: int,
                      n_tracked: int, n_ref_points: int, fps: float = 25.0,
                      min_tracked: int = 50, max_overlap: float = 0.9,
                      min_frames_factor: float = 0.5, reloc_frames_factor: float = 1.0) -> bool:
    """All four insertion conditions; overlap = tracked / reference-MKF points."""
    c1 = frames_since_mkf > min_frames_factor * fps and mapping_idle
    c2 = frames_since_reloc >= reloc_frames_factor * fps
    c3 = n_tracked >= min_tracked
    c4 = n_ref_points == 0 or n_tracked < max_overlap * n_ref_points
    return bool(c1 and c2 and c3 and c4)


# ------------------------------------------------------------- helpers


def _points_arrays(map_: Map, pids):
    P = np.array([map_.points[p].position for p in pids]).reshape(-1, 3)
    D = np.array([map_.points[p].descriptor for p in pids], dtype=np.uint64).reshape(-1, 4)
    return P, D


def _frame_edges(frame: Frame, map_: Map):
    ks = np.flatnonzero(frame.point_ids >= 0)
    ks = np.array([k for k in ks if int(frame.point_ids[k]) in map_.points], dtype=np.int64)
    if ks.size == 0:
        return ks, PoseEdges(np.zeros((0, 3)), np.zeros(0, int), np.zeros((0, 2)))
    P = np.array([map_.points[int(frame.point_ids[k])].position for k in ks])
    return ks, PoseEdges(P, frame.kps.cam[ks], frame.kps.uv[ks])


def _predicted_octaves(map_: Map, pids, P, pose, mcs, cfg: SlamConfig):
    dist = np.linalg.norm(P - pose.translation, axis=1)
    d_max = np.array([map_.points[pid].d_max for pid in pids], dtype=float)
    return predict_octaves(d_max, dist, cfg.scale_factor, cfg.n_levels)


def optimize_frame_pose(frame: Frame, map_: Map, mcs, cfg: SlamConfig, initial: SE3Pose
                        ) -> int:
    """Robust pose optimization on the frame's matches; outliers are unassigned."""
    ks, edges = _frame_edges(frame, map_)
    bad = np.setdiff1d(np.flatnonzero(frame.point_ids >= 0), ks)
    frame.point_ids[bad] = -1
    try:
        res = optimize_pose(initial, edges, mcs, HuberKernel(cfg.huber_e), cfg.pose_iterations,
                            cfg.pose_rounds)
    except TooFewEdges:
        frame.point_ids[:] = -1
        frame.pose = initial
        return 0
    frame.pose = res.pose
    frame.point_ids[ks[~res.inliers]] = -1
    return int(res.inliers.sum())


def _skip_mask(frame: Frame, pid_index: dict, n_points: int, n_cams: int):
    """Mask of (point, camera) pairs already matched in the frame."""
    skip = np.zeros((n_points, n_cams), dtype=bool)
    for k in np.flatnonzero(frame.point_ids >= 0):
        i = pid_index.get(int(frame.point_ids[k]))
        if i is not None:
            skip[i, frame.kps.cam[k]] = True
    return skip


def guided_search(frame: Frame, map_: Map, pids, pose, mcs, cfg: SlamConfig, radius: float,
                  octave_window: int = 1) -> int:
    """Project ``pids`` at ``pose`` and assign matches to free keypoints; returns count."""
    pids = [p for p in pids if p in map_.points]
    if not pids:
        return 0
    P, D = _points_arrays(map_, pids)
    octv = _predicted_octaves(map_, pids, P, pose, mcs, cfg)
    index = {p: i for i, p in enumerate(pids)}
    skip = _skip_mask(frame, index, len(pids), mcs.n_cameras)
    pi, ki, _ = search_by_projection(frame.kps, P, D, pose, mcs, radius, octv, octave_window,
                                     taken=frame.point_ids >= 0, skip_cams=skip,
                                     max_distance=cfg.match_threshold, ratio=cfg.match_ratio,
                                     scale_factor=cfg.scale_factor)
    for i, k in zip(pi, ki):
        frame.point_ids[k] = pids[i]
    return int(pi.size)


# ------------------------------------------------------------- tracking steps


def track_from_previous(frame: Frame, previous: Frame, map_: Map, mcs, cfg: SlamConfig,
                        predicted: SE3Pose) -> bool:
    """Guided search from the previous frame's points; False means LOST."""
    pids = sorted({int(p) for p in previous.point_ids[previous.point_ids >= 0]
                   if int(p) in map_.points})
    if not pids:
        frame.pose = predicted
        return False
    r = cfg.search_radius_px
    n = guided_search(frame, map_, pids, predicted, mcs, cfg, r)
    if n < cfg.lost_min_matches:
        frame.point_ids[:] = -1
        n = guided_search(frame, map_, pids, predicted, mcs, cfg, r * cfg.search_widen)
    if n < cfg.lost_min_matches:
        frame.pose = predicted
        return False
    n = optimize_frame_pose(frame, map_, mcs, cfg, predicted)
    guided_search(frame, map_, pids, frame.pose, mcs, cfg, r * cfg.search_widen)
    n = optimize_frame_pose(frame, map_, mcs, cfg, frame.pose)
    return n >= cfg.lost_min_matches


def reference_mkf(frame: Frame, map_: Map) -> tuple[int | None, dict[int, int]]:
    """MKF sharing most of the frame's map points (each point counted once per MKF)."""
    counts: dict[int, int] = {}
    for pid in np.unique(frame.point_ids[frame.point_ids >= 0]):
        p = map_.points.get(int(pid))
        if p is None:
            continue
        for mid in p.obs:
            counts[mid] = counts.get(mid, 0) + 1
    if not counts:
        return None, counts
    ref = max(counts.items(), key=lambda x: (x[1], -x[0]))[0]
    return ref, counts


def local_map_filter(map_: Map, pids, pose: SE3Pose, mcs, cfg: SlamConfig):
    """Apply boundary, viewing-angle and scale-interval tests; returns kept pids.

    A point passes when some camera sees it inside its boundary, the angle
    between the viewing ray and the mean viewing direction is within the
    limit, and its distance lies in the (tolerant) scale-invariance interval.
    """
    pids = [p for p in pids if p in map_.points]
    if not pids:
        return []
    P, _ = _points_arrays(map_, pids)
    normals = np.array([map_.points[p].normal for p in pids])
    dmin = np.array([map_.points[p].d_min for p in pids])
    dmax = np.array([map_.points[p].d_max for p in pids])
    ok = np.zeros(len(pids), dtype=bool)
    cos_lim = math.cos(math.radians(cfg.view_angle_deg))
    for c in range(mcs.n_cameras):
        _, valid, _ = mcs.project_batch(c, pose, P)
        center = pose.apply(mcs.extrinsics[c].translation)
        v = P - center
        d = np.linalg.norm(v, axis=1)
        cosang = np.einsum("ij,ij->i", v, normals) / np.maximum(d, 1e-12)
        ok |= valid & (cosang >= cos_lim) & (d >= 0.8 * dmin) & (d <= 1.2 * dmax)
    return [p for p, k in zip(pids, ok) if k]


def local_map_points(frame: Frame, map_: Map, cfg: SlamConfig, ref: int | None,
                     counts: dict[int, int]) -> list[int]:
    mkfs = sorted(counts, key=lambda m: (-counts[m], m))[:cfg.local_map_neighbors]
    if ref is not None:
        for m in map_.covis.neighbors(ref, cfg.covis_min_weight)[:cfg.local_map_neighbors]:
            if m not in mkfs:
                mkfs.append(m)
    pts: set[int] = set()
    for m in mkfs:
        if m in map_.mkfs:
            pts |= map_.mkfs[m].point_set()
    return sorted(pts)


def track_local_map(frame: Frame, map_: Map, mcs, cfg: SlamConfig) -> tuple[int, int | None]:
    """Enlarge the match set with local-map points and re-optimize the pose."""
    ref, counts = reference_mkf(frame, map_)
    pts = local_map_points(frame, map_, cfg, ref, counts)
    matched = {int(p) for p in frame.point_ids[frame.point_ids >= 0]}
    cand = [p for p in pts if p not in matched]
    visible = local_map_filter(map_, cand, frame.pose, mcs, cfg)
    for p in visible:
        map_.points[p].predicted += 1
    guided_search(frame, map_, visible, frame.pose, mcs, cfg, cfg.local_search_radius_px)
    n = optimize_frame_pose(frame, map_, mcs, cfg, frame.pose)
    for p in np.unique(frame.point_ids[frame.point_ids >= 0]):
        mp = map_.points.get(int(p))
        if mp is not None:
            mp.found += 1
            if int(p) in matched:
                mp.predicted += 1
    ref, _ = reference_mkf(frame, map_)
    return n, ref


def relocalize(frame: Frame, map_: Map, db, vocabulary, mcs, cfg: SlamConfig,
               seed: int = 0) -> bool:
    """BoW candidates, descriptor matching, GP3P RANSAC, refinement, local map."""
    if len(db) == 0:
        return False
    if frame.bow is None:
        frame.bow = vocabulary.compute_bow(frame.kps.desc)
    cands = db.query(frame.bow, 0.0)[:cfg.reloc_max_candidates]
    for mid, _ in cands:
        mkf = map_.mkfs.get(mid)
        if mkf is None:
            continue
        pids = sorted(mkf.point_set())
        if len(pids) < cfg.reloc_min_points:
            continue
        P, D = _points_arrays(map_, pids)
        ia, ib = match_descriptors(D, frame.kps.desc, max_distance=cfg.match_threshold,
                                   ratio=cfg.match_ratio)
        if ia.size <= cfg.reloc_min_points:
            continue
        prob = GP3PProblem(mcs, P[ia], frame.kps.cam[ib], frame.kps.uv[ib])
        try:
            rr = ransac(prob, RansacConfig(cfg.gp3p_max_iterations, cfg.gp3p_threshold_px,
                                           cfg.ransac_confidence, cfg.reloc_min_points + 1),
                        seed=seed + mid)
            inl = np.flatnonzero(rr.inliers)
            ref = refine_pose_nonlinear(rr.model, P[ia[inl]], frame.kps.cam[ib[inl]],
                                        frame.kps.uv[ib[inl]], mcs)
        except (NoModelFound, SlamError):
            continue
        frame.point_ids[:] = -1
        frame.point_ids[ib[inl]] = np.asarray(pids)[ia[inl]]
        n = optimize_frame_pose(frame, map_, mcs, cfg, ref.pose)
        if n <= cfg.reloc_min_points:
            frame.point_ids[:] = -1
            continue
        n, _ = track_local_map(frame, map_, mcs, cfg)
        if n > cfg.reloc_min_points:
            return True
        frame.point_ids[:] = -1
    return False


# ------------------------------------------------------------- initialization


@dataclass
class CameraPairModel:
    camera: int
    ia: np.ndarray          # matched flat keypoints in frame a
    ib: np.ndarray          # matched flat keypoints in frame b
    inliers: np.ndarray     # mask over the matches
    pose: SE3Pose | None    # camera-a -> camera-b, unit translation
    parallax: float         # median parallax (rad) of inlier triangulations


def _camera_matches(fa: Frame, fb: Frame, c: int, cfg: SlamConfig):
    sa, sb = fa.kps.camera_slice(c), fb.kps.camera_slice(c)
    ia, ib = match_descriptors(fa.kps.desc[sa], fb.kps.desc[sb],
                               max_distance=cfg.match_threshold, ratio=cfg.match_ratio)
    return ia + sa.start, ib + sb.start


def _essential_for_camera(fa: Frame, fb: Frame, c: int, cfg: SlamConfig, seed: int
                          ) -> CameraPairModel:
    ia, ib = _camera_matches(fa, fb, c, cfg)
    empty = CameraPairModel(c, ia, ib, np.zeros(ia.size, dtype=bool), None, 0.0)
    if ia.size < 8:
        return empty
    va, vb = fa.kps.bearing[ia], fb.kps.bearing[ib]
    try:
        rr = ransac(EssentialProblem(va, vb),
                    RansacConfig(cfg.essential_max_iterations,
                                 math.radians(cfg.essential_threshold_deg),
                                 cfg.ransac_confidence, 8), seed=seed + c)
        pose = decompose_essential(rr.model, va[rr.inliers], vb[rr.inliers])
    except SlamError:
        return empty
    inl = rr.inliers.copy()
    # parallax of inlier rays in the camera-a frame
    R, t = pose.rotation, pose.translation
    o2 = -R.T @ t
    X, s, u, par = triangulate_pairs(np.zeros((inl.sum(), 3)), va[inl],
                                     np.broadcast_to(o2, (inl.sum(), 3)), vb[inl] @ R)
    front = (s > 0) & (u > 0)
    idx = np.flatnonzero(inl)
    inl[idx[~front]] = False
    med = float(np.median(par[front])) if front.any() else 0.0
    return CameraPairModel(c, ia, ib, inl, pose, med)


@dataclass
class RigCorrespondences:
    """Bearing pairs between camera ``p`` of frame a and camera ``q`` of frame b."""

    p: np.ndarray
    q: np.ndarray
    va: np.ndarray
    vb: np.ndarray


def _rig_correspondences(models, fa: Frame, fb: Frame, mcs, cfg: SlamConfig
                         ) -> RigCorrespondences:
    """Same-camera matches of every camera plus descriptor matches across cameras."""
    P, Q, IA, IB = [], [], [], []
    for p in range(mcs.n_cameras):
        for q in range(mcs.n_cameras):
            if p == q:
                ia, ib = models[p].ia, models[p].ib
            else:
                sa, sb = fa.kps.camera_slice(p), fb.kps.camera_slice(q)
                ia, ib = match_descriptors(fa.kps.desc[sa], fb.kps.desc[sb],
                                           max_distance=cfg.match_threshold,
                                           ratio=cfg.match_ratio)
                ia, ib = ia + sa.start, ib + sb.start
            P.append(np.full(ia.size, p))
            Q.append(np.full(ia.size, q))
            IA.append(ia)
            IB.append(ib)
    ia, ib = np.concatenate(IA).astype(np.int64), np.concatenate(IB).astype(np.int64)
    return RigCorrespondences(np.concatenate(P).astype(np.int64),
                              np.concatenate(Q).astype(np.int64),
                              fa.kps.bearing[ia], fb.kps.bearing[ib])


def _rig_epipolar_errors(B: SE3Pose, corr: RigCorrespondences, mcs) -> np.ndarray:
    """Sine of the angle between each b-ray and the epipolar plane of its a-ray.

    ``B`` maps body-a coordinates to body-b coordinates, so camera p of frame
    a and camera q of frame b are related by ``M_q^-1 B M_p``.
    """
    Rp = np.stack([M.rotation for M in mcs.extrinsics])[corr.p]
    tp = np.stack([M.translation for M in mcs.extrinsics])[corr.p]
    Rq = np.stack([M.rotation for M in mcs.extrinsics])[corr.q]
    tq = np.stack([M.translation for M in mcs.extrinsics])[corr.q]
    # rays and camera centers expressed in body b
    da = np.einsum("ij,njk,nk->ni", B.rotation, Rp, corr.va)
    ca = tp @ B.rotation.T + B.translation
    db = np.einsum("nij,nj->ni", Rq, corr.vb)
    n = np.cross(ca - tq, da)
    return np.einsum("ij,ij->i", db, n) / np.maximum(np.linalg.norm(n, axis=1), 1e-12)


def _rig_motion(models, best: CameraPairModel, mcs, fa: Frame, fb: Frame, cfg: SlamConfig,
                max_rel_std: float = 0.05):
    """Metric body motion (body a -> body b) from all rig correspondences, or None.

    Starting from the best camera's essential decomposition at several
    trial scales, a robust least-squares fit over the epipolar errors of
    every same-camera and cross-camera pair refines all six degrees of
    freedom. The lever arms make the translation length observable; the
    estimate is rejected when its standard error exceeds ``max_rel_std``.
    """
    corr = _rig_correspondences(models, fa, fb, mcs, cfg)
    if corr.p.size < 20:
        return None
    thr = math.sin(math.radians(cfg.essential_threshold_deg))
    Mc = mcs.extrinsics[best.camera]

    def fit(B0: SE3Pose, sel, loss):
        sub = RigCorrespondences(corr.p[sel], corr.q[sel], corr.va[sel], corr.vb[sel])

        def fun(x):
            B = SE3Pose(so3_exp(x[:3]) @ B0.rotation, B0.translation + x[3:])
            return _rig_epipolar_errors(B, sub, mcs)
        r = least_squares(fun, np.zeros(6), loss=loss, f_scale=thr, method="trf",
                          x_scale="jac", ftol=1e-12, xtol=1e-12, max_nfev=200)
        x = r.x
        return SE3Pose(so3_exp(x[:3]) @ B0.rotation, B0.translation + x[3:]), r

    # the bounded arctan loss ignores wrong cross-camera matches
    everything = np.ones(corr.p.size, dtype=bool)
    best_fit = None
    for s0 in np.logspace(-2, 1, 7):
        B0 = Mc.compose(SE3Pose(best.pose.rotation, s0 * best.pose.translation)
                        ).compose(Mc.inverse())
        B, r = fit(B0, everything, "arctan")
        if best_fit is None or r.cost < best_fit[1].cost:
            best_fit = (B, r)
    inl = np.abs(_rig_epipolar_errors(best_fit[0], corr, mcs)) < thr
    if inl.sum() < 20:
        return None
    B, r = fit(best_fit[0], inl, "linear")
    e = r.fun
    # Gauss-Newton covariance of the translation on the inliers
    J = r.jac
    var = float(np.mean(e ** 2))
    try:
        cov = np.linalg.inv(J.T @ J) * var
    except np.linalg.LinAlgError:
        return None
    t = B.translation
    L = float(np.linalg.norm(t))
    if L <= 0:
        return None
    u = t / L
    std = math.sqrt(max(float(u @ cov[3:, 3:] @ u), 0.0))
    if std > max_rel_std * L:
        log.debug("rig scale not observable: |t| %.4g, std %.3g", L, std)
        return None
    return B


def initialize_map(fa: Frame, fb: Frame, map_: Map, mcs, cfg: SlamConfig, seed: int = 0,
                   require_metric: bool = False) -> tuple[MultiKeyframe, MultiKeyframe]:
    """Two-frame map from per-camera essential matrices; fills ``map_`` in place.

    Rigs with several cameras recover metric scale from the lever arms. When
    it is not observable the map is normalized to unit median depth, unless
    ``require_metric`` is set, which raises InsufficientParallax instead.
    """
    models = [_essential_for_camera(fa, fb, c, cfg, seed) for c in range(mcs.n_cameras)]
    min_par = math.radians(cfg.init_min_parallax_deg)
    with_parallax = [m for m in models if m.pose is not None and m.parallax >= min_par]
    if not with_parallax:
        raise InsufficientParallax("no camera shows enough parallax")
    best = max(with_parallax, key=lambda m: (int(m.inliers.sum()), -m.camera))
    if best.inliers.sum() < cfg.init_min_inliers:
        raise TooFewInliers(f"best camera has {int(best.inliers.sum())} inliers")
    B = _rig_motion(models, best, mcs, fa, fb, cfg) if mcs.n_cameras > 1 else None
    metric = B is not None
    if not metric:
        if require_metric:
            raise InsufficientParallax("metric scale not observable yet")
        Mc = mcs.extrinsics[best.camera]
        B = Mc.compose(best.pose).compose(Mc.inverse())   # body a -> body b coordinates
    pose_a = SE3Pose.identity()
    pose_b = B.inverse()

    # triangulate every camera's matches consistent with the rig motion
    pts, obs = [], []
    thr = math.radians(cfg.essential_threshold_deg)
    for m in models:
        if m.ia.size == 0:
            continue
        c = m.camera
        Mo = mcs.extrinsics[c]
        To = Mo.inverse().compose(B).compose(Mo)
        va, vb = fa.kps.bearing[m.ia], fb.kps.bearing[m.ib]
        E = skew(To.translation) @ To.rotation
        err = np.maximum(np.abs(np.einsum("ij,ij->i", vb, va @ E.T)) /
                         np.maximum(np.linalg.norm(va @ E.T, axis=1), 1e-15),
                         np.abs(np.einsum("ij,ij->i", va, vb @ E)) /
                         np.maximum(np.linalg.norm(vb @ E, axis=1), 1e-15))
        keep = np.arcsin(np.clip(err, 0, 1)) < thr
        if not keep.any():
            continue
        ia, ib = m.ia[keep], m.ib[keep]
        Ca, Cb = pose_a.compose(Mo), pose_b.compose(Mo)
        da = fa.kps.bearing[ia] @ Ca.rotation.T
        db = fb.kps.bearing[ib] @ Cb.rotation.T
        X, sa, sb, par = triangulate_pairs(np.broadcast_to(Ca.translation, da.shape), da,
                                           np.broadcast_to(Cb.translation, db.shape), db)
        ok = (sa > 0) & (sb > 0) & (par >= min_par)
        for k in np.flatnonzero(ok):
            pts.append(X[k])
            obs.append([(0, int(ia[k])), (1, int(ib[k]))])
    if len(pts) < cfg.init_min_inliers:
        raise TooFewInliers(f"only {len(pts)} points triangulated")
    P = np.array(pts)
    if not metric:
        # normalize so the median depth in frame a is one
        med = float(np.median(np.linalg.norm(P - pose_a.translation, axis=1)))
        P = P / med
        pose_b = SE3Pose(pose_b.rotation, pose_b.translation / med)

    frames = (fa, fb)
    poses = [pose_a, pose_b]
    # assign keypoints, then look for the points in the other cameras
    for f in frames:
        f.point_ids[:] = -1
    for i, o in enumerate(obs):
        for fi, k in o:
            frames[fi].point_ids[k] = i
    for fi, f in enumerate(frames):
        _init_cross_camera_search(f, poses[fi], P, obs, fi, mcs, cfg)

    # two-view bundle adjustment with the first pose fixed
    ep, el, ec, eu = [], [], [], []
    for i, o in enumerate(obs):
        for fi, k in o:
            ep.append(fi)
            el.append(i)
            ec.append(int(frames[fi].kps.cam[k]))
            eu.append(frames[fi].kps.uv[k])
    prob = BAProblem(poses, np.array([True, False]), P, np.array(ep), np.array(el),
                     np.array(ec), np.array(eu))
    res = bundle_adjust(prob, mcs, HuberKernel(cfg.huber_e), cfg.ba_iterations)
    poses, P = res.poses, res.points
    bad_edges = np.flatnonzero(res.outliers)
    for e in bad_edges:
        fi, i = ep[e], el[e]
        obs[i] = [(f, k) for f, k in obs[i] if f != fi]
    if not metric:
        med = float(np.median(np.linalg.norm(P - poses[0].translation, axis=1)))
        P = P / med
        poses[1] = SE3Pose(poses[1].rotation, poses[1].translation / med)

    good = [i for i, o in enumerate(obs) if {f for f, _ in o} == {0, 1}]
    if len(good) < cfg.init_min_inliers:
        raise TooFewInliers(f"only {len(good)} points survive two-view BA")
    mkfs = []
    for fi, f in enumerate(frames):
        mkf = MultiKeyframe(map_.new_mkf_id(), f.timestamp, poses[fi], f.kps)
        map_.insert_mkf(mkf)
        mkfs.append(mkf)
    for i in good:
        k0 = next(k for f, k in obs[i] if f == 0)
        p = map_.new_point(P[i], fa.kps.desc[k0], mkfs[0].id)
        for fi, k in obs[i]:
            map_.add_observation(p.id, mkfs[fi].id, k)
        update_point_statistics(p, map_, cfg.scale_factor, cfg.n_levels)
    for fi, f in enumerate(frames):
        f.pose = poses[fi]
        f.point_ids = mkfs[fi].point_ids.copy()
    log.info("map initialized: %d points, camera %d, metric scale %s", len(good),
             best.camera, metric)
    return mkfs[0], mkfs[1]


def _init_cross_camera_search(frame: Frame, pose: SE3Pose, P: np.ndarray, obs, fi: int, mcs,
                              cfg: SlamConfig):
    """Find initial points in cameras other than the ones that triangulated them."""
    n = P.shape[0]
    skip = np.zeros((n, mcs.n_cameras), dtype=bool)
    D = np.zeros((n, 4), dtype=np.uint64)
    for i, o in enumerate(obs):
        for f, k in o:
            if f == fi:
                skip[i, frame.kps.cam[k]] = True
                D[i] = frame.kps.desc[k]
    pi, ki, _ = search_by_projection(frame.kps, P, D, pose, mcs, cfg.search_radius_px,
                                     taken=frame.point_ids >= 0, skip_cams=skip,
                                     max_distance=cfg.match_threshold, ratio=cfg.match_ratio)
    for i, k in zip(pi, ki):
        obs[i].append((fi, int(k)))
        frame.point_ids[k] = i


# ------------------------------------------------------------- tracker


def resolve_frame_points(frame: Frame, map_: Map):
    """Re-point matches at fused survivors and drop matches to erased points."""
    for k in np.flatnonzero(frame.point_ids >= 0):
        frame.point_ids[k] = map_.resolve(int(frame.point_ids[k]))
    # a fusion can leave two keypoints of one camera on the same point
    seen = set()
    for k in np.flatnonzero(frame.point_ids >= 0):
        key = (int(frame.point_ids[k]), int(frame.kps.cam[k]))
        if key in seen:
            frame.point_ids[k] = -1
        seen.add(key)


class Tracker:
    """Per-frame state machine UNINITIALIZED -> OK <-> LOST."""

    def __init__(self, map_: Map, db, vocabulary, mcs, cfg: SlamConfig):
        self.map = map_
        self.db = db
        self.vocabulary = vocabulary
        self.mcs = mcs
        self.cfg = cfg
        self.status = Status.UNINITIALIZED
        self.last: Frame | None = None
        self.velocity = np.zeros(6)
        self.ref_mkf: int | None = None
        self.last_mkf_index = 0
        self.reloc_index = -10**9
        self.init_ref: Frame | None = None
        self.first_index: int | None = None
        self.init_mkfs: tuple | None = None

    # ---------------------------------------------------------------- init

    def _try_initialize(self, frame: Frame) -> bool:
        cfg = self.cfg
        if self.first_index is None:
            self.first_index = frame.index
        if frame.index - self.first_index >= cfg.init_max_frames:
            raise InitializationFailed(
                f"no initialization within {cfg.init_max_frames} frames")
        if self.init_ref is None or self.init_ref.kps.n == 0:
            self.init_ref = frame
            return False
        gap = frame.index - self.init_ref.index
        if gap < cfg.init_frame_gap:
            return False
        try:
            # insist on metric scale during the first half of the budget
            patient = frame.index - self.first_index < cfg.init_max_frames // 2
            a, b = initialize_map(self.init_ref, frame, self.map, self.mcs, cfg,
                                  seed=cfg.seed + frame.index,
                                  require_metric=patient and self.mcs.n_cameras > 1)
        except InsufficientParallax:
            return False
        except TooFewInliers:
            self.init_ref = frame
            return False
        self.status = Status.OK
        self.velocity = se3_log(a.pose.inverse().compose(b.pose)) / gap
        self.ref_mkf = b.id
        self.last_mkf_index = frame.index
        self.last = frame
        self.init_mkfs = (a, b)
        return True

    # ---------------------------------------------------------------- main

    def track(self, frame: Frame) -> FrameState:
        """Process one frame; the frame's pose and matches are filled in place."""
        map_, mcs, cfg = self.map, self.mcs, self.cfg
        if self.status == Status.UNINITIALIZED:
            self._try_initialize(frame)
            return self._state(frame)
        n = 0
        with map_.lock:
            if self.status == Status.OK:
                resolve_frame_points(self.last, map_)
                predicted = predict_pose(self.last.pose, self.velocity)
                ok = frame.kps.n > 0 and track_from_previous(frame, self.last, map_, mcs, cfg,
                                                             predicted)
                if ok:
                    n, ref = track_local_map(frame, map_, mcs, cfg)
                    ok = n >= cfg.lost_min_matches
                if ok:
                    self.velocity = update_velocity(self.last.pose, frame.pose)
                    self.ref_mkf = ref if ref is not None else self.ref_mkf
                else:
                    self.status = Status.LOST
                    frame.pose = predicted
                    frame.point_ids[:] = -1
            else:
                if frame.kps.n > 0 and relocalize(frame, map_, self.db, self.vocabulary, mcs,
                                                  cfg, seed=cfg.seed + frame.index):
                    self.status = Status.OK
                    self.reloc_index = frame.index
                    self.velocity = np.zeros(6)
                    self.ref_mkf, _ = reference_mkf(frame, map_)
                    n = frame.n_matched_points()
                else:
                    frame.pose = None
                    frame.point_ids[:] = -1
        if self.status == Status.OK:
            self.last = frame
        return self._state(frame, n)

    def apply_correction(self, C) -> None:
        """Move the last tracked frame by the similarity ``C`` (old world -> new world)."""
        with self.map.lock:
            if self.last is not None and self.last.pose is not None:
                pose = self.last.pose
                self.last.pose = SE3Pose(C.rotation @ pose.rotation, C.apply(pose.translation))
            self.velocity = np.concatenate([self.velocity[:3], self.velocity[3:] * C.scale])

    def _state(self, frame: Frame, n: int | None = None) -> FrameState:
        if n is None:
            n = frame.n_matched_points()
        return FrameState(frame.timestamp, frame.pose, self.status, int(n),
                          self.velocity.copy())

    def want_mkf(self, frame: Frame, mapping_idle: bool) -> bool:
        if self.status != Status.OK or frame.pose is None:
            return False
        ref = self.map.mkfs.get(self.ref_mkf) if self.ref_mkf is not None else None
        n_ref = len(ref.point_set()) if ref is not None else 0
        cfg = self.cfg
        return should_insert_mkf(frame.index - self.last_mkf_index, mapping_idle,
                                 frame.index - self.reloc_index, frame.n_matched_points(), n_ref,
                                 cfg.fps, cfg.mkf_min_tracked, cfg.mkf_max_overlap,
                                 cfg.mkf_min_frames_factor, cfg.mkf_reloc_frames_factor)

    def make_mkf(self, frame: Frame) -> MultiKeyframe:
        """New MKF carrying the frame's pose and matches (not yet inserted)."""
        self.last_mkf_index = frame.index
        return MultiKeyframe(self.map.new_mkf_id(), frame.timestamp, frame.pose, frame.kps,
                             frame.point_ids)
