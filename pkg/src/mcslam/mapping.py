"""Map growth and hygiene for each inserted multi-keyframe."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import SlamConfig
from .errors import EmptyWindow
from .features import best_matches, hamming_matrix
from .geometry import skew
from .mapdb import Map, MultiKeyframe, predict_octaves, update_point_statistics
from .matching import great_circle_matrix, search_by_projection
from .optim import BAProblem, HuberKernel, bundle_adjust
from .solvers import triangulate_pairs

log = logging.getLogger(__name__)


def insert_mkf(map_: Map, db, vocabulary, mkf: MultiKeyframe):
    """Add the MKF to the map and co-visibility graph and its BoW to the database."""
    with map_.lock:
        map_.insert_mkf(mkf)
        mkf.bow = vocabulary.compute_bow(mkf.kps.desc)
        db.add(mkf.id, mkf.bow)


def cull_recent_points(map_: Map, recent: list[int], seq: int, cfg: SlamConfig) -> list[int]:
    """Apply the probation rules to recently created points; ``recent`` is updated in place.

    ``seq`` is the running index of the MKF being processed and a point's
    ``created_at`` is the index of the MKF that created it.
    """
    removed, keep = [], []
    for pid in recent:
        p = map_.points.get(pid)
        if p is None:
            continue
        age = seq - p.created_at
        if p.found_ratio() < cfg.cull_found_ratio:
            map_.erase_point(pid)
            removed.append(pid)
        elif age >= cfg.cull_min_mkfs and p.n_mkfs() < cfg.cull_min_mkfs:
            map_.erase_point(pid)
            removed.append(pid)
        elif age < cfg.cull_min_mkfs:
            keep.append(pid)
    recent[:] = keep
    return removed


def _median_depth(map_: Map, mkf: MultiKeyframe) -> float:
    pids = list(mkf.point_set())
    if not pids:
        return math.inf
    P = np.array([map_.points[p].position for p in pids])
    return float(np.median(np.linalg.norm(P - mkf.pose.translation, axis=1)))


def _camera_pose(mkf: MultiKeyframe, mcs, c: int):
    return mkf.pose.compose(mcs.extrinsics[c])


def create_new_points(map_: Map, mkf: MultiKeyframe, mcs, cfg: SlamConfig, seq: int = 0
                      ) -> list[int]:
    """Triangulate unassigned keypoints of ``mkf`` against its best co-visible MKFs.

    Every camera pair of the two rigs is searched, so points may be
    triangulated from two different cameras.
    """
    neighbors = map_.covis.neighbors(mkf.id)[:cfg.triangulation_neighbors]
    cos_par = math.cos(math.radians(cfg.min_parallax_deg))
    epi = math.radians(cfg.epipolar_threshold_deg)
    created = []
    for nid in neighbors:
        nb = map_.mkfs.get(nid)
        if nb is None:
            continue
        baseline = np.linalg.norm(mkf.pose.translation - nb.pose.translation)
        if baseline / _median_depth(map_, nb) <= cfg.min_baseline_ratio:
            continue
        for ci in range(mcs.n_cameras):
            Ci = _camera_pose(mkf, mcs, ci)
            si = mkf.kps.camera_slice(ci)
            for cj in range(mcs.n_cameras):
                Cj = _camera_pose(nb, mcs, cj)
                sj = nb.kps.camera_slice(cj)
                ki = np.flatnonzero(mkf.point_ids[si] < 0) + si.start
                kj = np.flatnonzero(nb.point_ids[sj] < 0) + sj.start
                if ki.size == 0 or kj.size == 0:
                    continue
                T = Cj.inverse().compose(Ci)            # camera i -> camera j
                if np.linalg.norm(T.translation) < 1e-12:
                    continue
                E = skew(T.translation / np.linalg.norm(T.translation)) @ T.rotation
                va, vb = mkf.kps.bearing[ki], nb.kps.bearing[kj]
                allowed = great_circle_matrix(E, va, vb) < epi
                if not allowed.any():
                    continue
                H = hamming_matrix(mkf.kps.desc[ki], nb.kps.desc[kj])
                best = best_matches(H, allowed, cfg.match_threshold, cfg.match_ratio)
                rows = np.flatnonzero(best >= 0)
                if rows.size == 0:
                    continue
                ka, kb = ki[rows], kj[best[rows]]
                da = mkf.kps.bearing[ka] @ Ci.rotation.T
                db = nb.kps.bearing[kb] @ Cj.rotation.T
                X, s, t, _ = triangulate_pairs(np.broadcast_to(Ci.translation, da.shape), da,
                                               np.broadcast_to(Cj.translation, db.shape), db)
                cosp = np.einsum("ij,ij->i", da, db)
                ok = (s > 0) & (t > 0) & (cosp < cos_par) & np.isfinite(X).all(axis=1)
                ok &= _reproj_ok(mcs, ci, mkf, ka, X, cfg) & _reproj_ok(mcs, cj, nb, kb, X, cfg)
                for m in np.flatnonzero(ok):
                    a, b = int(ka[m]), int(kb[m])
                    if mkf.point_ids[a] >= 0 or nb.point_ids[b] >= 0:
                        continue
                    p = map_.new_point(X[m], mkf.kps.desc[a], mkf.id, seq)
                    map_.add_observation(p.id, mkf.id, a)
                    map_.add_observation(p.id, nb.id, b)
                    update_point_statistics(p, map_, cfg.scale_factor, cfg.n_levels)
                    created.append(p.id)
    return created


def _reproj_ok(mcs, c: int, mkf: MultiKeyframe, ks, X, cfg: SlamConfig) -> np.ndarray:
    uv, valid, _ = mcs.project_batch(c, mkf.pose, X)
    err = np.linalg.norm(uv - mkf.kps.uv[ks], axis=1)
    thr = cfg.reproj_threshold_px * cfg.scale_factor ** mkf.kps.octave[ks]
    return valid & (err < thr)


def _epipolar_consistent(map_: Map, mcs, pid: int, target: MultiKeyframe, k: int,
                         threshold: float) -> bool:
    """The target keypoint lies on the great circle of some existing observation."""
    p = map_.points[pid]
    ct = int(target.kps.cam[k])
    Ct = _camera_pose(target, mcs, ct)
    vb = target.kps.bearing[k][None]
    for mid, kk in p.obs.items():
        src = map_.mkfs[mid]
        for j in kk:
            Cs = _camera_pose(src, mcs, int(src.kps.cam[j]))
            T = Ct.inverse().compose(Cs)
            n = np.linalg.norm(T.translation)
            if n < 1e-9:
                continue
            E = skew(T.translation / n) @ T.rotation
            if great_circle_matrix(E, src.kps.bearing[j][None], vb)[0, 0] < threshold:
                return True
    return False


def _fuse_into(map_: Map, pids, target: MultiKeyframe, mcs, cfg: SlamConfig) -> int:
    """Project ``pids`` into ``target`` and merge or add observations."""
    pids = [p for p in pids if p in map_.points and target.id not in map_.points[p].obs]
    if not pids:
        return 0
    P = np.array([map_.points[p].position for p in pids])
    D = np.array([map_.points[p].descriptor for p in pids], dtype=np.uint64)
    dist = np.linalg.norm(P - target.pose.translation, axis=1)
    d_max = np.array([map_.points[p].d_max for p in pids], dtype=float)
    octv = predict_octaves(d_max, dist, cfg.scale_factor, cfg.n_levels)
    pi, ki, _ = search_by_projection(target.kps, P, D, target.pose, mcs, cfg.fuse_radius_px,
                                     octv, 1, max_distance=cfg.match_threshold,
                                     ratio=cfg.match_ratio, scale_factor=cfg.scale_factor)
    epi = math.radians(cfg.epipolar_threshold_deg)
    n = 0
    for i, k in zip(pi, ki):
        pid = map_.resolve(pids[i])
        if pid < 0 or target.id in map_.points[pid].obs:
            continue
        if not _epipolar_consistent(map_, mcs, pid, target, int(k), epi):
            continue
        q = int(target.point_ids[k])
        if q >= 0 and q != pid:
            a, b = map_.points[pid], map_.points[q]
            keep, drop = (a, b) if (a.n_obs(), -a.id) > (b.n_obs(), -b.id) else (b, a)
            map_.replace_point(drop.id, keep.id)
            update_point_statistics(keep, map_, cfg.scale_factor, cfg.n_levels)
            n += 1
        elif q < 0:
            map_.add_observation(pid, target.id, int(k))
            update_point_statistics(map_.points[pid], map_, cfg.scale_factor, cfg.n_levels)
            n += 1
    return n


def fuse_points(map_: Map, mkf: MultiKeyframe, mcs, cfg: SlamConfig, neighbors=None) -> int:
    """Merge duplicates between ``mkf`` and its neighbors, in both directions."""
    if neighbors is None:
        neighbors = map_.covis.neighbors(mkf.id)[:cfg.local_map_neighbors]
    n = 0
    for nid in neighbors:
        nb = map_.mkfs.get(nid)
        if nb is not None:
            n += _fuse_into(map_, sorted(mkf.point_set()), nb, mcs, cfg)
    cand = set()
    for nid in neighbors:
        if nid in map_.mkfs:
            cand |= map_.mkfs[nid].point_set()
    n += _fuse_into(map_, sorted(cand), mkf, mcs, cfg)
    return n


@dataclass
class LocalBAReport:
    inner: list
    outer: list
    n_points: int
    cost_before: float
    cost_after: float
    removed_edges: int = 0
    iterations: int = 0
    extra: dict = field(default_factory=dict)


def local_window(map_: Map, mid: int, cfg: SlamConfig, max_inner: int = 15):
    """(inner MKF ids, point ids, outer MKF ids) of the double window around ``mid``."""
    inner = [mid] + map_.covis.neighbors(mid)[:max_inner]
    inner = [m for m in inner if m in map_.mkfs]
    pts = set()
    for m in inner:
        pts |= map_.mkfs[m].point_set()
    pts = sorted(pts)
    inner_set = set(inner)
    outer = sorted({o for p in pts for o in map_.points[p].obs} - inner_set)
    return inner, pts, outer


def local_bundle_adjust(map_: Map, mid: int, mcs, cfg: SlamConfig, max_inner: int = 15
                        ) -> LocalBAReport:
    """Double-window BA: inner poses and all their points free, outer observers fixed."""
    inner, pts, outer = local_window(map_, mid, cfg, max_inner)
    if not inner or not pts:
        raise EmptyWindow(f"nothing to optimize around MKF {mid}")
    order = inner + outer
    index = {m: i for i, m in enumerate(order)}
    fixed = np.array([m not in inner or m == map_.origin_id for m in order])
    if fixed.sum() < 2:
        # scale is barely observable through the short rig lever arms, so a
        # window anchored by a single pose can slide along it: pin the oldest
        # other inner MKF as well
        others = [i for i, m in enumerate(order) if not fixed[i] and m != mid]
        if others:
            fixed[min(others, key=lambda i: order[i])] = True
    pindex = {p: i for i, p in enumerate(pts)}
    ep, el, ec, eu, keys = [], [], [], [], []
    for p in pts:
        for m, k in map_.points[p].observation_list():
            mkf = map_.mkfs[m]
            ep.append(index[m])
            el.append(pindex[p])
            ec.append(int(mkf.kps.cam[k]))
            eu.append(mkf.kps.uv[k])
            keys.append((p, m, k))
    prob = BAProblem([map_.mkfs[m].pose for m in order], fixed,
                     np.array([map_.points[p].position for p in pts]), np.array(ep),
                     np.array(el), np.array(ec), np.array(eu).reshape(-1, 2))
    res = bundle_adjust(prob, mcs, HuberKernel(cfg.huber_e), cfg.ba_iterations)
    for m, pose in zip(order, res.poses):
        if m in inner:
            map_.mkfs[m].pose = pose
    for p, i in pindex.items():
        map_.points[p].position = res.points[i].copy()
    removed = 0
    for e in np.flatnonzero(res.outliers):
        p, m, k = keys[e]
        if p in map_.points:
            map_.remove_observation(p, m, k)
            removed += 1
    for p in pts:
        if p in map_.points:
            update_point_statistics(map_.points[p], map_, cfg.scale_factor, cfg.n_levels)
    return LocalBAReport(inner, outer, len(pts), res.costs[0], res.costs[-1], removed,
                         res.iterations)


def cull_mkfs(map_: Map, candidates, cfg: SlamConfig, db=None) -> list[int]:
    """Erase MKFs whose points are mostly seen by enough other MKFs."""
    removed = []
    for mid in candidates:
        if mid == map_.origin_id or mid not in map_.mkfs:
            continue
        pts = map_.mkfs[mid].point_set()
        if not pts:
            continue
        redundant = sum(1 for p in pts if map_.points[p].n_mkfs() - 1 >= cfg.mkf_cull_observers)
        if redundant >= cfg.mkf_cull_redundancy * len(pts):
            map_.erase_mkf(mid)
            if db is not None:
                db.erase(mid)
            removed.append(mid)
    return removed


class LocalMapper:
    """Runs the full mapping iteration for each MKF, strictly in insertion order."""

    def __init__(self, map_: Map, db, vocabulary, mcs, cfg: SlamConfig):
        self.map = map_
        self.db = db
        self.vocabulary = vocabulary
        self.mcs = mcs
        self.cfg = cfg
        self.recent: list[int] = []
        self.seq = 0
        self.removed_mkfs: list[int] = []

    def add_initial(self, mkfs):
        """Register MKFs built by map initialization (already inserted in the map)."""
        with self.map.lock:
            for mkf in mkfs:
                mkf.bow = self.vocabulary.compute_bow(mkf.kps.desc)
                self.db.add(mkf.id, mkf.bow)
                self.seq += 1

    def process(self, mkf: MultiKeyframe) -> dict:
        map_, cfg, mcs = self.map, self.cfg, self.mcs
        stats = {}
        with map_.lock:
            insert_mkf(map_, self.db, self.vocabulary, mkf)
            self.seq += 1
            for pid in mkf.point_set():
                update_point_statistics(map_.points[pid], map_, cfg.scale_factor,
                                        cfg.n_levels)
            stats["culled_points"] = len(cull_recent_points(map_, self.recent, self.seq, cfg))
            new = create_new_points(map_, mkf, mcs, cfg, self.seq)
            self.recent.extend(new)
            stats["new_points"] = len(new)
            stats["fused"] = fuse_points(map_, mkf, mcs, cfg)
            try:
                rep = local_bundle_adjust(map_, mkf.id, mcs, cfg)
                stats["ba_removed_edges"] = rep.removed_edges
            except EmptyWindow:
                rep = None
            local = map_.covis.neighbors(mkf.id) if mkf.id in map_.mkfs else []
            culled = cull_mkfs(map_, local, cfg, self.db)
            self.removed_mkfs.extend(culled)
            stats["culled_mkfs"] = len(culled)
            map_.version += 1
        return stats
