"""Map storage: keypoints, Multi-Keyframes, map points and the co-visibility graph."""

from __future__ import annotations

import math
import threading
from collections import defaultdict

import numpy as np

from .camera import N_LEVELS, SCALE_FACTOR
from .errors import DuplicateId, NoObservations
from .features import DESC_WORDS, KeypointGrid, hamming_matrix
from .geometry import SE3Pose


class KeypointSet:
    """Keypoints of all cameras of one rig image set, flattened camera by camera.

    Flat index ``k`` maps to ``(cam[k], k - offsets[cam[k]])`` and back via
    ``offsets[c] + local``, both in constant time.
    """

    def __init__(self, mcs, per_camera):
        uvs, octs, descs, cams = [], [], [], []
        for c, (uv, octave, desc) in enumerate(per_camera):
            uv = np.asarray(uv, dtype=float).reshape(-1, 2)
            uvs.append(uv)
            octs.append(np.asarray(octave, dtype=np.int64).reshape(-1))
            descs.append(np.asarray(desc, dtype=np.uint64).reshape(-1, DESC_WORDS))
            cams.append(np.full(uv.shape[0], c, dtype=np.int64))
        counts = [u.shape[0] for u in uvs]
        self.n_cameras = len(per_camera)
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.uv = np.concatenate(uvs) if uvs else np.zeros((0, 2))
        self.octave = np.concatenate(octs) if octs else np.zeros(0, dtype=np.int64)
        self.desc = (np.concatenate(descs) if descs
                     else np.zeros((0, DESC_WORDS), dtype=np.uint64))
        self.cam = np.concatenate(cams) if cams else np.zeros(0, dtype=np.int64)
        self.bearing = np.zeros((self.n, 3))
        self.grids = []
        for c in range(self.n_cameras):
            sl = slice(self.offsets[c], self.offsets[c + 1])
            cam = mcs.cameras[c]
            if counts[c]:
                self.bearing[sl] = cam.unproject_points(self.uv[sl])
            self.grids.append(KeypointGrid(self.uv[sl], cam.image_size))
        self.words = None  # vocabulary word per keypoint, filled on demand

    @property
    def n(self) -> int:
        return int(self.offsets[-1])

    def flat(self, c: int, local: int) -> int:
        return int(self.offsets[c] + local)

    def local(self, k: int) -> tuple[int, int]:
        c = int(self.cam[k])
        return c, int(k - self.offsets[c])

    def camera_slice(self, c: int) -> slice:
        return slice(int(self.offsets[c]), int(self.offsets[c + 1]))

    def query(self, c: int, u: float, v: float, radius: float) -> np.ndarray:
        """Flat indices of camera-``c`` keypoints within ``radius`` pixels."""
        return self.grids[c].query(u, v, radius) + self.offsets[c]


class MultiKeyframe:
    def __init__(self, mkf_id: int, timestamp: float, pose: SE3Pose, kps: KeypointSet,
                 point_ids: np.ndarray | None = None):
        self.id = mkf_id
        self.timestamp = timestamp
        self.pose = pose
        self.kps = kps
        self.point_ids = (-np.ones(kps.n, dtype=np.int64) if point_ids is None
                          else np.asarray(point_ids, dtype=np.int64).copy())
        self.bow: dict[int, float] = {}
        self.bad = False

    def point_set(self) -> set[int]:
        return set(int(p) for p in np.unique(self.point_ids[self.point_ids >= 0]))

    def camera_centers(self, mcs) -> np.ndarray:
        return np.array([self.pose.apply(M.translation) for M in mcs.extrinsics])


class MapPoint:
    def __init__(self, pid: int, position, descriptor, first_mkf: int, created_at: int):
        self.id = pid
        self.position = np.asarray(position, dtype=float).copy()
        self.normal = np.array([0.0, 0.0, 1.0])
        self.d_min = 0.0
        self.d_max = 0.0
        self.descriptor = np.asarray(descriptor, dtype=np.uint64).copy()
        self.obs: dict[int, list[int]] = {}
        self.found = 1
        self.predicted = 1
        self.first_mkf = first_mkf
        self.created_at = created_at
        self.ref_mkf = first_mkf
        self.ref_kp = -1

    def n_mkfs(self) -> int:
        return len(self.obs)

    def n_obs(self) -> int:
        return sum(len(v) for v in self.obs.values())

    def found_ratio(self) -> float:
        return self.found / max(self.predicted, 1)

    def observation_list(self) -> list[tuple[int, int]]:
        return [(m, k) for m in sorted(self.obs) for k in sorted(self.obs[m])]


class CovisibilityGraph:
    """Undirected graph, weight = number of map points shared by two MKFs."""

    def __init__(self):
        self.w: dict[int, dict[int, int]] = defaultdict(dict)

    def add_node(self, a: int):
        self.w.setdefault(a, {})

    def change(self, a: int, b: int, delta: int):
        if a == b:
            return
        v = self.w[a].get(b, 0) + delta
        if v < 0:
            raise AssertionError(f"negative co-visibility weight between {a} and {b}")
        if v == 0:
            self.w[a].pop(b, None)
            self.w[b].pop(a, None)
        else:
            self.w[a][b] = v
            self.w[b][a] = v

    def weight(self, a: int, b: int) -> int:
        return self.w.get(a, {}).get(b, 0)

    def neighbors(self, a: int, min_weight: int = 0) -> list[int]:
        """Neighbors with weight > min_weight, heaviest first (ties by id)."""
        items = [(b, w) for b, w in self.w.get(a, {}).items() if w > min_weight]
        items.sort(key=lambda x: (-x[1], x[0]))
        return [b for b, _ in items]

    def remove_node(self, a: int):
        for b in list(self.w.get(a, {})):
            self.w[b].pop(a, None)
        self.w.pop(a, None)

    def edges(self):
        for a, nb in self.w.items():
            for b, w in nb.items():
                if a < b:
                    yield a, b, w


def query_local_mkfs(graph: CovisibilityGraph, ref: int, chi_min: int = 15) -> list[int]:
    return graph.neighbors(ref, chi_min)


class Map:
    def __init__(self, mcs):
        self.mcs = mcs
        self.mkfs: dict[int, MultiKeyframe] = {}
        self.points: dict[int, MapPoint] = {}
        self.covis = CovisibilityGraph()
        self.lock = threading.RLock()
        self.next_point_id = 0
        self.next_mkf_id = 0
        self.origin_id: int | None = None
        self.version = 0
        self.replaced: dict[int, int] = {}  # fused point id -> survivor
        # erased MKF id -> (parent id, parent^-1 * pose at erasure)
        self.erased: dict[int, tuple[int, SE3Pose]] = {}

    # MKFs -----------------------------------------------------------------

    def new_mkf_id(self) -> int:
        i = self.next_mkf_id
        self.next_mkf_id += 1
        return i

    def insert_mkf(self, mkf: MultiKeyframe):
        """Register an MKF and the map-point observations already assigned to it."""
        if mkf.id in self.mkfs:
            raise DuplicateId(f"MKF {mkf.id} already in the map")
        self.next_mkf_id = max(self.next_mkf_id, mkf.id + 1)
        assigned = mkf.point_ids.copy()
        mkf.point_ids[:] = -1
        self.mkfs[mkf.id] = mkf
        self.covis.add_node(mkf.id)
        if self.origin_id is None:
            self.origin_id = mkf.id
        for k in np.flatnonzero(assigned >= 0):
            pid = int(assigned[k])
            if pid in self.points:
                self.add_observation(pid, mkf.id, int(k))
        self.version += 1

    def erase_mkf(self, mid: int):
        mkf = self.mkfs[mid]
        nb = [n for n in self.covis.neighbors(mid) if n in self.mkfs]
        if not nb:
            nb = [n for n in self.mkfs if n != mid]
            nb = sorted(nb, key=lambda n: abs(n - mid))[:1]
        if nb:
            parent = nb[0]
            self.erased[mid] = (parent, self.mkfs[parent].pose.inverse().compose(mkf.pose))
        for k in np.flatnonzero(mkf.point_ids >= 0):
            pid = int(mkf.point_ids[k])
            self.remove_observation(pid, mid, int(k))
        self.covis.remove_node(mid)
        mkf.bad = True
        del self.mkfs[mid]
        self.version += 1

    def mkf_pose(self, mid: int) -> SE3Pose | None:
        """Current pose of an MKF; erased MKFs follow the parent they were attached to."""
        rel = SE3Pose.identity()
        while mid not in self.mkfs:
            if mid not in self.erased:
                return None
            mid, r = self.erased[mid]
            rel = r.compose(rel)
        return self.mkfs[mid].pose.compose(rel)

    # points ---------------------------------------------------------------

    def new_point(self, position, descriptor, first_mkf: int, created_at: int = 0) -> MapPoint:
        p = MapPoint(self.next_point_id, position, descriptor, first_mkf, created_at)
        self.next_point_id += 1
        self.points[p.id] = p
        return p

    def add_observation(self, pid: int, mid: int, k: int):
        p = self.points[pid]
        mkf = self.mkfs[mid]
        prev = int(mkf.point_ids[k])
        if prev == pid:
            return
        if prev >= 0:
            self.remove_observation(prev, mid, k)
        first_here = mid not in p.obs
        if first_here:
            for other in p.obs:
                self.covis.change(mid, other, +1)
            p.obs[mid] = []
        p.obs[mid].append(k)
        mkf.point_ids[k] = pid
        if p.ref_kp < 0:
            p.ref_mkf, p.ref_kp = mid, k

    def remove_observation(self, pid: int, mid: int, k: int):
        """Drop one observation; a point left without observations is erased."""
        p = self.points.get(pid)
        mkf = self.mkfs.get(mid)
        if mkf is not None and mkf.point_ids[k] == pid:
            mkf.point_ids[k] = -1
        if p is None or mid not in p.obs or k not in p.obs[mid]:
            return
        p.obs[mid].remove(k)
        if not p.obs[mid]:
            del p.obs[mid]
            for other in p.obs:
                self.covis.change(mid, other, -1)
        if not p.obs:
            del self.points[pid]
        elif p.ref_mkf == mid and p.ref_kp == k:
            m2 = min(p.obs)
            p.ref_mkf, p.ref_kp = m2, p.obs[m2][0]

    def erase_point(self, pid: int):
        p = self.points.get(pid)
        if p is None:
            return
        for mid, kk in list(p.obs.items()):
            for k in list(kk):
                self.remove_observation(pid, mid, k)
        self.points.pop(pid, None)

    def replace_point(self, old: int, new: int):
        """Move every observation of ``old`` to ``new`` and erase ``old``."""
        if old == new or old not in self.points or new not in self.points:
            return
        po, pn = self.points[old], self.points[new]
        obs = po.observation_list()
        found, predicted = po.found, po.predicted
        for mid, k in obs:
            self.remove_observation(old, mid, k)
            if mid in pn.obs and pn.obs[mid]:
                # same MKF already sees the survivor: keep one keypoint per camera
                c = self.mkfs[mid].kps.cam[k]
                if any(self.mkfs[mid].kps.cam[j] == c for j in pn.obs[mid]):
                    continue
            self.add_observation(new, mid, k)
        pn.found += found
        pn.predicted += predicted
        self.replaced[old] = new

    def resolve(self, pid: int) -> int:
        """Follow fusion replacements; -1 when the point no longer exists."""
        seen = 0
        while pid not in self.points and pid in self.replaced and seen < 64:
            pid = self.replaced[pid]
            seen += 1
        return pid if pid in self.points else -1

    # queries --------------------------------------------------------------

    def mkf_points(self, mid: int) -> list[int]:
        return sorted(self.mkfs[mid].point_set())

    def brute_force_covisibility(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = defaultdict(int)
        for p in self.points.values():
            ids = sorted(p.obs)
            for i in range(len(ids)):
                for j in range(i + 1, len(ids)):
                    counts[(ids[i], ids[j])] += 1
        return dict(counts)

    def audit(self) -> list[str]:
        """Referential-integrity and co-visibility checks; empty list when sound."""
        bad = []
        for pid, p in self.points.items():
            if not p.obs:
                bad.append(f"point {pid} has no observations")
            for mid, kk in p.obs.items():
                if mid not in self.mkfs:
                    bad.append(f"point {pid} references missing MKF {mid}")
                    continue
                for k in kk:
                    if not 0 <= k < self.mkfs[mid].kps.n:
                        bad.append(f"point {pid} references bad keypoint {mid}/{k}")
                    elif self.mkfs[mid].point_ids[k] != pid:
                        bad.append(f"point {pid} observation {mid}/{k} not mirrored in MKF")
            if abs(np.linalg.norm(p.normal) - 1.0) > 1e-9:
                bad.append(f"point {pid} normal not unit")
            if not 0 < p.d_min <= p.d_max:
                bad.append(f"point {pid} invalid distance range")
        for mid, mkf in self.mkfs.items():
            for k in np.flatnonzero(mkf.point_ids >= 0):
                pid = int(mkf.point_ids[k])
                p = self.points.get(pid)
                if p is None:
                    bad.append(f"MKF {mid} keypoint {k} references missing point {pid}")
                elif k not in p.obs.get(mid, []):
                    bad.append(f"MKF {mid} keypoint {k} not listed in point {pid}")
        ref = self.brute_force_covisibility()
        seen = {}
        for a, nb in self.covis.w.items():
            for b, w in nb.items():
                if a == b:
                    bad.append(f"self edge on {a}")
                if self.covis.w.get(b, {}).get(a) != w:
                    bad.append(f"asymmetric edge {a}-{b}")
                seen[(min(a, b), max(a, b))] = w
        if seen != ref:
            diff = set(seen.items()) ^ set(ref.items())
            bad.append(f"co-visibility differs from recount at {sorted(diff)[:5]}")
        for a in self.covis.w:
            if self.covis.w[a] and a not in self.mkfs:
                bad.append(f"co-visibility node {a} has no MKF")
        return bad

    def snapshot(self) -> dict:
        """Plain-data export of poses, points, observations and co-visibility."""
        return {
            "mkfs": [{"id": m.id, "timestamp": m.timestamp,
                      "pose": m.pose.matrix().ravel().tolist()}
                     for m in sorted(self.mkfs.values(), key=lambda m: m.id)],
            "points": [{"id": p.id, "position": p.position.tolist(),
                        "observations": p.observation_list()}
                       for p in sorted(self.points.values(), key=lambda p: p.id)],
            "covisibility": [[a, b, w] for a, b, w in sorted(self.covis.edges())],
        }


def covis_update_on_insert(map_: Map, mkf: MultiKeyframe) -> CovisibilityGraph:
    map_.insert_mkf(mkf)
    return map_.covis


def update_point_statistics(p: MapPoint, map_: Map, f: float = SCALE_FACTOR,
                            n_levels: int = N_LEVELS):
    """Recompute viewing direction, scale-invariance distances and descriptor."""
    if not p.obs:
        raise NoObservations(f"point {p.id} has no observations")
    mcs = map_.mcs
    dirs = []
    descs = []
    for mid, kk in p.obs.items():
        mkf = map_.mkfs[mid]
        for k in kk:
            c = int(mkf.kps.cam[k])
            center = mkf.pose.apply(mcs.extrinsics[c].translation)
            v = p.position - center
            dirs.append(v / np.linalg.norm(v))
            descs.append(mkf.kps.desc[k])
    n = np.sum(dirs, axis=0)
    nn = np.linalg.norm(n)
    p.normal = n / nn if nn > 1e-12 else dirs[0]
    ref = map_.mkfs[p.ref_mkf]
    c = int(ref.kps.cam[p.ref_kp])
    d = float(np.linalg.norm(p.position - ref.pose.apply(mcs.extrinsics[c].translation)))
    o = int(ref.kps.octave[p.ref_kp])
    p.d_max = d * f**o
    p.d_min = p.d_max / f**n_levels
    D = np.array(descs)
    if len(D) > 2:
        H = hamming_matrix(D, D)
        p.descriptor = D[int(np.argmin(np.median(H, axis=1)))].copy()
    else:
        p.descriptor = D[0].copy()


def predict_octave(p: MapPoint, dist, f: float = SCALE_FACTOR, n_levels: int = N_LEVELS):
    """Pyramid level at which the point should appear at distance ``dist``."""
    return predict_octaves(p.d_max, dist, f, n_levels)


def predict_octaves(d_max: np.ndarray, dist: np.ndarray, f: float = SCALE_FACTOR,
                    n_levels: int = N_LEVELS) -> np.ndarray:
    """Vectorized :func:`predict_octave` over arrays of ``d_max`` and distances."""
    # points without distance statistics yet (d_max = 0) fall to level 0
    ratio = np.maximum(np.asarray(d_max, dtype=float), 1e-12) / np.maximum(dist, 1e-12)
    o = np.round(np.log(ratio) / math.log(f)).astype(np.int64)
    return np.clip(o, 0, n_levels - 1)
