"""Deterministic synthetic world: landmarks, trajectories, rendered observations, drift."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .camera import N_LEVELS, SCALE_FACTOR
from .features import DESC_WORDS, desc_to_hex, descs_from_hex
from .geometry import SE3Pose, Sim3Transform, rot_x, rot_y, rot_z, se3_exp, so3_exp

UNIVERSE_SEED = 20240611
N_ROOTS = 10
BRANCH = 10
ROOT_FLIPS = 30
CLASS_FLIPS = 20
LANDMARK_FLIPS = 30
PALETTE_CELL = 4.0  # m, side of the cells sharing a descriptor-class palette
PALETTE_SIZE = 60


# descriptors ---------------------------------------------------------------

def pack_bits(bits: np.ndarray) -> np.ndarray:
    """(N, 256) bool -> (N, 4) uint64, bit b of word w is descriptor bit 64 w + b."""
    by = np.packbits(bits.astype(np.uint8), axis=1, bitorder="little")
    return by.view("<u8").astype(np.uint64)


def unpack_bits(desc: np.ndarray) -> np.ndarray:
    d = np.ascontiguousarray(np.atleast_2d(desc), dtype="<u8")
    return np.unpackbits(d.view(np.uint8), axis=1, bitorder="little")


def flip_bits(desc: np.ndarray, n_flips: int, rng: np.random.Generator) -> np.ndarray:
    """Copy of (N, 4) descriptors with exactly ``n_flips`` distinct bits flipped per row."""
    desc = np.atleast_2d(np.asarray(desc, dtype=np.uint64))
    if n_flips <= 0 or desc.shape[0] == 0:
        return desc.copy()
    pos = np.argpartition(rng.random((desc.shape[0], 256)), n_flips - 1, axis=1)[:, :n_flips]
    mask = np.zeros((desc.shape[0], 256), dtype=bool)
    np.put_along_axis(mask, pos, True, axis=1)
    return desc ^ pack_bits(mask)


class DescriptorUniverse:
    """Three-level family of descriptor classes: roots, children, classes."""

    def __init__(self, seed: int = UNIVERSE_SEED):
        rng = np.random.default_rng(seed)
        roots = pack_bits(rng.random((N_ROOTS, 256)) < 0.5)
        children = flip_bits(np.repeat(roots, BRANCH, axis=0), ROOT_FLIPS, rng)
        self.classes = flip_bits(np.repeat(children, BRANCH, axis=0), CLASS_FLIPS, rng)

    @property
    def n_classes(self) -> int:
        return self.classes.shape[0]

    def palette(self, cell: tuple[int, int, int]) -> np.ndarray:
        """Class subset used by landmarks inside one spatial cell."""
        rng = np.random.default_rng([UNIVERSE_SEED, *(c + 10_000 for c in cell)])
        return rng.choice(self.n_classes, size=PALETTE_SIZE, replace=False)


_UNIVERSE: DescriptorUniverse | None = None


def universe() -> DescriptorUniverse:
    global _UNIVERSE
    if _UNIVERSE is None:
        _UNIVERSE = DescriptorUniverse()
    return _UNIVERSE


# scenes --------------------------------------------------------------------

@dataclass
class SimScene:
    landmarks: np.ndarray          # (N, 3) world points
    descriptors: np.ndarray        # (N, 4) identity descriptors
    d_ref: np.ndarray              # (N,) distance at which the point appears at octave 0
    response: np.ndarray           # (N,) detector response, fixed per landmark
    seed: int


def _sample_region(region: dict, n: int, rng: np.random.Generator) -> np.ndarray:
    kind = region.get("kind", "box")
    if kind == "box":
        lo = np.asarray(region["min"], dtype=float)
        hi = np.asarray(region["max"], dtype=float)
        return rng.uniform(lo, hi, size=(n, 3))
    if kind == "cylinder_shell":
        cx, cy = region.get("center", (0.0, 0.0))
        r = np.sqrt(rng.uniform(region["r_min"] ** 2, region["r_max"] ** 2, n))
        a = rng.uniform(0.0, 2 * np.pi, n)
        z = rng.uniform(region["z_min"], region["z_max"], n)
        return np.column_stack([cx + r * np.cos(a), cy + r * np.sin(a), z])
    if kind == "corridor":
        return _sample_corridor(region, n, rng)
    raise ValueError(f"unknown region kind {kind!r}")


def _sample_corridor(region: dict, n: int, rng: np.random.Generator) -> np.ndarray:
    """Square ring corridor: points on both walls, the floor and the ceiling."""
    outer = float(region.get("outer", 10.0))
    inner = float(region.get("inner", 6.0))
    height = float(region.get("height", 4.0))
    depth = float(region.get("wall_depth", 0.3))
    # area weights: outer wall, inner wall, floor+ceiling
    w = np.array([8 * outer * height, 8 * inner * height, 2 * 4 * (outer**2 - inner**2)])
    kind = rng.choice(3, size=n, p=w / w.sum())
    out = np.zeros((n, 3))
    for k, half, sgn in ((0, outer, 1.0), (1, inner, -1.0)):
        sel = np.flatnonzero(kind == k)
        side = rng.integers(4, size=sel.size)
        s = rng.uniform(-half, half, sel.size)
        off = half + sgn * rng.uniform(0.0, depth, sel.size)
        xy = np.where(side[:, None] == 0, np.column_stack([off, s]),
             np.where(side[:, None] == 1, np.column_stack([-off, s]),
             np.where(side[:, None] == 2, np.column_stack([s, off]),
                      np.column_stack([s, -off]))))
        out[sel, :2] = xy
        out[sel, 2] = rng.uniform(0.0, height, sel.size)
    sel = np.flatnonzero(kind == 2)
    m = sel.size
    pts = np.zeros((0, 2))
    while pts.shape[0] < m:
        cand = rng.uniform(-outer, outer, size=(2 * m + 16, 2))
        keep = np.max(np.abs(cand), axis=1) > inner
        pts = np.vstack([pts, cand[keep]])
    out[sel, :2] = pts[:m]
    floor = rng.random(m) < 0.5
    out[sel, 2] = np.where(floor, rng.uniform(-depth, 0.0, m),
                           height + rng.uniform(0.0, depth, m))
    return out


def _enforce_min_distance(P: np.ndarray, min_dist: float, region: dict, n: int,
                          rng: np.random.Generator) -> np.ndarray:
    cells: dict[tuple, list[int]] = {}
    kept: list[np.ndarray] = []
    pool = list(P)
    tries = 0
    while len(kept) < n:
        if not pool:
            tries += 1
            if tries > 200:
                raise ValueError("cannot place landmarks with the requested minimum distance")
            pool = list(_sample_region(region, n, rng))
        p = pool.pop(0)
        key = tuple(np.floor(p / min_dist).astype(int))
        ok = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for j in cells.get((key[0] + dx, key[1] + dy, key[2] + dz), ()):
                        if np.sum((kept[j] - p) ** 2) < min_dist * min_dist:
                            ok = False
                            break
        if ok:
            cells.setdefault(key, []).append(len(kept))
            kept.append(p)
    return np.array(kept)


def generate_scene(spec: dict) -> SimScene:
    """Landmarks in ``spec['region']`` with seeded identity descriptors.

    spec keys: count, region, seed, optional min_distance and d_ref [lo, hi].
    """
    n = int(spec["count"])
    if n < 1:
        raise ValueError("scene needs at least one landmark")
    seed = int(spec.get("seed", 0))
    rng = np.random.default_rng(seed)
    region = spec["region"]
    P = _sample_region(region, n, rng)
    if spec.get("min_distance"):
        P = _enforce_min_distance(P, float(spec["min_distance"]), region, n, rng)
    uni = universe()
    cls = np.empty(n, dtype=np.int64)
    cell_keys = np.floor(P / PALETTE_CELL).astype(int)
    for i in range(n):
        pal = uni.palette(tuple(cell_keys[i]))
        cls[i] = pal[rng.integers(pal.size)]
    desc = flip_bits(uni.classes[cls], LANDMARK_FLIPS, rng)
    lo, hi = spec.get("d_ref", (4.0, 8.0))
    d_ref = rng.uniform(lo, hi, n)
    response = rng.random(n)
    return SimScene(P, desc, d_ref, response, seed)


# trajectories --------------------------------------------------------------

@dataclass
class SimTrajectory:
    timestamps: np.ndarray
    poses: list[SE3Pose]
    fps: float

    def __len__(self) -> int:
        return len(self.poses)


def _body_rotation(yaw: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def _rounded_square(s: np.ndarray, half: float, radius: float):
    """Position and heading along a rounded square centreline at arc length s."""
    straight = 2 * (half - radius)
    arc = 0.5 * np.pi * radius
    side = straight + arc
    perim = 4 * side
    s = np.mod(s, perim)
    xy = np.zeros((s.size, 2))
    head = np.zeros(s.size)
    for i, si in enumerate(s):
        k = int(si // side)
        r = si - k * side
        # side k starts at the bottom edge going +x, then turns left (counter-clockwise)
        base = k * np.pi / 2
        d = np.array([np.cos(base), np.sin(base)])
        nrm = np.array([-np.sin(base), np.cos(base)])
        start = _rs_start(k, half, radius)
        if r <= straight:
            xy[i] = start + r * d
            head[i] = base
        else:
            a = (r - straight) / radius
            c = start + straight * d + radius * nrm
            xy[i] = c - radius * nrm * np.cos(a) + radius * d * np.sin(a)
            head[i] = base + a
    return xy, head, perim


def _rs_start(k: int, half: float, radius: float) -> np.ndarray:
    starts = [(-half + radius, -half), (half, -half + radius),
              (half - radius, half), (-half, half - radius)]
    return np.array(starts[k], dtype=float)


def generate_trajectory(kind: str, params: dict, fps: float = 25.0, seed: int = 0
                        ) -> SimTrajectory:
    """Smooth body trajectories; body x is forward, z is up.

    Common params: n_frames, height, yaw_rate_deg (spin on top of the heading),
    wobble_deg / wobble_hz (sinusoidal yaw/pitch oscillation).
    """
    if not fps > 0:
        raise ValueError("fps must be positive")
    n = int(params.get("n_frames", 500))
    t = np.arange(n) / fps
    h = float(params.get("height", 1.5))
    if kind == "line":
        start = np.asarray(params.get("start", (0.0, 0.0, h)), dtype=float)
        direction = np.asarray(params.get("direction", (1.0, 0.0, 0.0)), dtype=float)
        direction = direction / np.linalg.norm(direction)
        speed = float(params.get("speed", 1.0))
        pos = start + np.outer(speed * t, direction)
        heading = np.full(n, math.atan2(direction[1], direction[0]))
    elif kind == "circle":
        r = float(params.get("radius", 5.0))
        cx, cy = params.get("center", (0.0, 0.0))
        laps = float(params.get("laps", 1.0))
        a = 2 * np.pi * laps * np.arange(n) / n
        pos = np.column_stack([cx + r * np.cos(a), cy + r * np.sin(a), np.full(n, h)])
        heading = a + np.pi / 2
    elif kind == "loop":
        half = float(params.get("half_size", 8.0))
        radius = float(params.get("corner_radius", 2.0))
        extra = float(params.get("extra", 0.0))
        _, _, perim = _rounded_square(np.zeros(1), half, radius)
        s = perim * (1.0 + extra) * np.arange(n) / (n - 1)
        s += float(params.get("start_offset", 0.0))
        xy, heading, _ = _rounded_square(s, half, radius)
        pos = np.column_stack([xy, np.full(n, h)])
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    yaw = heading + np.radians(float(params.get("yaw_rate_deg", 0.0))) * t
    pitch = np.zeros(n)
    wob = np.radians(float(params.get("wobble_deg", 0.0)))
    if wob:
        hz = float(params.get("wobble_hz", 0.5))
        yaw = yaw + wob * np.sin(2 * np.pi * hz * t)
        pitch = 0.25 * wob * np.sin(2 * np.pi * 0.7 * hz * t + 1.0)
    poses = [SE3Pose(_body_rotation(yaw[i], pitch[i]), pos[i]) for i in range(n)]
    return SimTrajectory(t, poses, fps)


def constant_twist_trajectory(start: SE3Pose, twist, n: int, fps: float = 25.0
                              ) -> SimTrajectory:
    step = se3_exp(np.asarray(twist, dtype=float))
    poses = [start]
    for _ in range(n - 1):
        poses.append(poses[-1].compose(step))
    return SimTrajectory(np.arange(n) / fps, poses, fps)


# rendering -----------------------------------------------------------------

@dataclass
class FrameRecord:
    timestamp: float
    cameras: list[tuple[np.ndarray, np.ndarray, np.ndarray]]   # per camera (uv, octave, desc)
    landmark_ids: list[np.ndarray] | None = None                # sidecar only

    def n_keypoints(self) -> int:
        return sum(c[0].shape[0] for c in self.cameras)


@dataclass
class NoiseSpec:
    pixel_sigma: float = 0.0
    bit_flips: int = 0
    dropout: float = 0.0
    seed: int = 0
    features_per_camera: int = 400

    @classmethod
    def from_dict(cls, d: dict | None) -> "NoiseSpec":
        d = d or {}
        return cls(float(d.get("pixel_sigma", 0.0)), int(d.get("bit_flips", 0)),
                   float(d.get("dropout", 0.0)), int(d.get("seed", 0)),
                   int(d.get("features_per_camera", 400)))


def octave_for_distance(d_ref, dist):
    return np.round(np.log(np.asarray(d_ref) / np.asarray(dist)) / math.log(SCALE_FACTOR)
                    ).astype(np.int64)


def render_frame(scene: SimScene, pose: SE3Pose, mcs, noise: NoiseSpec,
                 rng: np.random.Generator, timestamp: float = 0.0) -> FrameRecord:
    cams, ids = [], []
    for c in range(mcs.n_cameras):
        uv, valid, X = mcs.project_batch(c, pose, scene.landmarks)
        dist = np.linalg.norm(X, axis=1)
        with np.errstate(divide="ignore"):
            octv = octave_for_distance(scene.d_ref, np.maximum(dist, 1e-12))
        valid &= (octv >= 0) & (octv < N_LEVELS)
        idx = np.flatnonzero(valid)
        if idx.size > noise.features_per_camera:
            top = np.argsort(-scene.response[idx], kind="stable")[:noise.features_per_camera]
            idx = np.sort(idx[top])
        keep = rng.random(idx.size) >= noise.dropout
        idx = idx[keep]
        pts = uv[idx] + noise.pixel_sigma * rng.standard_normal((idx.size, 2))
        inside = mcs.cameras[c].in_boundary(pts)
        idx, pts = idx[inside], pts[inside]
        desc = flip_bits(scene.descriptors[idx], noise.bit_flips, rng)
        order = np.lexsort((pts[:, 0], pts[:, 1]))
        cams.append((pts[order], octv[idx][order], desc[order]))
        ids.append(idx[order])
    return FrameRecord(float(timestamp), cams, ids)


def render_observations(scene: SimScene, trajectory: SimTrajectory, mcs, noise: NoiseSpec
                        ) -> list[FrameRecord]:
    """One record per trajectory pose; per-frame RNG streams keyed on (seed, index)."""
    out = []
    for i, (t, pose) in enumerate(zip(trajectory.timestamps, trajectory.poses)):
        rng = np.random.default_rng([noise.seed, i])
        out.append(render_frame(scene, pose, mcs, noise, rng, t))
    return out


# drift ---------------------------------------------------------------------

@dataclass
class DriftedTrajectory:
    timestamps: np.ndarray
    poses: list[Sim3Transform]              # drifted body-to-world similarities
    perturbations: list[Sim3Transform] = field(default_factory=list)


def inject_drift(trajectory: SimTrajectory, scale_rate: float, trans_rate: float,
                 seed: int = 0, rot_rate: float = 0.0) -> DriftedTrajectory:
    """Compound per-step similarity perturbations onto the relative motions.

    ``scale_rate`` is the per-step log-scale increment, ``trans_rate`` and
    ``rot_rate`` the per-step standard deviations of translation (m) and rotation (rad).
    D_{k+1} = D_k dT_k P_k with dT_k the true relative motion.
    """
    rng = np.random.default_rng(seed)
    poses = trajectory.poses
    D = [Sim3Transform.from_rigid(poses[0])]
    perts = []
    for k in range(len(poses) - 1):
        dT = Sim3Transform.from_rigid(poses[k].inverse().compose(poses[k + 1]))
        w = rot_rate * rng.standard_normal(3) if rot_rate else np.zeros(3)
        v = trans_rate * rng.standard_normal(3) if trans_rate else np.zeros(3)
        P = Sim3Transform(math.exp(scale_rate), so3_exp(w), v)
        perts.append(P)
        D.append(D[-1].compose(dT).compose(P))
    return DriftedTrajectory(trajectory.timestamps.copy(), D, perts)


# dataset I/O ---------------------------------------------------------------

def record_to_json(rec: FrameRecord) -> str:
    cams = []
    for uv, octv, desc in rec.cameras:
        cams.append([[float(uv[i, 0]), float(uv[i, 1]), int(octv[i]), desc_to_hex(desc[i])]
                     for i in range(uv.shape[0])])
    return json.dumps({"timestamp": float(rec.timestamp), "cameras": cams},
                      separators=(",", ":"))


def record_from_json(line: str) -> FrameRecord:
    doc = json.loads(line)
    cams = []
    for entries in doc["cameras"]:
        if entries:
            uv = np.array([[e[0], e[1]] for e in entries], dtype=float)
            octv = np.array([e[2] for e in entries], dtype=np.int64)
            desc = descs_from_hex([e[3] for e in entries])
        else:
            uv = np.zeros((0, 2))
            octv = np.zeros(0, dtype=np.int64)
            desc = np.zeros((0, DESC_WORDS), dtype=np.uint64)
        cams.append((uv, octv, desc))
    return FrameRecord(float(doc["timestamp"]), cams)


def write_dataset(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


def read_dataset(path) -> list[FrameRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(record_from_json(line))
    return out


def iter_dataset(path):
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield record_from_json(line)


def write_landmark_table(scene: SimScene, path) -> None:
    with open(path, "w") as fh:
        fh.write("# id x y z d_ref descriptor\n")
        for i in range(scene.landmarks.shape[0]):
            x, y, z = scene.landmarks[i]
            fh.write(f"{i} {x!r} {y!r} {z!r} {scene.d_ref[i]!r} "
                     f"{desc_to_hex(scene.descriptors[i])}\n")


def read_landmark_table(path) -> tuple[np.ndarray, np.ndarray]:
    P, D = [], []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            parts = line.split()
            P.append([float(v) for v in parts[1:4]])
            D.append(parts[5])
    return np.array(P), descs_from_hex(D)


def write_landmark_ids(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps([ids.tolist() for ids in rec.landmark_ids],
                                separators=(",", ":")) + "\n")


def read_landmark_ids(path) -> list[list[np.ndarray]]:
    with open(path) as fh:
        return [[np.array(c, dtype=np.int64) for c in json.loads(line)]
                for line in fh if line.strip()]
