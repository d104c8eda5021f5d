"""Trajectory files, association, similarity alignment, ATE and RPE."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NoPairs, TrajectoryTooShort
from .geometry import (SE3Pose, Sim3Transform, quaternion_to_rotation, rotation_to_quaternion,
                       so3_log)
from .solvers import horn_similarity


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list[SE3Pose]

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)


def format_tum_line(t: float, pose: SE3Pose) -> str:
    q = rotation_to_quaternion(pose.rotation)
    x, y, z = pose.translation
    return (f"{t:.6f} {x:.9f} {y:.9f} {z:.9f} "
            f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}")


def write_tum(path, timestamps, poses) -> None:
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, p in zip(timestamps, poses):
            fh.write(format_tum_line(float(t), p) + "\n")


def read_tum(path) -> Trajectory:
    ts, poses = [], []
    try:
        fh = open(path)
    except OSError as exc:
        raise FormatError(f"cannot open trajectory {path}: {exc}") from None
    with fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 8:
                raise FormatError(f"{path}:{n}: expected 8 fields, got {len(parts)}")
            try:
                v = [float(x) for x in parts]
            except ValueError:
                raise FormatError(f"{path}:{n}: non-numeric field") from None
            q = np.array(v[4:8])
            if abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise FormatError(f"{path}:{n}: quaternion not unit norm")
            if ts and v[0] <= ts[-1]:
                raise FormatError(f"{path}:{n}: timestamps not strictly increasing")
            ts.append(v[0])
            poses.append(SE3Pose(quaternion_to_rotation(q), v[1:4]))
    return Trajectory(np.array(ts), poses)


@dataclass
class PosePairs:
    timestamps: np.ndarray
    gt: list[SE3Pose]
    est: list[SE3Pose]

    def __len__(self) -> int:
        return len(self.gt)


def associate(gt: Trajectory, est: Trajectory, max_dt: float = 0.02) -> PosePairs:
    """Greedy nearest-timestamp pairing, each pose used at most once."""
    tg = np.asarray(gt.timestamps, dtype=float)
    te = np.asarray(est.timestamps, dtype=float)
    if tg.size == 0 or te.size == 0:
        raise NoPairs("empty trajectory")
    cands = []
    for i, t in enumerate(tg):
        lo = np.searchsorted(te, t - max_dt, side="left")
        hi = np.searchsorted(te, t + max_dt, side="right")
        for j in range(lo, hi):
            dt = abs(te[j] - t)
            if dt <= max_dt:
                cands.append((dt, i, j))
    cands.sort()
    used_g, used_e, pairs = set(), set(), []
    for dt, i, j in cands:
        if i in used_g or j in used_e:
            continue
        used_g.add(i)
        used_e.add(j)
        pairs.append((i, j))
    if not pairs:
        raise NoPairs(f"no timestamps agree within {max_dt} s")
    pairs.sort()
    return PosePairs(tg[[i for i, _ in pairs]], [gt.poses[i] for i, _ in pairs],
                     [est.poses[j] for _, j in pairs])


def align_sim3(pairs: PosePairs) -> Sim3Transform:
    """Similarity S with S * est ~= gt over the paired positions."""
    a = np.array([p.translation for p in pairs.gt])
    b = np.array([p.translation for p in pairs.est])
    return horn_similarity(a, b)


def ate_errors(pairs: PosePairs, alignment: Sim3Transform | None = None) -> np.ndarray:
    """Per-pose translational norm of M_gt^-1 S M_est."""
    S = Sim3Transform.identity() if alignment is None else alignment
    out = np.empty(len(pairs))
    for k, (g, e) in enumerate(zip(pairs.gt, pairs.est)):
        E = Sim3Transform.from_rigid(g.inverse()) @ S @ Sim3Transform.from_rigid(e)
        out[k] = np.linalg.norm(E.translation)
    return out


def compute_ate(pairs: PosePairs, alignment: Sim3Transform | None = None) -> float:
    if len(pairs) == 0:
        raise NoPairs("no pose pairs")
    e = ate_errors(pairs, alignment)
    return float(np.sqrt(np.mean(e * e)))


def rpe_errors(pairs: PosePairs, delta: int = 1, mode: str = "trans") -> np.ndarray:
    n = len(pairs)
    if n <= delta:
        raise TrajectoryTooShort(f"{n} pairs cannot form step-{delta} relative poses")
    out = np.empty(n - delta)
    for t in range(n - delta):
        rel_gt = pairs.gt[t].inverse() @ pairs.gt[t + delta]
        rel_est = pairs.est[t].inverse() @ pairs.est[t + delta]
        E = rel_gt.inverse() @ rel_est
        if mode in ("trans", "translation"):
            out[t] = np.linalg.norm(E.translation)
        elif mode in ("rot", "rotation"):
            out[t] = math.degrees(np.linalg.norm(so3_log(E.rotation)))
        else:
            raise ValueError(f"unknown RPE mode {mode!r}")
    return out


def compute_rpe(pairs: PosePairs, delta: int = 1, mode: str = "trans") -> float:
    """RMS relative pose error in meters (trans) or degrees (rot)."""
    e = rpe_errors(pairs, delta, mode)
    return float(np.sqrt(np.mean(e * e)))


def evaluate_trajectory(gt: Trajectory, est: Trajectory, align: bool = True,
                        max_dt: float = 0.02) -> dict:
    pairs = associate(gt, est, max_dt)
    S = align_sim3(pairs) if align and len(pairs) >= 3 else None
    return {"pairs": len(pairs), "ate": compute_ate(pairs, S),
            "scale": S.scale if S is not None else 1.0}
