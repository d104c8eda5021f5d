"""Synthetic datasets shared by the end-to-end tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mcslam.errors import SlamError
from mcslam.evaluation import Trajectory, align_sim3, associate, compute_ate
from mcslam.rig import rig_r1
from mcslam.sim import (NoiseSpec, generate_scene, generate_trajectory, render_frame,
                        render_observations)

NOISY = dict(pixel_sigma=0.5, bit_flips=8, dropout=0.05)


@dataclass
class Dataset:
    mcs: object
    scene: object
    trajectory: object
    records: list


def _noise(noisy: bool, seed: int) -> NoiseSpec:
    return NoiseSpec(seed=seed, **(NOISY if noisy else {}))


def circle_dataset(n_frames: int = 500, noisy: bool = False, n_cameras: int = 3, seed: int = 1,
                   count: int = 5000) -> Dataset:
    """Radius-2 m circle inside a cylindrical landmark shell (diameter 4 m)."""
    mcs = rig_r1().subset(n_cameras)
    scene = generate_scene({"count": count, "seed": seed,
                            "region": {"kind": "cylinder_shell", "center": [0, 0], "r_min": 5,
                                       "r_max": 8, "z_min": 0, "z_max": 3}})
    traj = generate_trajectory("circle", {"radius": 2, "n_frames": 500,
                                          "laps": 1.0}, seed=seed)
    traj.timestamps, traj.poses = traj.timestamps[:n_frames], traj.poses[:n_frames]
    return Dataset(mcs, scene, traj, render_observations(scene, traj, mcs, _noise(noisy, 3)))


def loop_dataset(n_frames: int = 900, noisy: bool = True, seed: int = 1, only=None) -> Dataset:
    """One lap (plus 15 %) around a 16 m square ring corridor; revisits the start.

    ``only`` renders just those frame indices (records become a dict).
    """
    mcs = rig_r1()
    scene = generate_scene({"count": 5000, "seed": seed,
                            "region": {"kind": "corridor", "outer": 10, "inner": 6,
                                       "height": 4}})
    traj = generate_trajectory("loop", {"half_size": 8, "n_frames": n_frames,
                                        "extra": 0.15}, seed=seed)
    noise = _noise(noisy, 3)
    if only is not None:
        recs = {i: render_frame(scene, traj.poses[i], mcs, noise,
                                np.random.default_rng([noise.seed, i]), traj.timestamps[i])
                for i in only}
        return Dataset(mcs, scene, traj, recs)
    return Dataset(mcs, scene, traj, render_observations(scene, traj, mcs, noise))


def rotation_dataset(seed: int, n_cameras: int = 3, n_frames: int = 250) -> Dataset:
    """Small circle with a 90 deg/s spin and a 25 deg yaw/pitch wobble on top."""
    mcs = rig_r1().subset(n_cameras)
    scene = generate_scene({"count": 5000, "seed": seed,
                            "region": {"kind": "cylinder_shell", "center": [0, 0], "r_min": 5,
                                       "r_max": 8, "z_min": 0, "z_max": 3}})
    traj = generate_trajectory("circle", {"radius": 2, "n_frames": n_frames,
                                          "laps": n_frames / 500, "yaw_rate_deg": 90,
                                          "wobble_deg": 25, "wobble_hz": 0.8}, seed=seed)
    noise = NoiseSpec(seed=seed, **NOISY)
    return Dataset(mcs, scene, traj, render_observations(scene, traj, mcs, noise))


def mkf_ate(state, trajectory) -> float:
    """Sim(3)-aligned ATE of the MKF poses; inf when fewer than 3 MKFs survive."""
    ts, poses = state.mkf_trajectory()
    gt = Trajectory(np.asarray(trajectory.timestamps), list(trajectory.poses))
    try:
        pairs = associate(gt, Trajectory(ts, poses))
        return compute_ate(pairs, align_sim3(pairs))
    except SlamError:
        return float("inf")

