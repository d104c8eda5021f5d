"""Maps built straight from simulator ground truth, plus small helpers."""

from __future__ import annotations

import copy
import threading

import numpy as np

from mcslam.config import SlamConfig
from mcslam.mapdb import KeypointSet, Map, MultiKeyframe, update_point_statistics
from mcslam.mapping import insert_mkf
from mcslam.vocabulary import RecognitionDatabase, default_vocabulary


def landmark_of(record, kps: KeypointSet, k: int) -> int:
    c, local = kps.local(k)
    return int(record.landmark_ids[c][local])


def gt_map(ds, indices, cfg: SlamConfig | None = None):
    """Map whose MKFs sit at ground-truth poses and whose points are the true landmarks.

    Returns (map, db, vocabulary, landmark id -> point id).
    """
    cfg = cfg or SlamConfig()
    voc = default_vocabulary()
    db = RecognitionDatabase(voc)
    map_ = Map(ds.mcs)
    pid_of: dict[int, int] = {}
    for i in indices:
        rec = ds.records[i]
        kps = KeypointSet(ds.mcs, rec.cameras)
        ids = -np.ones(kps.n, dtype=np.int64)
        for k in range(kps.n):
            lm = landmark_of(rec, kps, k)
            if lm not in pid_of:
                pid_of[lm] = map_.new_point(ds.scene.landmarks[lm], kps.desc[k], -1).id
            ids[k] = pid_of[lm]
        mkf = MultiKeyframe(map_.new_mkf_id(), rec.timestamp, ds.trajectory.poses[i], kps, ids)
        insert_mkf(map_, db, voc, mkf)
    for p in list(map_.points.values()):
        if not p.obs:
            map_.erase_point(p.id)
            continue
        p.first_mkf = min(p.obs)
        update_point_statistics(p, map_, cfg.scale_factor, cfg.n_levels)
    return map_, db, voc, pid_of


def clone_map(map_: Map) -> Map:
    return copy.deepcopy(map_, {id(map_.lock): threading.RLock()})


def pose_error(a, b) -> tuple[float, float]:
    """Translation (m) and rotation (rad) difference of two rigid poses."""
    dR = a.rotation.T @ b.rotation
    ang = float(np.arccos(np.clip((np.trace(dR) - 1) / 2, -1.0, 1.0)))
    return float(np.linalg.norm(a.translation - b.translation)), ang
