"""Guided descriptor search shared by tracking, mapping and loop closing."""

from __future__ import annotations

import numpy as np

from .camera import SCALE_FACTOR
from .features import MATCH_THRESHOLD, RATIO, best_matches, hamming_matrix


def search_by_projection(kps, P: np.ndarray, D: np.ndarray, pose, mcs, radius,
                         pred_octave=None, octave_window: int = 1, taken=None,
                         skip_cams=None, max_distance: int = MATCH_THRESHOLD,
                         ratio: float = RATIO, scale_factor: float = SCALE_FACTOR,
                         cameras=None):
    """Match world points to keypoints around their projections.

    ``radius`` (scalar or per point) is scaled by ``f^octave`` of the predicted
    octave when given. ``taken`` masks keypoints that cannot be used and
    ``skip_cams`` is a (n_points, n_cameras) mask of point/camera pairs to
    skip. Returns (point index, flat keypoint index, Hamming distance) arrays;
    every keypoint is used at most once.
    """
    P = np.atleast_2d(P)
    n = P.shape[0]
    empty = (np.zeros(0, dtype=np.int64),) * 3
    if n == 0 or kps.n == 0:
        return empty
    radius = np.broadcast_to(np.asarray(radius, dtype=float), (n,))
    if pred_octave is not None:
        pred_octave = np.broadcast_to(np.asarray(pred_octave), (n,))
        radius = radius * scale_factor ** pred_octave
    out_p, out_k, out_d = [], [], []
    cams = range(mcs.n_cameras) if cameras is None else cameras
    for c in cams:
        sl = kps.camera_slice(c)
        if sl.stop == sl.start:
            continue
        uv, valid, _ = mcs.project_batch(c, pose, P)
        if skip_cams is not None:
            valid &= ~skip_cams[:, c]
        rows = np.flatnonzero(valid)
        if rows.size == 0:
            continue
        kuv = kps.uv[sl]
        d2 = np.sum((uv[rows, None, :] - kuv[None, :, :]) ** 2, axis=2)
        allowed = d2 <= (radius[rows] ** 2)[:, None]
        if taken is not None:
            allowed &= ~taken[sl][None, :]
        if pred_octave is not None:
            allowed &= np.abs(kps.octave[sl][None, :] - pred_octave[rows][:, None]) <= octave_window
        keep = allowed.any(axis=1)
        if not keep.any():
            continue
        rows, allowed = rows[keep], allowed[keep]
        cols_any = np.flatnonzero(allowed.any(axis=0))
        H = np.full(allowed.shape, 10_000, dtype=np.int64)
        H[:, cols_any] = hamming_matrix(D[rows], kps.desc[sl][cols_any])
        best = best_matches(H, allowed, max_distance, ratio, unique=True)
        ok = best >= 0
        out_p.append(rows[ok])
        out_k.append(best[ok] + sl.start)
        out_d.append(H[np.flatnonzero(ok), best[ok]])
    if not out_p:
        return empty
    return np.concatenate(out_p), np.concatenate(out_k), np.concatenate(out_d)


def match_descriptors(Da: np.ndarray, Db: np.ndarray, allowed=None,
                      max_distance: int = MATCH_THRESHOLD, ratio: float = RATIO):
    """Unique brute-force matches (ia, ib) between two descriptor sets."""
    if len(Da) == 0 or len(Db) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    H = hamming_matrix(Da, Db)
    if allowed is None:
        allowed = np.ones(H.shape, dtype=bool)
    best = best_matches(H, allowed, max_distance, ratio, unique=True)
    ia = np.flatnonzero(best >= 0)
    return ia, best[ia]


def great_circle_matrix(E: np.ndarray, va: np.ndarray, vb: np.ndarray) -> np.ndarray:
    """Symmetric great-circle distance (rad) for every pair (a_i, b_j)."""
    na = va @ E.T                                   # normals of circles in b
    nb = vb @ E                                     # normals of circles in a
    na /= np.maximum(np.linalg.norm(na, axis=1, keepdims=True), 1e-15)
    nb /= np.maximum(np.linalg.norm(nb, axis=1, keepdims=True), 1e-15)
    eb = np.abs(np.arcsin(np.clip(na @ vb.T, -1, 1)))     # (na, nb): vb_j vs circle of a_i
    ea = np.abs(np.arcsin(np.clip(va @ nb.T, -1, 1)))     # va_i vs circle of b_j
    return np.maximum(ea, eb)
