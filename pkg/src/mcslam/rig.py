"""Multi-camera rig: projection ``m = pi_c(M_c^-1 M_t^-1 p)`` through each camera."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import yaml

from .camera import GenericCamera, ImagePoint, camera_c1, radius_for_angle
from .errors import BehindCamera, CalibrationError, DegeneratePoint
from .geometry import SE3Pose

ANGLE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class MultiCameraSystem:
    cameras: tuple[GenericCamera, ...]
    extrinsics: tuple[SE3Pose, ...]

    def __post_init__(self):
        cams = tuple(self.cameras)
        ext = tuple(self.extrinsics)
        if len(cams) < 1 or len(cams) != len(ext):
            raise CalibrationError("need at least one camera and one extrinsic per camera")
        object.__setattr__(self, "cameras", cams)
        object.__setattr__(self, "extrinsics", ext)
        object.__setattr__(self, "_body_to_cam", tuple(M.inverse() for M in ext))

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)

    def subset(self, n: int) -> "MultiCameraSystem":
        return MultiCameraSystem(self.cameras[:n], self.extrinsics[:n])

    # frames ---------------------------------------------------------------

    def world_to_camera(self, c: int, M_t: SE3Pose, P: np.ndarray) -> np.ndarray:
        """Camera-frame coordinates ``M_c^-1 M_t^-1 p`` for (N, 3) or (3,) points."""
        return self._body_to_cam[c].apply(M_t.inverse().apply(P))

    def camera_pose_world(self, c: int, M_t: SE3Pose) -> SE3Pose:
        """Camera-to-world transform ``M_t M_c``."""
        return M_t.compose(self.extrinsics[c])

    def body_rays(self, c: int, bearings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Ray origins and unit directions in the body frame for camera-frame bearings."""
        M_c = self.extrinsics[c]
        d = np.atleast_2d(bearings) @ M_c.rotation.T
        return np.broadcast_to(M_c.translation, d.shape).copy(), d

    # projection -----------------------------------------------------------

    def multicol_project(self, c: int, M_t: SE3Pose, p, octave: int = 0
                         ) -> tuple[ImagePoint, np.ndarray]:
        """Pixel of world point ``p`` in camera ``c`` and the camera-frame point."""
        p_cam = self.world_to_camera(c, M_t, np.asarray(p, dtype=float).reshape(3))
        if np.linalg.norm(p_cam) < 1e-12:
            raise DegeneratePoint("point coincides with the projection center")
        cam = self.cameras[c]
        if cam.ray_angles(p_cam[None])[0] > cam.theta_max + ANGLE_TOL:
            raise BehindCamera(f"ray angle exceeds the field of view of camera {c}")
        return cam.project(p_cam, octave), p_cam

    def project_batch(self, c: int, M_t: SE3Pose, P: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(uv, valid, p_cam) for (N, 3) world points in camera ``c``."""
        P = np.atleast_2d(P)
        X = self.world_to_camera(c, M_t, P)
        cam = self.cameras[c]
        n = np.linalg.norm(X, axis=1)
        valid = (n > 1e-12) & (cam.ray_angles(X) <= cam.theta_max + ANGLE_TOL)
        uv = cam.project_points(X)
        valid &= cam.in_boundary(uv)
        return uv, valid, X

    def project_to_all(self, M_t: SE3Pose, p) -> list[tuple[int, ImagePoint]]:
        out = []
        p = np.asarray(p, dtype=float).reshape(1, 3)
        for c in range(self.n_cameras):
            uv, valid, _ = self.project_batch(c, M_t, p)
            if valid[0]:
                out.append((c, ImagePoint(float(uv[0, 0]), float(uv[0, 1]))))
        return out

    # serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {"cameras": [dict(cam.to_dict(), M_c=M.matrix().ravel().tolist())
                            for cam, M in zip(self.cameras, self.extrinsics)]}

    @classmethod
    def from_dict(cls, d: dict) -> "MultiCameraSystem":
        if not isinstance(d, dict) or "cameras" not in d:
            raise CalibrationError("calibration document needs a 'cameras' list")
        cams, ext = [], []
        for entry in d["cameras"]:
            cams.append(GenericCamera.from_dict(entry))
            M = np.asarray(entry.get("M_c", np.eye(4).ravel()), dtype=float)
            if M.size != 16:
                raise CalibrationError("M_c must hold 16 row-major values")
            ext.append(SE3Pose.from_matrix(M.reshape(4, 4)))
        return cls(tuple(cams), tuple(ext))


def load_calibration(path) -> MultiCameraSystem:
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise CalibrationError(f"cannot parse calibration {path}: {exc}") from None
    return MultiCameraSystem.from_dict(doc)


def save_calibration(mcs: MultiCameraSystem, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(mcs.to_dict(), fh, sort_keys=False)


R1_FOV_DEG = 135.0


def camera_extrinsic(yaw: float, offset: float) -> SE3Pose:
    """Camera looking along body direction ``yaw`` in the xy-plane, image y = body -z."""
    z = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    y = np.array([0.0, 0.0, -1.0])
    x = np.cross(y, z)
    return SE3Pose(np.column_stack([x, y, z]), offset * z)


def rig_r1() -> MultiCameraSystem:
    """Three fisheyes 120 degrees apart, 5 cm lever arms, ~15 degree overlap."""
    c1 = camera_c1()
    radius = radius_for_angle(c1.forward_poly, np.radians(R1_FOV_DEG / 2), c1.mirror_radius)
    cam = GenericCamera(forward_poly=c1.forward_poly, principal_point=c1.principal_point,
                        image_size=c1.image_size, mirror_radius=radius)
    yaws = np.radians([0.0, 120.0, 240.0])
    return MultiCameraSystem((cam,) * 3, tuple(camera_extrinsic(y, 0.05) for y in yaws))
