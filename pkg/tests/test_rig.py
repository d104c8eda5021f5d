import numpy as np
import pytest

from mcslam.camera import camera_c1
from mcslam.errors import BehindCamera
from mcslam.geometry import SE3Pose, random_rotation
from mcslam.rig import MultiCameraSystem, load_calibration, save_calibration


def random_pose(rng):
    return SE3Pose(random_rotation(rng, 3.0), rng.uniform(-3, 3, 3))


def test_identity_reduces_to_camera(c1):
    mcs = MultiCameraSystem((c1,), (SE3Pose.identity(),))
    m, _ = mcs.multicol_project(0, SE3Pose.identity(), [0, 0, 1])
    assert (m.u, m.v) == (400.0, 400.0)


def test_manual_composition_oracle(r1, rng):
    M_t = random_pose(rng)
    for c in range(3):
        # a point straight ahead of camera c
        M_c = r1.extrinsics[c]
        p = M_t.apply(M_c.apply(np.array([0.3, -0.2, 2.0])))
        T = np.linalg.inv(M_c.matrix()) @ np.linalg.inv(M_t.matrix())
        p_cam = (T @ np.append(p, 1))[:3]
        expected = r1.cameras[c].project(p_cam)
        m, pc = r1.multicol_project(c, M_t, p)
        np.testing.assert_allclose(pc, p_cam, atol=1e-12)
        assert abs(m.u - expected.u) < 1e-9 and abs(m.v - expected.v) < 1e-9
        # associativity: (M_t M_c)^-1 in one step
        one = r1.cameras[c].project(M_t.compose(M_c).inverse().apply(p))
        assert abs(one.u - m.u) < 1e-9 and abs(one.v - m.v) < 1e-9


def test_gauge_invariance(r1, rng):
    M_t = random_pose(rng)
    p = M_t.apply(r1.extrinsics[1].apply([0.1, 0.1, 3.0]))
    G = random_pose(rng)
    m0, _ = r1.multicol_project(1, M_t, p)
    m1, _ = r1.multicol_project(1, G.compose(M_t), G.apply(p))
    assert abs(m0.u - m1.u) < 1e-9 and abs(m0.v - m1.v) < 1e-9
    shift = SE3Pose(np.eye(3), [5, -2, 1])
    m2, _ = r1.multicol_project(1, shift.compose(M_t), shift.apply(p))
    assert abs(m0.u - m2.u) < 1e-9


def test_behind_camera(r1):
    with pytest.raises(BehindCamera):
        r1.multicol_project(0, SE3Pose.identity(), [-5, 0, 0])


def test_project_to_all(r1):
    I = SE3Pose.identity()
    hits = r1.project_to_all(I, [5.0, 0, 0])
    assert [c for c, _ in hits] == [0]
    assert r1.project_to_all(I, [0, 0, -5.0]) == []
    # the bisector between cameras 0 and 1 lies 60 deg from both axes, inside 67.5
    a = np.radians(60)
    hits = r1.project_to_all(I, 5 * np.array([np.cos(a), np.sin(a), 0]))
    assert sorted(c for c, _ in hits) == [0, 1]


def test_body_rays(r1):
    o, d = r1.body_rays(2, np.array([[0, 0, 1.0]]))
    np.testing.assert_allclose(o[0], r1.extrinsics[2].translation)
    np.testing.assert_allclose(d[0], r1.extrinsics[2].rotation[:, 2])


def test_calibration_roundtrip(r1, tmp_path):
    path = tmp_path / "rig.yaml"
    save_calibration(r1, path)
    back = load_calibration(path)
    assert back.n_cameras == 3
    for a, b in zip(r1.cameras, back.cameras):
        np.testing.assert_array_equal(a.inverse_poly, b.inverse_poly)
        assert a.mirror_radius == b.mirror_radius
    for a, b in zip(r1.extrinsics, back.extrinsics):
        assert a.almost_equal(b, 0)


def test_calibration_without_inverse_poly_refits(tmp_path):
    import yaml
    d = camera_c1().to_dict()
    del d["inverse_poly"]
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"cameras": [d]}))
    mcs = load_calibration(path)
    assert mcs.cameras[0].roundtrip_residual() < 0.05
