import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcslam.geometry import (
    AngleNearPi, SE3Pose, Sim3Transform, quaternion_to_rotation, random_rotation,
    relative_pose, rot_z, rotation_to_quaternion, se3_exp, se3_log, sim3_exp,
    sim3_log, sim3_to_rigid, skew, so3_exp,
)


def random_twist(rng, max_angle=np.pi - 1e-3):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return np.concatenate([axis * rng.uniform(0, max_angle), rng.uniform(-3, 3, 3)])


def random_pose(rng):
    return SE3Pose(random_rotation(rng, np.pi - 1e-3), rng.uniform(-5, 5, 3))


def random_sim3(rng):
    return Sim3Transform(rng.uniform(0.5, 2.0), random_rotation(rng, np.pi - 1e-3),
                         rng.uniform(-5, 5, 3))


def test_zero_twist_is_identity():
    assert se3_exp(np.zeros(6)).almost_equal(SE3Pose.identity(), 0.0)


def test_quarter_turn_matches_rodrigues():
    P = se3_exp(np.array([0, 0, np.pi / 2, 0, 0, 0]))
    # Rodrigues: R = cos(t) I + sin(t) [k]x + (1 - cos(t)) k k^T
    k = np.array([0.0, 0.0, 1.0])
    t = np.pi / 2
    R = np.cos(t) * np.eye(3) + np.sin(t) * skew(k) + (1 - np.cos(t)) * np.outer(k, k)
    np.testing.assert_allclose(P.rotation, R, atol=1e-15)
    np.testing.assert_allclose(P.translation, 0.0, atol=1e-15)


def test_se3_roundtrip_random():
    rng = np.random.default_rng(0)
    err = 0.0
    for _ in range(100):
        xi = random_twist(rng)
        err = max(err, np.abs(se3_log(se3_exp(xi)) - xi).max())
    assert err < 1e-9


def test_se3_log_special_cases():
    np.testing.assert_array_equal(se3_log(SE3Pose.identity()), np.zeros(6))
    xi = se3_log(SE3Pose(np.eye(3), [1, 2, 3]))
    np.testing.assert_allclose(xi, [0, 0, 0, 1, 2, 3], atol=1e-15)


def test_se3_exp_of_log_random_poses():
    rng = np.random.default_rng(1)
    for _ in range(100):
        P = random_pose(rng)
        assert se3_exp(se3_log(P)).almost_equal(P, 1e-9)


def test_log_near_pi_raises():
    R = so3_exp(np.array([0, 0, np.pi - 1e-8]))
    with pytest.raises(AngleNearPi):
        se3_log(SE3Pose(R, np.zeros(3)))


def test_small_angle_branch_is_continuous():
    for theta in [1e-12, 1e-9, 1e-8 * 0.999, 1e-8 * 1.001, 1e-7, 1e-2 * 0.999, 1e-2 * 1.001]:
        xi = np.array([theta, 0, 0, 0.3, -0.2, 0.1])
        assert np.abs(se3_log(se3_exp(xi)) - xi).max() < 1e-15


def test_sim3_special_cases():
    np.testing.assert_allclose(sim3_log(Sim3Transform.identity()), np.zeros(7), atol=1e-15)
    xi = sim3_log(Sim3Transform(2.0, np.eye(3), np.zeros(3)))
    np.testing.assert_allclose(xi, [0, 0, 0, 0, 0, 0, np.log(2)], atol=1e-15)


def test_sim3_roundtrip_random():
    rng = np.random.default_rng(2)
    err_t = err_xi = 0.0
    for _ in range(100):
        S = random_sim3(rng)
        err_t = max(err_t, np.abs(sim3_exp(sim3_log(S)).matrix() - S.matrix()).max())
        xi = np.concatenate([random_twist(rng), [rng.uniform(np.log(0.5), np.log(2))]])
        err_xi = max(err_xi, np.abs(sim3_log(sim3_exp(xi)) - xi).max())
    assert err_t < 1e-9
    assert err_xi < 1e-9


def test_sim3_exp_matches_matrix_exponential():
    from scipy.linalg import expm
    rng = np.random.default_rng(3)
    for _ in range(20):
        xi = np.concatenate([random_twist(rng), [rng.uniform(-0.7, 0.7)]])
        G = np.zeros((4, 4))
        G[:3, :3] = skew(xi[:3]) + xi[6] * np.eye(3)
        G[:3, 3] = xi[3:6]
        np.testing.assert_allclose(sim3_exp(xi).matrix(), expm(G), atol=1e-12)


def test_relative_pose():
    rng = np.random.default_rng(4)
    Mi, Mj = random_pose(rng), random_pose(rng)
    assert relative_pose(Mi, Mi).almost_equal(SE3Pose.identity(), 1e-12)
    assert relative_pose(SE3Pose.identity(), Mj).almost_equal(Mj, 1e-15)
    assert relative_pose(Mi, Mj).compose(Mi).almost_equal(Mj, 1e-12)


def test_sim3_to_rigid():
    R = rot_z(0.3)
    assert sim3_to_rigid(Sim3Transform(1.0, R, [1, 2, 3])).almost_equal(SE3Pose(R, [1, 2, 3]), 0)
    M = sim3_to_rigid(Sim3Transform(2.0, np.eye(3), [2, 4, 6]))
    np.testing.assert_allclose(M.translation, [1, 2, 3], atol=0)
    rng = np.random.default_rng(5)
    for _ in range(50):
        S = random_sim3(rng)
        np.testing.assert_allclose(sim3_to_rigid(S).translation * S.scale, S.translation,
                                   atol=1e-12)


def test_group_axioms_over_random_elements():
    rng = np.random.default_rng(6)
    worst_assoc = worst_inv = 0.0
    for _ in range(1000):
        A, B, C = random_pose(rng), random_pose(rng), random_pose(rng)
        lhs = (A @ B) @ C
        rhs = A @ (B @ C)
        worst_assoc = max(worst_assoc, np.abs(lhs.matrix() - rhs.matrix()).max())
        worst_inv = max(worst_inv, np.abs((A @ A.inverse()).matrix() - np.eye(4)).max())
        S = random_sim3(rng)
        worst_inv = max(worst_inv, np.abs((S @ S.inverse()).matrix() - np.eye(4)).max())
    assert worst_assoc < 1e-12
    assert worst_inv < 1e-9


def test_adjoints():
    rng = np.random.default_rng(7)
    P = random_pose(rng)
    xi = random_twist(rng, 1.0)
    lhs = P @ se3_exp(xi) @ P.inverse()
    assert lhs.almost_equal(se3_exp(P.adjoint() @ xi), 1e-10)
    S = random_sim3(rng)
    zeta = np.concatenate([random_twist(rng, 1.0), [0.2]])
    lhs = S @ sim3_exp(zeta) @ S.inverse()
    assert lhs.almost_equal(sim3_exp(S.adjoint() @ zeta), 1e-10)


def test_rotation_is_orthonormal():
    rng = np.random.default_rng(8)
    for _ in range(100):
        R = se3_exp(random_twist(rng)).rotation
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(R) - 1) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 1e-3))
def test_quaternion_roundtrip(q):
    q = np.asarray(q) / np.linalg.norm(q)
    R = quaternion_to_rotation(q)
    q2 = rotation_to_quaternion(R)
    np.testing.assert_allclose(quaternion_to_rotation(q2), R, atol=1e-12)
    assert abs(np.linalg.norm(q2) - 1) < 1e-12


def test_values_are_immutable():
    P = SE3Pose.identity()
    with pytest.raises(ValueError):
        P.translation[0] = 1.0
