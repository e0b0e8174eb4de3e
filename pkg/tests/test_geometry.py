import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import apply_qt, rotation_angle_between, scipy_euler, scipy_rotation
from toolalign.geometry import (
    DegenerateQuaternionError,
    EulerDelta,
    RigidTransform,
    as_cloud,
    diameter,
    euler_matrix,
    euler_matrix_jacobian,
    matrix_to_euler,
    matrix_to_quat,
    project_unit_quaternion,
    quat_matrix_jacobian,
    quat_to_matrix,
    random_rotation,
    random_transform,
    relative_pose_error,
    wrap_angle,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
quats = st.tuples(finite, finite, finite, finite).filter(lambda q: np.linalg.norm(q) > 1e-3)
angles = st.tuples(*(st.floats(-3.1, 3.1) for _ in range(3)))
seeds = st.integers(0, 2**32 - 1)


def test_as_cloud_validation():
    assert as_cloud([1, 2, 3]).shape == (1, 3)
    with pytest.raises(ValueError):
        as_cloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        as_cloud(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        as_cloud([[0, 0, np.nan]])


def test_degenerate_quaternion_rejected():
    with pytest.raises(DegenerateQuaternionError):
        project_unit_quaternion([0, 0, 0, 0])
    with pytest.raises(DegenerateQuaternionError):
        RigidTransform([0, 0, 0, 1e-15], [0, 0, 0])


@given(quats)
def test_quaternion_projected_and_canonical(q):
    T = RigidTransform(q, [0, 0, 0])
    assert abs(np.linalg.norm(T.rotation) - 1) < 1e-12
    assert T.rotation[0] >= 0


@given(quats)
def test_quat_matrix_matches_scipy(q):
    u = project_unit_quaternion(q)
    assert np.allclose(quat_to_matrix(u), scipy_rotation(u), atol=1e-12)


@given(quats)
def test_matrix_to_quat_roundtrip(q):
    u = project_unit_quaternion(q)
    back = matrix_to_quat(quat_to_matrix(u))
    # q and -q are the same rotation; canonical form has w >= 0
    assert np.allclose(quat_to_matrix(back), quat_to_matrix(u), atol=1e-12)
    assert back[0] >= 0


@given(seeds)
def test_compose_and_inverse_against_point_oracle(seed):
    rng = np.random.default_rng(seed)
    A = random_transform(rng)
    B = random_transform(rng)
    P = rng.normal(size=(100, 3))
    expected = apply_qt(A.rotation, A.translation, apply_qt(B.rotation, B.translation, P))
    assert np.allclose(A.compose(B).apply(P), expected, atol=1e-12)
    assert np.allclose((A @ B).apply(P), expected, atol=1e-12)
    assert np.allclose(A.inverse().apply(A.apply(P)), P, atol=1e-12)
    assert A.compose(A.inverse()).allclose(RigidTransform.identity(), atol=1e-12)


def test_homogeneous_roundtrip():
    rng = np.random.default_rng(3)
    T = random_transform(rng)
    assert RigidTransform.from_homogeneous(T.homogeneous()).allclose(T, atol=1e-12)


def test_transform_is_immutable():
    T = RigidTransform.identity()
    with pytest.raises(ValueError):
        T.translation[0] = 1.0


@given(angles)
def test_euler_matches_scipy_extrinsic_xyz(a):
    assert np.allclose(euler_matrix(a), scipy_euler(a), atol=1e-12)


@given(angles)
def test_euler_roundtrip(a):
    R = euler_matrix(a)
    assert np.allclose(euler_matrix(matrix_to_euler(R)), R, atol=1e-9)


def test_gimbal_lock_pins_gamma():
    R = euler_matrix([0.3, np.pi / 2, 0.2])
    back = matrix_to_euler(R)
    assert back[2] == 0.0
    assert np.allclose(euler_matrix(back), R, atol=1e-9)


@given(st.floats(-50, 50))
def test_wrap_angle_range(x):
    y = float(wrap_angle(x))
    assert -np.pi < y <= np.pi
    assert abs(np.sin(y) - np.sin(x)) < 1e-9 and abs(np.cos(y) - np.cos(x)) < 1e-9


@given(seeds)
def test_euler_delta_roundtrip_on_points(seed):
    rng = np.random.default_rng(seed)
    d = EulerDelta.from_vector(np.concatenate([rng.uniform(-3, 3, 3), rng.normal(size=3)]))
    P = rng.normal(size=(20, 3))
    direct = P @ scipy_euler(d.rotation).T + d.translation
    assert np.allclose(d.to_transform().apply(P), direct, atol=1e-12)
    back = EulerDelta.from_transform(d.to_transform())
    assert np.allclose(back.to_transform().apply(P), direct, atol=1e-9)


def test_euler_delta_wraps_angles():
    d = EulerDelta([2 * np.pi + 0.1, 0, -np.pi], [0, 0, 0])
    assert np.allclose(d.rotation, [0.1, 0, np.pi])


def _fd_jacobian(f, x, h=1e-7):
    cols = []
    for k in range(len(x)):
        e = np.zeros(len(x))
        e[k] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols)


@given(angles)
@settings(max_examples=30)
def test_euler_jacobian_fd(a):
    a = np.array(a)
    assert np.allclose(euler_matrix_jacobian(a), _fd_jacobian(euler_matrix, a), atol=1e-7)


@given(quats)
@settings(max_examples=30)
def test_quat_jacobian_fd(q):
    q = np.array(q) / np.linalg.norm(q)
    assert np.allclose(quat_matrix_jacobian(q), _fd_jacobian(quat_to_matrix, q), atol=1e-6)


@given(seeds)
def test_random_rotation_unit_canonical(seed):
    q = random_rotation(np.random.default_rng(seed))
    assert abs(np.linalg.norm(q) - 1) < 1e-12 and q[0] >= 0


def test_random_rotation_uniform_statistics():
    # for Haar-uniform rotations E[trace R] = 0 and E[angle] = pi/2 + 2/pi
    rng = np.random.default_rng(0)
    Rs = [quat_to_matrix(random_rotation(rng)) for _ in range(20000)]
    tr = np.mean([np.trace(R) for R in Rs])
    ang = np.mean([rotation_angle_between(np.eye(3), R) for R in Rs])
    assert abs(tr) < 0.03
    assert abs(ang - (np.pi / 2 + 2 / np.pi)) < 0.02


def test_relative_pose_error():
    a = RigidTransform.identity()
    b = RigidTransform.from_matrix(euler_matrix([0, 0, 0.3]), [0.1, 0, 0])
    ang, dist = relative_pose_error(a, b)
    assert abs(ang - 0.3) < 1e-12 and abs(dist - 0.1) < 1e-12
    assert relative_pose_error(b, b) == (0.0, 0.0)


def test_diameter_matches_brute():
    rng = np.random.default_rng(1)
    P = rng.normal(size=(300, 3))
    brute = np.sqrt(((P[:, None] - P[None]) ** 2).sum(-1).max())
    assert diameter(P) == pytest.approx(brute, rel=1e-12)
