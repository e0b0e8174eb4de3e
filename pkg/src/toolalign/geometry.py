"""Point-cloud and SE(3) primitives.

Point clouds are plain ``(n, 3)`` float64 arrays in meters. Rotations are unit
quaternions stored as ``(w, x, y, z)`` with ``w >= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QUAT_EPS = 1e-12


class DegenerateQuaternionError(ValueError):
    pass


def as_cloud(points, name: str = "cloud") -> np.ndarray:
    """Validate and convert ``points`` into an ``(n, 3)`` float array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def project_unit_quaternion(q) -> np.ndarray:
    """Normalize ``q`` onto the unit sphere, canonicalized to ``w >= 0``."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm <= QUAT_EPS:
        raise DegenerateQuaternionError(f"cannot normalize quaternion with norm {norm!r}")
    q = q / norm
    if q[0] < 0:
        q = -q
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_matrix_jacobian(q: np.ndarray) -> np.ndarray:
    """Partial derivatives ``dR/dq_k`` of :func:`quat_to_matrix`, shape ``(4, 3, 3)``.

    Valid for the quadratic-form expression above; callers that normalize first
    must chain through the normalization themselves.
    """
    w, x, y, z = q
    dw = 2 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    dx = 2 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dy = 2 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]])
    dz = 2 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]])
    return np.stack([dw, dx, dy, dz])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to canonical unit quaternion (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return project_unit_quaternion(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An element of SE(3): ``x -> R(rotation) @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = project_unit_quaternion(self.rotation)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation contains non-finite values")
        q.flags.writeable = False
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_homogeneous(cls, M) -> RigidTransform:
        M = np.asarray(M, dtype=np.float64)
        return cls.from_matrix(M[:3, :3], M[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def homogeneous(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.matrix
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        P = as_cloud(points)
        return P @ self.matrix.T + self.translation

    def compose(self, inner: RigidTransform) -> RigidTransform:
        """Return ``self ∘ inner`` (``inner`` is applied first)."""
        q = quat_multiply(self.rotation, inner.rotation)
        t = self.matrix @ inner.translation + self.translation
        return RigidTransform(q, t)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return self.compose(other)

    def inverse(self) -> RigidTransform:
        w, x, y, z = self.rotation
        q_inv = np.array([w, -x, -y, -z])
        return RigidTransform(q_inv, -(quat_to_matrix(q_inv) @ self.translation))

    def rotation_angle(self) -> float:
        """Geodesic angle of the rotation part, in ``[0, pi]``."""
        w = min(1.0, abs(float(self.rotation[0])))
        v = float(np.linalg.norm(self.rotation[1:]))
        return 2.0 * float(np.arctan2(v, w))

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol)
        )

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.rotation)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"RigidTransform(rotation=[{q}], translation=[{t}])"


def apply_transform(T: RigidTransform, P) -> np.ndarray:
    return T.apply(P)


def compose(T_outer: RigidTransform, T_inner: RigidTransform) -> RigidTransform:
    return T_outer.compose(T_inner)


def relative_pose_error(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """Rotation angle (rad) and translation distance (m) between two poses."""
    dist = float(np.linalg.norm(a.translation - b.translation))
    if np.array_equal(a.rotation, b.rotation):
        return 0.0, dist
    d = quat_multiply(a.rotation * np.array([1.0, -1.0, -1.0, -1.0]), b.rotation)
    return 2.0 * float(np.arctan2(np.linalg.norm(d[1:]), abs(d[0]))), dist


# Fixed extrinsic XYZ convention: R = Rz(gamma) @ Ry(beta) @ Rx(alpha).


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(b):
    c, s = np.cos(b), np.sin(b)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(g):
    c, s = np.cos(g), np.sin(g)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _dry(b):
    c, s = np.cos(b), np.sin(b)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drz(g):
    c, s = np.cos(g), np.sin(g)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def euler_matrix(angles) -> np.ndarray:
    a, b, g = angles
    return _rz(g) @ _ry(b) @ _rx(a)


def euler_matrix_jacobian(angles) -> np.ndarray:
    """``dR/d(alpha, beta, gamma)`` for the extrinsic XYZ convention, shape ``(3, 3, 3)``."""
    a, b, g = angles
    Rx, Ry, Rz = _rx(a), _ry(b), _rz(g)
    return np.stack([Rz @ Ry @ _drx(a), Rz @ _dry(b) @ Rx, _drz(g) @ Ry @ Rx])


def wrap_angle(x):
    """Map angles into ``(-pi, pi]``."""
    y = np.mod(np.asarray(x, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return np.where(y == -np.pi, np.pi, y)


def matrix_to_euler(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_matrix`; ``beta`` lands in ``[-pi/2, pi/2]``."""
    sb = -R[2, 0]
    beta = np.arcsin(np.clip(sb, -1.0, 1.0))
    if abs(sb) < 1.0 - 1e-12:
        alpha = np.arctan2(R[2, 1], R[2, 2])
        gamma = np.arctan2(R[1, 0], R[0, 0])
    else:
        # gimbal lock: only alpha -/+ gamma is observable, pin gamma to zero
        gamma = 0.0
        alpha = np.arctan2(sb * R[0, 1], R[1, 1])
    return wrap_angle(np.array([alpha, beta, gamma]))


@dataclass(frozen=True, eq=False)
class EulerDelta:
    """Per-step delta pose: extrinsic XYZ Euler angles (rad) plus translation (m)."""

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("EulerDelta values must be finite")
        r = wrap_angle(r)
        t = t.copy()
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_vector(cls, v) -> EulerDelta:
        """Build from a 6-vector ``(alpha, beta, gamma, tx, ty, tz)``."""
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    def to_transform(self) -> RigidTransform:
        return euler_to_transform(self)

    @classmethod
    def from_transform(cls, T: RigidTransform) -> EulerDelta:
        return cls(matrix_to_euler(T.matrix), T.translation)


def euler_to_transform(d: EulerDelta) -> RigidTransform:
    return RigidTransform.from_matrix(euler_matrix(d.rotation), d.translation)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation on SO(3) as a normalized 4-D Gaussian quaternion."""
    while True:
        q = rng.standard_normal(4)
        if np.linalg.norm(q) > 1e-6:
            return project_unit_quaternion(q)


def random_transform(rng: np.random.Generator, translation_scale: float = 1.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.uniform(-translation_scale, translation_scale, 3))


def centroid(P) -> np.ndarray:
    return as_cloud(P).mean(axis=0)


def diameter(P) -> float:
    """Largest pairwise distance, computed on the convex hull when available."""
    P = as_cloud(P)
    if len(P) > 64:
        try:
            from scipy.spatial import ConvexHull

            P = P[ConvexHull(P).vertices]
        except Exception:  # flat or degenerate clouds
            pass
    d2 = np.sum((P[:, None, :] - P[None, :, :]) ** 2, axis=-1)
    return float(np.sqrt(d2.max()))
