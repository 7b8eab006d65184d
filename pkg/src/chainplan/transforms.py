"""Rigid-body transforms as unit quaternion + translation.

Quaternions use (w, x, y, z) ordering and are renormalized after every
construction and composition so long kinematic chains do not drift.
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-12


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < _EPS:
        raise ValueError("cannot normalize zero quaternion")
    q = q / n
    # canonical sign: w >= 0 keeps serialization stable
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q, v):
    """Rotate 3-vector(s) v by unit quaternion q. v may be (3,) or (N, 3)."""
    v = np.asarray(v, dtype=float)
    u = q[1:]
    w = q[0]
    uv = np.cross(u, v)
    return v + 2.0 * w * uv + 2.0 * np.cross(u, uv)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < _EPS:
        raise ValueError("zero rotation axis")
    half = 0.5 * angle
    return quat_normalize(np.concatenate(([np.cos(half)], np.sin(half) * axis / n)))


def quat_from_rotvec(r):
    r = np.asarray(r, dtype=float)
    angle = np.linalg.norm(r)
    if angle < _EPS:
        # first-order expansion, exact enough below eps
        return quat_normalize(np.concatenate(([1.0], 0.5 * r)))
    return quat_from_axis_angle(r, angle)


def quat_to_rotvec(q):
    """Axis-angle vector of a unit quaternion, angle in [0, pi]."""
    q = quat_normalize(q)
    s = np.linalg.norm(q[1:])
    if s < _EPS:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(s, q[0])
    return (angle / s) * q[1:]


def quat_from_rpy(roll, pitch, yaw):
    """Intrinsic x-y-z (URDF-style fixed-axis rpy) rotation."""
    qx = quat_from_axis_angle([1.0, 0.0, 0.0], roll)
    qy = quat_from_axis_angle([0.0, 1.0, 0.0], pitch)
    qz = quat_from_axis_angle([0.0, 0.0, 1.0], yaw)
    return quat_normalize(quat_multiply(qz, quat_multiply(qy, qx)))


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m):
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    return quat_normalize(q)


class Transform:
    """Pose of one frame in another: rotation (unit quaternion) + translation."""

    __slots__ = ("rot", "trans")

    def __init__(self, rot=None, trans=None):
        self.rot = quat_normalize(rot) if rot is not None else np.array([1.0, 0.0, 0.0, 0.0])
        self.trans = (np.asarray(trans, dtype=float).reshape(3).copy()
                      if trans is not None else np.zeros(3))

    @staticmethod
    def identity():
        return Transform()

    @staticmethod
    def from_xyz_rpy(xyz, rpy):
        return Transform(quat_from_rpy(*rpy), xyz)

    @staticmethod
    def from_matrix(m):
        m = np.asarray(m, dtype=float)
        return Transform(quat_from_matrix(m[:3, :3]), m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rot)
        m[:3, 3] = self.trans
        return m

    def compose(self, other: "Transform") -> "Transform":
        """self * other (apply other in self's frame)."""
        return Transform(quat_multiply(self.rot, other.rot),
                         self.trans + quat_rotate(self.rot, other.trans))

    def __mul__(self, other):
        return self.compose(other)

    def inverse(self) -> "Transform":
        qi = quat_conjugate(self.rot)
        return Transform(qi, -quat_rotate(qi, self.trans))

    def apply(self, points):
        """Map point(s) from this frame into the parent frame."""
        return quat_rotate(self.rot, points) + self.trans

    def rotation_angle_to(self, other: "Transform") -> float:
        """Geodesic angle between the two rotations."""
        return float(np.linalg.norm(quat_to_rotvec(
            quat_multiply(quat_conjugate(other.rot), self.rot))))

    def is_close(self, other: "Transform", tol=1e-9) -> bool:
        return (np.linalg.norm(self.trans - other.trans) <= tol
                and self.rotation_angle_to(other) <= tol)

    def copy(self) -> "Transform":
        return Transform(self.rot.copy(), self.trans.copy())

    def __repr__(self):
        return f"Transform(rot={self.rot.round(6).tolist()}, trans={self.trans.round(6).tolist()})"


def rot_z(angle) -> Transform:
    return Transform(quat_from_axis_angle([0.0, 0.0, 1.0], angle), np.zeros(3))


def translation(x, y, z) -> Transform:
    return Transform(None, [x, y, z])


def pose_residual(a: Transform, b: Transform) -> np.ndarray:
    """6-vector pose error: [trans(a) - trans(b); rotvec(rot(b)^-1 rot(a))].

    Zero iff the two poses coincide; the rotation part is expressed in b's
    frame, which matches the Jacobian convention used for pose goals.
    """
    dq = quat_multiply(quat_conjugate(b.rot), a.rot)
    return np.concatenate([a.trans - b.trans, quat_to_rotvec(dq)])
