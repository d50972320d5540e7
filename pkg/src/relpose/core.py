"""Core geometric primitives and measurement/state record types.

Conventions used across the package:

* Quaternions are Hamilton, scalar-first ``[w, x, y, z]``, unit norm, and
  canonicalized to ``w >= 0`` (double cover). ``R(q) @ v_body = v_parent``.
* Rotation vectors ("tangent" vectors) are axis * angle in radians.
* All timestamps are integer nanoseconds, all units SI.
* Bearings and gravity directions are unit 3-vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

RobotId = int
Timestamp = int  # nanoseconds

_UNIT_TOL = 1e-6  # acceptance band for "should already be unit" inputs


# ---------------------------------------------------------------------------
# instrumentation

_gravity_reads = 0


def note_gravity_read(count: int = 1) -> None:
    """Record that gravity measurement payloads were consumed."""
    global _gravity_reads
    _gravity_reads += int(count)


def reset_gravity_reads() -> None:
    global _gravity_reads
    _gravity_reads = 0


def gravity_reads() -> int:
    return _gravity_reads


# ---------------------------------------------------------------------------
# vector helpers


def unit_vector(v, tol: float = _UNIT_TOL) -> np.ndarray:
    """Validate and renormalize a nominally-unit 3-vector.

    Vectors within ``tol`` of unit norm are silently renormalized; anything
    further off (or non-finite) raises ValueError.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ValueError(f"expected a finite 3-vector, got {v!r}")
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > tol:
        raise ValueError(f"direction norm {n} deviates from 1 by more than {tol}")
    return v / n


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(a) @ b == cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def sphere_tangent_basis(v) -> np.ndarray:
    """Deterministic orthonormal basis (3x2) of the plane orthogonal to unit v."""
    v = np.asarray(v, dtype=float)
    e = np.zeros(3)
    e[int(np.argmin(np.abs(v)))] = 1.0
    t1 = e - np.dot(e, v) * v
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(v, t1)
    return np.column_stack([t1, t2])


# ---------------------------------------------------------------------------
# quaternion algebra (Hamilton, scalar first)


def quat_canonical(q) -> np.ndarray:
    """Normalize a quaternion and pick the w >= 0 representative."""
    q = np.asarray(q, dtype=float)
    if q.shape != (4,) or not np.all(np.isfinite(q)):
        raise ValueError(f"expected a finite wxyz quaternion, got {q!r}")
    n = float(np.linalg.norm(q))
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    if q[0] < 0.0 or (q[0] == 0.0 and _first_nonzero_negative(q[1:])):
        q = -q
    return q


def _first_nonzero_negative(v) -> bool:
    for x in v:
        if x != 0.0:
            return x < 0.0
    return False


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_mul(a, b) -> np.ndarray:
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


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q, v) -> np.ndarray:
    """Rotate vector v by quaternion q (body -> parent)."""
    u = np.asarray(q[1:], dtype=float)
    t = 2.0 * np.cross(u, np.asarray(v, dtype=float))
    return v + q[0] * t + np.cross(u, t)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_to_matrix_batch(qs) -> np.ndarray:
    """Rotation matrices for a (k, 4) stack of quaternions, as (k, 3, 3)."""
    qs = np.asarray(qs, dtype=float).reshape(-1, 4)
    w, x, y, z = qs[:, 0], qs[:, 1], qs[:, 2], qs[:, 3]
    R = np.empty((qs.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R) -> np.ndarray:
    """Rotation matrix to canonical unit quaternion (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax([R[0, 0], R[1, 1], R[2, 2]]))
        if i == 0:
            s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            q = np.array(
                [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
            )
        elif i == 1:
            s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
            q = np.array(
                [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
            )
        else:
            s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
            q = np.array(
                [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
            )
    return quat_canonical(q)


_SMALL_ANGLE = 1e-8


def quat_exp(v) -> np.ndarray:
    """Exponential map: rotation vector -> unit quaternion.

    Uses the series expansion below ||v|| < 1e-8 to stay exact in the limit.
    """
    v = np.asarray(v, dtype=float)
    th = float(np.linalg.norm(v))
    if th < _SMALL_ANGLE:
        # sin(th/2)/th ~ 1/2 - th^2/48
        return quat_canonical(np.concatenate([[1.0 - th * th / 8.0], (0.5 - th * th / 48.0) * v]))
    half = 0.5 * th
    return quat_canonical(np.concatenate([[math.cos(half)], (math.sin(half) / th) * v]))


def quat_log(q) -> np.ndarray:
    """Logarithm map: unit quaternion -> rotation vector with angle in [0, pi]."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0.0:
        q = -q
    s = float(np.linalg.norm(q[1:]))
    if s < _SMALL_ANGLE:
        return (2.0 / q[0]) * q[1:] * (1.0 - s * s / (3.0 * q[0] * q[0]))
    th = 2.0 * math.atan2(s, q[0])
    return (th / s) * q[1:]


def so3_exp(phi) -> np.ndarray:
    return quat_to_matrix(quat_exp(phi))


def so3_log(R) -> np.ndarray:
    return quat_log(matrix_to_quat(R))


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def so3_jr_inv(phi) -> np.ndarray:
    """Inverse right Jacobian of SO(3): Log(Exp(phi) Exp(d)) ~ phi + Jr_inv(phi) d."""
    phi = np.asarray(phi, dtype=float)
    th = float(np.linalg.norm(phi))
    W = skew(phi)
    if th < 1e-5:
        return np.eye(3) + 0.5 * W + (1.0 / 12.0) * (W @ W)
    coef = 1.0 / (th * th) - (1.0 + math.cos(th)) / (2.0 * th * math.sin(th))
    return np.eye(3) + 0.5 * W + coef * (W @ W)


def so3_jl_inv(phi) -> np.ndarray:
    """Inverse left Jacobian: Log(Exp(d) Exp(phi)) ~ phi + Jl_inv(phi) d."""
    return so3_jr_inv(-np.asarray(phi, dtype=float))


def rotz(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_between(a, b) -> np.ndarray:
    """Minimal rotation matrix taking unit vector a onto unit vector b.

    For the antipodal case the rotation axis is the coordinate axis least
    aligned with a (so aligning -z to +z yields a 180 deg rotation about x).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = float(np.dot(a, b))
    k = np.cross(a, b)
    s2 = float(np.dot(k, k))
    if c > -1.0 + 1e-12 and s2 > 1e-30:
        K = skew(k)
        return np.eye(3) + K + K @ K * ((1.0 - c) / s2)
    if c > 0.0:
        return np.eye(3)
    # antipodal: pi about a deterministic perpendicular axis
    axis = sphere_tangent_basis(a)[:, 0]
    return so3_exp(math.pi * axis)


# ---------------------------------------------------------------------------
# record types


def _frozen_vec(obj, name, value, n=3):
    v = np.array(value, dtype=float).reshape(n)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite, got {value!r}")
    v.flags.writeable = False
    object.__setattr__(obj, name, v)


@dataclass(frozen=True)
class NoiseConfig:
    """Sensor noise levels; used both to draw noise and to whiten residuals.

    Angular sigmas are radians, distances meters, IMU noise per-sample std at
    the nominal IMU rate. ``gravity_enabled`` is the global toggle for every
    gravity-dependent code path (omega_g in the estimation stack).
    """

    bearing_sigma: float = math.radians(2.0)
    distance_sigma: float = 0.1
    gravity_sigma: float = math.radians(2.0)
    accel_noise: float = 0.1
    gyro_noise: float = 0.01
    accel_bias_walk: float = 0.0
    gyro_bias_walk: float = 0.0
    gravity_enabled: bool = True

    def __post_init__(self):
        for name in ("bearing_sigma", "distance_sigma", "gravity_sigma", "accel_noise", "gyro_noise"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be > 0")
        for name in ("accel_bias_walk", "gyro_bias_walk"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class Extrinsics:
    """Sensor mounting in the body frame.

    ``cam_rotation`` maps camera-frame vectors into the body frame; the three
    positions are sensor origins expressed in the body frame.
    """

    cam_rotation: np.ndarray = field(default_factory=quat_identity)
    cam_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    uwb_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    marker_position: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "cam_rotation", quat_canonical(self.cam_rotation))
        self.cam_rotation.flags.writeable = False
        for name in ("cam_position", "uwb_position", "marker_position"):
            _frozen_vec(self, name, getattr(self, name))

    @classmethod
    def identity(cls) -> "Extrinsics":
        return cls()


@dataclass
class RobotState:
    """Position/velocity/orientation plus IMU biases, in some stated frame."""

    position: np.ndarray
    velocity: np.ndarray
    orientation: np.ndarray  # wxyz quaternion
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.position = np.array(self.position, dtype=float).reshape(3)
        self.velocity = np.array(self.velocity, dtype=float).reshape(3)
        self.orientation = quat_canonical(self.orientation)
        self.accel_bias = np.array(self.accel_bias, dtype=float).reshape(3)
        self.gyro_bias = np.array(self.gyro_bias, dtype=float).reshape(3)

    def copy(self) -> "RobotState":
        return RobotState(
            self.position.copy(),
            self.velocity.copy(),
            self.orientation.copy(),
            self.accel_bias.copy(),
            self.gyro_bias.copy(),
        )

    @classmethod
    def identity(cls) -> "RobotState":
        return cls(np.zeros(3), np.zeros(3), quat_identity())


@dataclass(frozen=True)
class DistanceMeasurement:
    """Range between the ranging antennas of two robots."""

    from_robot: RobotId
    to_robot: RobotId
    distance: float
    timestamp: Timestamp

    def __post_init__(self):
        if self.from_robot == self.to_robot or self.from_robot < 0 or self.to_robot < 0:
            raise ValueError("distance requires two distinct robot ids")
        if not (math.isfinite(self.distance) and self.distance > 0.0):
            raise ValueError(f"distance must be positive, got {self.distance}")


@dataclass(frozen=True)
class BearingMeasurement:
    """Unit direction from the observer's camera to a target's marker,
    expressed in the observer's camera frame."""

    observer: RobotId
    target: RobotId
    direction: np.ndarray
    timestamp: Timestamp

    def __post_init__(self):
        if self.observer == self.target or self.observer < 0 or self.target < 0:
            raise ValueError("bearing requires two distinct robot ids")
        d = unit_vector(self.direction)
        d.flags.writeable = False
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class GravityMeasurement:
    """Unit gravity-reaction direction in the robot's body frame
    (a stationary robot measures +z up)."""

    robot: RobotId
    direction: np.ndarray
    timestamp: Timestamp

    def __post_init__(self):
        if self.robot < 0:
            raise ValueError("robot id must be >= 0")
        d = unit_vector(self.direction)
        d.flags.writeable = False
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class ImuSample:
    """One accelerometer + gyroscope sample in the body frame.

    ``specific_force`` includes the gravity reaction (an accelerometer at rest
    reads +9.8 m/s^2 along body up)."""

    robot: RobotId
    timestamp: Timestamp
    specific_force: np.ndarray
    angular_velocity: np.ndarray

    def __post_init__(self):
        if self.robot < 0:
            raise ValueError("robot id must be >= 0")
        _frozen_vec(self, "specific_force", self.specific_force)
        _frozen_vec(self, "angular_velocity", self.angular_velocity)


@dataclass(frozen=True)
class MeasurementFrame:
    """All inter-robot measurements attached to one camera timestamp."""

    timestamp: Timestamp
    distances: tuple = ()
    bearings: tuple = ()
    gravities: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "distances", tuple(self.distances))
        object.__setattr__(self, "bearings", tuple(self.bearings))
        object.__setattr__(self, "gravities", tuple(self.gravities))


@dataclass
class PoseEstimate:
    """One estimator tier's relative-pose output for one frame.

    A robot appears in ``positions`` when its relative position is observable
    and in ``orientations`` when its relative rotation is; a "full" pose needs
    both. The reference robot itself is implicit (identity).
    """

    timestamp: Timestamp
    reference: RobotId
    positions: dict
    orientations: dict
    gravity: np.ndarray | None = None

    def has_full_pose(self, robot: RobotId) -> bool:
        return robot in self.positions and robot in self.orientations

    def full_pose_robots(self) -> list:
        return [r for r in self.positions if r in self.orientations]
