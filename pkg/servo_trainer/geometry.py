"""
Rigid-body geometry for the servo workbench.

Poses are camera-to-world transforms stored as a unit quaternion (scipy
scalar-last order) plus a translation. Twists are expressed in the camera
frame, the usual eye-in-hand convention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

_SMALL_ANGLE = 1e-8


class DeviationLevel(Enum):
    """Benchmark difficulty: maximum rotational deviation (degrees) between initial and target pose."""
    S = 24.06
    M = 67.38
    L = 136.46

    @property
    def max_degrees(self) -> float:
        return float(self.value)

    @classmethod
    def parse(cls, name: str) -> "DeviationLevel":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"Unknown deviation level: {name!r} (expected S, M or L)") from None


def _as_vec3(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got shape {np.shape(values)}")
    return arr


@dataclass(frozen=True, eq=False)
class Pose:
    """
    Camera pose in the world frame.

    Parameters
    ----------
    quat : array-like of 4
        Rotation as a quaternion (x, y, z, w). Renormalized on construction and
        kept in the w >= 0 hemisphere so equal rotations have one representation.
    translation : array-like of 3
        Camera position in meters.
    """
    quat: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(-1)
        if q.shape != (4,):
            raise ValueError(f"quaternion must have 4 components, got {q.shape}")
        norm = float(np.linalg.norm(q))
        if not math.isfinite(norm) or norm == 0.0:
            raise ValueError("quaternion must be finite and non-zero")
        q = q / norm
        if q[3] < 0:
            q = -q
        t = _as_vec3(self.translation, "translation")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_rotation(cls, rotation: Rotation, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(rotation.as_quat(), translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(Rotation.from_rotvec(_as_vec3(rotvec, "rotvec")).as_quat(), translation)

    @classmethod
    def from_vector(cls, values) -> "Pose":
        """Inverse of ``as_vector``: (qx, qy, qz, qw, tx, ty, tz)."""
        arr = np.asarray(values, dtype=float).reshape(-1)
        if arr.shape != (7,):
            raise ValueError(f"pose vector must have 7 components, got {arr.shape}")
        return cls(arr[:4], arr[4:])

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.quat)

    def rotation_matrix(self) -> np.ndarray:
        return self.rotation.as_matrix()

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.quat, self.translation])

    def to_world(self, points_cam: np.ndarray) -> np.ndarray:
        """Maps camera-frame points (N x 3) to the world frame."""
        return self.rotation.apply(np.asarray(points_cam, dtype=float)) + self.translation

    def to_camera(self, points_world: np.ndarray) -> np.ndarray:
        """Maps world-frame points (N x 3) into this camera's frame."""
        return self.rotation.inv().apply(np.asarray(points_world, dtype=float) - self.translation)

    def __repr__(self) -> str:
        return f"Pose(quat={np.round(self.quat, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


@dataclass(frozen=True, eq=False)
class Twist:
    """6-DOF camera velocity: linear (m/s) and angular (rad/s), camera frame."""
    linear: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        lin = _as_vec3(self.linear, "linear")
        ang = _as_vec3(self.angular, "angular")
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(ang))):
            raise ValueError("twist components must be finite")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "angular", ang)

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, values) -> "Twist":
        arr = np.asarray(values, dtype=float).reshape(-1)
        if arr.shape != (6,):
            raise ValueError(f"twist vector must have 6 components, got {arr.shape}")
        return cls(arr[:3], arr[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])

    def scaled(self, factor: float) -> "Twist":
        return Twist(self.linear * factor, self.angular * factor)

    def is_zero(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.as_vector()) <= tol))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics (pixels) and the depth range (meters) of the frustum."""
    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    z_near: float = 0.02
    z_far: float = 5.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.z_near < self.z_far):
            raise ValueError(f"need 0 < z_near < z_far, got {self.z_near}, {self.z_far}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CylinderRegion:
    """Upright cylinder S(r, h) that holds the scene clusters."""
    radius: float = 0.15
    height: float = 0.2
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.radius <= 0 or self.height <= 0:
            raise ValueError(f"cylinder needs r > 0 and h > 0, got r={self.radius}, h={self.height}")
        object.__setattr__(self, "center", _as_vec3(self.center, "center"))

    def contains(self, point, tol: float = 1e-9) -> bool:
        p = _as_vec3(point, "point") - self.center
        return bool(math.hypot(p[0], p[1]) <= self.radius + tol and abs(p[2]) <= self.height / 2 + tol)

    def sample_point(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform sample inside the cylinder volume."""
        rad = self.radius * math.sqrt(rng.uniform())
        phi = rng.uniform(0.0, 2 * math.pi)
        z = rng.uniform(-self.height / 2, self.height / 2)
        return self.center + np.array([rad * math.cos(phi), rad * math.sin(phi), z])


def compose(a: Pose, b: Pose) -> Pose:
    """Group product a * b."""
    return Pose.from_rotation(a.rotation * b.rotation, a.translation + a.rotation.apply(b.translation))


def inverse(p: Pose) -> Pose:
    r_inv = p.rotation.inv()
    return Pose.from_rotation(r_inv, -r_inv.apply(p.translation))


def pose_error(current: Pose, target: Pose) -> Tuple[float, float]:
    """
    Terminal error metrics.

    :return: (translation error in meters, geodesic rotation error in degrees)
    """
    te = float(np.linalg.norm(target.translation - current.translation))
    q_rel = (current.rotation.inv() * target.rotation).as_quat()
    w = min(1.0, abs(float(q_rel[3])))
    re = math.degrees(2.0 * math.acos(w))
    return te, re


def _left_jacobian(phi: np.ndarray) -> np.ndarray:
    """SO(3) left Jacobian; maps body velocity to the translation of the SE(3) exponential."""
    theta = float(np.linalg.norm(phi))
    k = np.array([[0.0, -phi[2], phi[1]],
                  [phi[2], 0.0, -phi[0]],
                  [-phi[1], phi[0], 0.0]])
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + k @ k / 6.0
    a = (1.0 - math.cos(theta)) / theta ** 2
    b = (theta - math.sin(theta)) / theta ** 3
    return np.eye(3) + a * k + b * (k @ k)


def se3_exp(twist: Twist, dt: float) -> Pose:
    """Closed-form screw motion of a constant body twist over dt."""
    phi = twist.angular * dt
    rho = twist.linear * dt
    return Pose.from_rotation(Rotation.from_rotvec(phi), _left_jacobian(phi) @ rho)


def integrate_twist(pose: Pose, v: Twist, dt: float) -> Pose:
    """Advances ``pose`` by the camera-frame twist held constant for ``dt`` seconds."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return compose(pose, se3_exp(v, dt))


def decoupled_log(current: Pose, target: Pose) -> Tuple[np.ndarray, np.ndarray]:
    """
    Decoupled pose error.

    :return: (target translation minus current, expressed in the current camera frame;
              rotation vector of the current-to-target relative orientation)
    """
    r_inv = current.rotation.inv()
    t_err = r_inv.apply(target.translation - current.translation)
    axis_angle = (r_inv * target.rotation).as_rotvec()
    return t_err, axis_angle


def look_at(position, focus, roll: float = 0.0) -> Rotation:
    """Camera orientation whose optical (+z) axis points from ``position`` to ``focus``."""
    pos = _as_vec3(position, "position")
    z_axis = _as_vec3(focus, "focus") - pos
    dist = float(np.linalg.norm(z_axis))
    if dist == 0.0:
        raise ValueError("camera position coincides with the look-at point")
    z_axis /= dist
    ref = np.array([1.0, 0.0, 0.0]) if abs(z_axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x_axis = np.cross(ref, z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    base = Rotation.from_matrix(np.column_stack([x_axis, y_axis, z_axis]))
    return base * Rotation.from_rotvec([0.0, 0.0, roll])


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        n = float(np.linalg.norm(v))
        if n > 1e-12:
            return v / n


def random_rotation(rng: np.random.Generator) -> Rotation:
    """Uniform random rotation from a normalized Gaussian quaternion."""
    while True:
        q = rng.normal(size=4)
        if np.linalg.norm(q) > 1e-12:
            return Rotation.from_quat(q)


# Target placement: distance from the region center as a multiple of the cylinder height,
# and the largest polar angle of the viewing direction from the world +z axis.
DISTANCE_RANGE = (1.2, 2.0)
MAX_VIEW_POLAR_DEG = 60.0
ROTATION_FRACTION = (0.5, 1.0)
OFFSET_FRACTION = (0.1, 0.4)


def sample_pose_pair(region: CylinderRegion, level: DeviationLevel,
                     rng: np.random.Generator) -> Tuple[Pose, Pose]:
    """
    Samples (initial, target) camera poses around the region.

    The target sits on a sphere around the region center and looks at it with a
    random roll. The initial pose orbits the target about the region center by an
    angle drawn from [0.5, 1] x the level's deviation, so the geodesic rotation
    between the two poses equals that angle, then gets a small translation offset.
    """
    if isinstance(level, str):
        level = DeviationLevel.parse(level)
    center = region.center
    rho = rng.uniform(DISTANCE_RANGE[0] * region.height, DISTANCE_RANGE[1] * region.height)
    cos_polar = rng.uniform(math.cos(math.radians(MAX_VIEW_POLAR_DEG)), 1.0)
    sin_polar = math.sqrt(max(0.0, 1.0 - cos_polar ** 2))
    azimuth = rng.uniform(0.0, 2 * math.pi)
    direction = np.array([sin_polar * math.cos(azimuth), sin_polar * math.sin(azimuth), cos_polar])
    position = center + rho * direction
    roll = rng.uniform(0.0, 2 * math.pi)
    target = Pose.from_rotation(look_at(position, center, roll), position)

    angle = math.radians(level.max_degrees) * rng.uniform(*ROTATION_FRACTION)
    orbit = Rotation.from_rotvec(random_unit_vector(rng) * angle)
    offset = random_unit_vector(rng) * rng.uniform(*OFFSET_FRACTION) * region.radius
    initial_position = center + orbit.apply(position - center) + offset
    initial = Pose.from_rotation(orbit * target.rotation, initial_position)
    return initial, target


def camera_distance(pose: Pose, region: CylinderRegion) -> float:
    return float(np.linalg.norm(pose.translation - region.center))


def clamp_norm(vec: np.ndarray, limit: Optional[float]) -> np.ndarray:
    """Scales ``vec`` down to ``limit`` if its norm exceeds it; direction is preserved."""
    if limit is None:
        return vec
    n = float(np.linalg.norm(vec))
    if n > limit > 0:
        return vec * (limit / n)
    return vec
