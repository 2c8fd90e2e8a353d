"""Rigid and similarity transforms, the camera model and robust-cost primitives.

Poses follow one convention everywhere: a :class:`Pose` moves points from the
global reference system into the camera reference system (``x_c = R x + t``).
Pose increments are 6-vectors ``(omega, v)`` applied on the left:
``R' = Exp(omega) R`` and ``t' = Exp(omega) t + v``.
"""
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Tuple, Union

import cv2
import numpy as np
from scipy.spatial.transform import Rotation

from markerslam.errors import DegenerateConfiguration, LevelOutOfRange, PointBehindCamera

ArrayLike = Union[np.ndarray, Tuple[float, ...], list]

QUATERNION_TOLERANCE: float = 1e-9


def skew(vector: ArrayLike) -> np.ndarray:
    x, y, z = np.asarray(vector, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(vectors: np.ndarray) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((vectors.shape[0], 3, 3))
    out[:, 0, 1] = -vectors[:, 2]
    out[:, 0, 2] = vectors[:, 1]
    out[:, 1, 0] = vectors[:, 2]
    out[:, 1, 2] = -vectors[:, 0]
    out[:, 2, 0] = -vectors[:, 1]
    out[:, 2, 1] = vectors[:, 0]
    return out


def rotation_exp(omega: ArrayLike) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(omega, dtype=np.float64).reshape(3)).as_matrix()


def rotation_angle(rotation_matrix: np.ndarray) -> float:
    return float(np.linalg.norm(Rotation.from_matrix(rotation_matrix).as_rotvec()))


def _validated_quaternion(quaternion: ArrayLike) -> np.ndarray:
    q = np.array(quaternion, dtype=np.float64).reshape(4)
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > QUATERNION_TOLERANCE:
        raise ValueError(f"Quaternion norm {norm} is not unit")
    return q


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'rotation', _validated_quaternion(self.rotation))
        object.__setattr__(self, 'translation', np.array(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> 'Pose':
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, rotation_matrix: np.ndarray, translation: ArrayLike) -> 'Pose':
        quaternion = Rotation.from_matrix(np.asarray(rotation_matrix, dtype=np.float64)).as_quat()
        return cls(quaternion / np.linalg.norm(quaternion), translation)

    @classmethod
    def from_homogeneous(cls, matrix: np.ndarray) -> 'Pose':
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls.from_matrix(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec: ArrayLike, translation: ArrayLike) -> 'Pose':
        return cls.from_matrix(rotation_exp(rotvec), translation)

    @cached_property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    @property
    def t(self) -> np.ndarray:
        return self.translation

    @cached_property
    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.R
        out[:3, 3] = self.translation
        return out

    @cached_property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        # third column of the inverse transform
        return self.R[2, :].copy()

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.translation

    def compose(self, other: 'Pose') -> 'Pose':
        return Pose.from_matrix(self.R @ other.R, self.R @ other.translation + self.translation)

    def inverse(self) -> 'Pose':
        rotation_t = self.R.T
        return Pose.from_matrix(rotation_t, -rotation_t @ self.translation)

    def retract(self, delta: ArrayLike) -> 'Pose':
        delta = np.asarray(delta, dtype=np.float64).reshape(6)
        increment = rotation_exp(delta[:3])
        return Pose.from_matrix(increment @ self.R, increment @ self.translation + delta[3:])

    def angle_to(self, other: 'Pose') -> float:
        return rotation_angle(self.R.T @ other.R)

    def distance_to(self, other: 'Pose') -> float:
        return float(np.linalg.norm(self.center - other.center))

    def is_close(self, other: 'Pose', tolerance: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, atol=tolerance, rtol=0.0))

    def __repr__(self) -> str:
        return f'<Pose q={np.round(self.rotation, 6).tolist()} t={np.round(self.translation, 6).tolist()}>'


@dataclass(frozen=True, eq=False)
class SimTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0.0:
            raise ValueError(f"Similarity scale must be positive, got {self.scale}")
        object.__setattr__(self, 'scale', float(self.scale))
        object.__setattr__(self, 'rotation', _validated_quaternion(self.rotation))
        object.__setattr__(self, 'translation', np.array(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> 'SimTransform':
        return cls(1.0, np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, scale: float, rotation_matrix: np.ndarray, translation: ArrayLike) -> 'SimTransform':
        quaternion = Rotation.from_matrix(np.asarray(rotation_matrix, dtype=np.float64)).as_quat()
        return cls(scale, quaternion / np.linalg.norm(quaternion), translation)

    @classmethod
    def from_pose(cls, pose: Pose) -> 'SimTransform':
        return cls(1.0, pose.rotation, pose.translation)

    @classmethod
    def from_vector(cls, vector: ArrayLike) -> 'SimTransform':
        # (rotvec, translation, log scale)
        vector = np.asarray(vector, dtype=np.float64).reshape(7)
        return cls.from_matrix(float(np.exp(vector[6])), rotation_exp(vector[:3]), vector[3:6])

    @cached_property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    def to_vector(self) -> np.ndarray:
        return np.concatenate([Rotation.from_matrix(self.R).as_rotvec(), self.translation, [np.log(self.scale)]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * (points @ self.R.T) + self.translation

    def compose(self, other: 'SimTransform') -> 'SimTransform':
        return SimTransform.from_matrix(self.scale * other.scale, self.R @ other.R,
                                        self.scale * (self.R @ other.translation) + self.translation)

    def inverse(self) -> 'SimTransform':
        rotation_t = self.R.T
        inverse_scale = 1.0 / self.scale
        return SimTransform.from_matrix(inverse_scale, rotation_t, -inverse_scale * (rotation_t @ self.translation))

    def interpolate(self, fraction: float) -> 'SimTransform':
        rotvec = Rotation.from_matrix(self.R).as_rotvec()
        return SimTransform.from_matrix(self.scale ** fraction, rotation_exp(fraction * rotvec),
                                        fraction * self.translation)

    def correct_pose(self, pose: Pose) -> Pose:
        """Moves a camera (world-to-camera pose) by this world-frame similarity."""
        corrected_center = self.apply(pose.center)
        corrected_rotation = pose.R @ self.R.T
        return Pose.from_matrix(corrected_rotation, -corrected_rotation @ corrected_center)

    def correct_marker(self, marker_pose: Pose) -> Pose:
        """Moves a marker-to-world pose by this world-frame similarity."""
        return Pose.from_matrix(self.R @ marker_pose.R, self.apply(marker_pose.translation))

    def is_identity(self, tolerance: float = 1e-15) -> bool:
        return (abs(self.scale - 1.0) <= tolerance
                and np.allclose(self.R, np.eye(3), atol=tolerance, rtol=0.0)
                and np.allclose(self.translation, 0.0, atol=tolerance, rtol=0.0))

    def __repr__(self) -> str:
        return (f'<SimTransform s={self.scale:.6f} q={np.round(self.rotation, 6).tolist()} '
                f't={np.round(self.translation, 6).tolist()}>')


def pose_compose(first: Pose, second: Pose) -> Pose:
    return first.compose(second)


def pose_invert(pose: Pose) -> Pose:
    return pose.inverse()


def sim3_apply(transform: SimTransform, points: np.ndarray) -> np.ndarray:
    return transform.apply(points)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    dist: Tuple[float, float, float, float, float] = (0.0, 0.0, 0.0, 0.0, 0.0)
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("Focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("Image size must be positive")
        coefficients = tuple(float(c) for c in self.dist)
        if len(coefficients) != 5:
            raise ValueError("Expected 5 distortion coefficients (k1, k2, p1, p2, k3)")
        object.__setattr__(self, 'dist', coefficients)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def dist_array(self) -> np.ndarray:
        return np.array(self.dist, dtype=np.float64)

    @property
    def has_distortion(self) -> bool:
        return any(c != 0.0 for c in self.dist)

    def contains(self, pixels: np.ndarray, margin: float = 0.0) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        return ((pixels[:, 0] >= margin) & (pixels[:, 0] < self.width - margin)
                & (pixels[:, 1] >= margin) & (pixels[:, 1] < self.height - margin))


@dataclass(frozen=True)
class PyramidConfig:
    eta: float = 1.2
    levels: int = 8

    def __post_init__(self):
        if not self.eta > 1.0:
            raise ValueError("Pyramid scale factor must be > 1")
        if self.levels < 1:
            raise ValueError("Pyramid needs at least one level")

    def scale(self, level: Union[int, np.ndarray]) -> Union[float, np.ndarray]:
        return np.power(self.eta, level)


def _distort(xn: np.ndarray, yn: np.ndarray, dist: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    k1, k2, p1, p2, k3 = (dist[..., i] for i in range(5))
    r2 = xn * xn + yn * yn
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = xn * radial + 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn)
    yd = yn * radial + p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn
    return xd, yd


def _distortion_jacobian(xn: np.ndarray, yn: np.ndarray, dist: np.ndarray) -> np.ndarray:
    k1, k2, p1, p2, k3 = (dist[..., i] for i in range(5))
    r2 = xn * xn + yn * yn
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    d_radial = k1 + 2.0 * k2 * r2 + 3.0 * k3 * r2 * r2
    cross = 2.0 * xn * yn * d_radial + 2.0 * p1 * xn + 2.0 * p2 * yn
    out = np.empty(xn.shape + (2, 2))
    out[..., 0, 0] = radial + 2.0 * xn * xn * d_radial + 2.0 * p1 * yn + 6.0 * p2 * xn
    out[..., 0, 1] = cross
    out[..., 1, 0] = cross
    out[..., 1, 1] = radial + 2.0 * yn * yn * d_radial + 6.0 * p1 * yn + 2.0 * p2 * xn
    return out


def project_camera_points(camera_points: np.ndarray, calibration: np.ndarray, dist: np.ndarray,
                          with_jacobian: bool = False) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Vectorised pinhole + radial-tangential projection of camera-frame points.

    ``calibration`` holds ``(fx, fy, cx, cy)`` either once or per point, ``dist`` the
    five coefficients likewise. The Jacobian is d(pixel)/d(camera point), shape (N, 2, 3).
    """
    camera_points = np.asarray(camera_points, dtype=np.float64).reshape(-1, 3)
    calibration = np.broadcast_to(np.asarray(calibration, dtype=np.float64), (camera_points.shape[0], 4))
    dist = np.broadcast_to(np.asarray(dist, dtype=np.float64), (camera_points.shape[0], 5))
    inverse_depth = 1.0 / camera_points[:, 2]
    xn = camera_points[:, 0] * inverse_depth
    yn = camera_points[:, 1] * inverse_depth
    xd, yd = _distort(xn, yn, dist)
    pixels = np.column_stack([calibration[:, 0] * xd + calibration[:, 2],
                              calibration[:, 1] * yd + calibration[:, 3]])
    if not with_jacobian:
        return pixels, None
    normalized_jacobian = np.zeros((camera_points.shape[0], 2, 3))
    normalized_jacobian[:, 0, 0] = inverse_depth
    normalized_jacobian[:, 0, 2] = -xn * inverse_depth
    normalized_jacobian[:, 1, 1] = inverse_depth
    normalized_jacobian[:, 1, 2] = -yn * inverse_depth
    jacobian = _distortion_jacobian(xn, yn, dist) @ normalized_jacobian
    jacobian[:, 0, :] *= calibration[:, 0:1]
    jacobian[:, 1, :] *= calibration[:, 1:2]
    return pixels, jacobian


def _intrinsics_arrays(intr: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    return np.array([intr.fx, intr.fy, intr.cx, intr.cy]), intr.dist_array


def project_points(pose: Pose, points: np.ndarray, intr: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Projects world points; returns pixels (NaN behind the camera) and depths."""
    camera_points = pose.apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    depth = camera_points[:, 2]
    pixels = np.full((camera_points.shape[0], 2), np.nan)
    in_front = depth > 0.0
    if np.any(in_front):
        calibration, dist = _intrinsics_arrays(intr)
        pixels[in_front], _ = project_camera_points(camera_points[in_front], calibration, dist)
    return pixels, depth


def project(pose: Pose, x: ArrayLike, intr: CameraIntrinsics) -> np.ndarray:
    camera_point = pose.apply(np.asarray(x, dtype=np.float64).reshape(3))
    if camera_point[2] <= 0.0:
        raise PointBehindCamera(f"Point at depth {camera_point[2]:.6g} is not in front of the camera")
    calibration, dist = _intrinsics_arrays(intr)
    pixels, _ = project_camera_points(camera_point[None, :], calibration, dist)
    return pixels[0]


def reprojection_residual(pose: Pose, x: ArrayLike, intr: CameraIntrinsics, u: ArrayLike) -> np.ndarray:
    return project(pose, x, intr) - np.asarray(u, dtype=np.float64).reshape(2)


def reprojection_jacobians(pose: Pose, x: ArrayLike, intr: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Jacobians of the residual w.r.t. the left pose increment (2x6) and the point (2x3)."""
    camera_point = pose.apply(np.asarray(x, dtype=np.float64).reshape(3))
    if camera_point[2] <= 0.0:
        raise PointBehindCamera(f"Point at depth {camera_point[2]:.6g} is not in front of the camera")
    calibration, dist = _intrinsics_arrays(intr)
    _, jacobian = project_camera_points(camera_point[None, :], calibration, dist, with_jacobian=True)
    d_pixel = jacobian[0]
    d_camera_d_pose = np.hstack([-skew(camera_point), np.eye(3)])
    return d_pixel @ d_camera_d_pose, d_pixel @ pose.R


def pose_increment_jacobian(camera_points: np.ndarray) -> np.ndarray:
    camera_points = np.asarray(camera_points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((camera_points.shape[0], 3, 6))
    out[:, :, :3] = -skew_batch(camera_points)
    out[:, :, 3:] = np.eye(3)
    return out


def undistort_pixels(pixels: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Pixels to normalized image coordinates (z = 1 plane)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if not intr.has_distortion or pixels.shape[0] == 0:
        return np.column_stack([(pixels[:, 0] - intr.cx) / intr.fx, (pixels[:, 1] - intr.cy) / intr.fy])
    criteria = (cv2.TERM_CRITERIA_COUNT | cv2.TERM_CRITERIA_EPS, 50, 1e-12)
    normalized = cv2.undistortPointsIter(pixels.reshape(-1, 1, 2), intr.K, intr.dist_array, None, None, criteria)
    return normalized.reshape(-1, 2)


def info_weight(level: int, cfg: PyramidConfig) -> np.ndarray:
    if level < 0 or level >= cfg.levels:
        raise LevelOutOfRange(f"Level {level} outside [0, {cfg.levels})")
    return (1.0 / cfg.eta ** level) * np.eye(2)


def info_scalars(levels: np.ndarray, cfg: PyramidConfig) -> np.ndarray:
    levels = np.asarray(levels)
    if levels.size and (levels.min() < 0 or levels.max() >= cfg.levels):
        raise LevelOutOfRange(f"Levels must lie in [0, {cfg.levels})")
    return 1.0 / np.power(cfg.eta, levels.astype(np.float64))


def huber(alpha: float, a: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    magnitude = np.abs(a)
    value = np.where(magnitude <= alpha, 0.5 * magnitude * magnitude, alpha * (magnitude - 0.5 * alpha))
    return float(value) if np.ndim(value) == 0 else value


def huber_weight(alpha: float, a: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    # IRLS weight: h'(a) / a
    magnitude = np.abs(a)
    value = np.where(magnitude <= alpha, 1.0, alpha / np.maximum(magnitude, 1e-300))
    return float(value) if np.ndim(value) == 0 else value


def triangulate_points(first: Pose, second: Pose, normalized_first: np.ndarray,
                       normalized_second: np.ndarray) -> np.ndarray:
    """Linear (DLT) triangulation of normalized correspondences into world points."""
    normalized_first = np.asarray(normalized_first, dtype=np.float64).reshape(-1, 2)
    normalized_second = np.asarray(normalized_second, dtype=np.float64).reshape(-1, 2)
    projection_first = first.matrix[:3]
    projection_second = second.matrix[:3]
    system = np.empty((normalized_first.shape[0], 4, 4))
    system[:, 0] = normalized_first[:, 0:1] * projection_first[2] - projection_first[0]
    system[:, 1] = normalized_first[:, 1:2] * projection_first[2] - projection_first[1]
    system[:, 2] = normalized_second[:, 0:1] * projection_second[2] - projection_second[0]
    system[:, 3] = normalized_second[:, 1:2] * projection_second[2] - projection_second[1]
    _, _, vt = np.linalg.svd(system)
    homogeneous = vt[:, -1, :]
    with np.errstate(divide='ignore', invalid='ignore'):
        return homogeneous[:, :3] / homogeneous[:, 3:4]


def umeyama_alignment(source: np.ndarray, target: np.ndarray, with_scale: bool = True) -> SimTransform:
    """Closed-form least-squares similarity mapping ``source`` onto ``target``."""
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if source.shape[0] < 3 or source.shape != target.shape:
        raise DegenerateConfiguration("Need at least three corresponding positions")
    mean_source = source.mean(axis=0)
    mean_target = target.mean(axis=0)
    centered_source = source - mean_source
    centered_target = target - mean_target
    spread = np.linalg.svd(centered_source, compute_uv=False)
    if spread[0] <= 0.0 or spread[1] <= 1e-9 * spread[0]:
        raise DegenerateConfiguration("Positions are collinear; rotation is unobservable")
    covariance = centered_target.T @ centered_source / source.shape[0]
    u, d, vt = np.linalg.svd(covariance)
    reflection = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        reflection[2, 2] = -1.0
    rotation_matrix = u @ reflection @ vt
    scale = 1.0
    if with_scale:
        variance = (centered_source ** 2).sum() / source.shape[0]
        scale = float(np.trace(np.diag(d) @ reflection) / variance)
    translation = mean_target - scale * rotation_matrix @ mean_source
    return SimTransform.from_matrix(scale, rotation_matrix, translation)
