import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from markerslam.errors import DivergedSolve, InsufficientConstraints
from markerslam.geometry import (CameraIntrinsics, Pose, PyramidConfig, huber, huber_weight, info_scalars,
                                 pose_increment_jacobian, project_camera_points)
from markerslam.models import KeyPointObs, MapPoint, Marker, MarkerObs
from markerslam.optimization.weights import marker_weight

logger = logging.getLogger(__name__)


def _empty(shape: Tuple[int, ...], dtype=np.float64):
    return lambda: np.zeros(shape, dtype=dtype)


@dataclass
class TrackingProblem:
    intrinsics: CameraIntrinsics
    initial_pose: Pose
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    point_positions: np.ndarray = field(default_factory=_empty((0, 3)))
    point_pixels: np.ndarray = field(default_factory=_empty((0, 2)))
    point_levels: np.ndarray = field(default_factory=_empty((0,), np.int64))
    point_ids: np.ndarray = field(default_factory=_empty((0,), np.int64))
    keypoint_indices: np.ndarray = field(default_factory=_empty((0,), np.int64))
    marker_ids: List[int] = field(default_factory=list)
    marker_corners: np.ndarray = field(default_factory=_empty((0, 4, 3)))
    marker_pixels: np.ndarray = field(default_factory=_empty((0, 4, 2)))
    huber_alpha: float = 2.45
    tau_m: float = 5.0
    weight_override: Optional[Tuple[float, float]] = None

    @classmethod
    def from_matches(cls, point_matches: Sequence[Tuple[MapPoint, KeyPointObs]],
                     marker_matches: Sequence[Tuple[Marker, MarkerObs]], intrinsics: CameraIntrinsics,
                     initial_pose: Pose, pyramid: Optional[PyramidConfig] = None, huber_alpha: float = 2.45,
                     tau_m: float = 5.0) -> 'TrackingProblem':
        problem = cls(intrinsics, initial_pose, pyramid or PyramidConfig(), huber_alpha=huber_alpha, tau_m=tau_m)
        if point_matches:
            problem.point_positions = np.array([point.position for point, _ in point_matches])
            problem.point_pixels = np.array([obs.pixel for _, obs in point_matches], dtype=np.float64)
            problem.point_levels = np.array([obs.level for _, obs in point_matches], dtype=np.int64)
            problem.point_ids = np.array([point.id for point, _ in point_matches], dtype=np.int64)
            problem.keypoint_indices = np.full(len(point_matches), -1, dtype=np.int64)
        for marker, obs in marker_matches:
            problem.add_marker(marker, obs)
        return problem

    def add_marker(self, marker: Marker, obs: MarkerObs) -> None:
        if not marker.is_valid:
            raise ValueError(f"Marker {marker.id} has no valid pose and cannot constrain a solve")
        self.marker_ids.append(marker.id)
        self.marker_corners = np.concatenate([self.marker_corners, marker.world_corners()[None]], axis=0)
        self.marker_pixels = np.concatenate([self.marker_pixels, obs.corners_px[None]], axis=0)

    @property
    def point_count(self) -> int:
        return int(self.point_positions.shape[0])

    @property
    def marker_count(self) -> int:
        return len(self.marker_ids)

    def weights(self) -> Tuple[float, float]:
        if self.weight_override is not None:
            return self.weight_override
        return marker_weight(self.marker_count, self.tau_m)


@dataclass
class TrackingResult:
    pose: Pose
    point_inliers: np.ndarray
    marker_inliers: np.ndarray
    cost: float
    iterations: int

    @property
    def inlier_count(self) -> int:
        return int(np.count_nonzero(self.point_inliers))


class _TrackingObjective:
    def __init__(self, problem: TrackingProblem, active: np.ndarray):
        self.problem = problem
        self.active = active
        self.marker_term, self.point_term = problem.weights()
        self.information = info_scalars(problem.point_levels, problem.pyramid)
        self.calibration = np.array([problem.intrinsics.fx, problem.intrinsics.fy,
                                     problem.intrinsics.cx, problem.intrinsics.cy])
        self.dist = problem.intrinsics.dist_array
        self.use_points = self.point_term > 0.0 and bool(np.any(active))
        self.use_markers = self.marker_term > 0.0 and problem.marker_count > 0

    def _point_terms(self, pose: Pose, with_jacobian: bool):
        positions = self.problem.point_positions[self.active]
        camera_points = pose.apply(positions)
        if np.any(camera_points[:, 2] <= 1e-9):
            return None
        projected, d_pixel = project_camera_points(camera_points, self.calibration, self.dist, with_jacobian)
        residuals = projected - self.problem.point_pixels[self.active]
        jacobian = d_pixel @ pose_increment_jacobian(camera_points) if with_jacobian else None
        return residuals, jacobian

    def _marker_terms(self, pose: Pose, with_jacobian: bool):
        corners = self.problem.marker_corners.reshape(-1, 3)
        camera_points = pose.apply(corners)
        if np.any(camera_points[:, 2] <= 1e-9):
            return None
        projected, d_pixel = project_camera_points(camera_points, self.calibration, self.dist, with_jacobian)
        residuals = projected - self.problem.marker_pixels.reshape(-1, 2)
        jacobian = d_pixel @ pose_increment_jacobian(camera_points) if with_jacobian else None
        return residuals, jacobian

    def cost(self, pose: Pose) -> float:
        total = 0.0
        if self.use_points:
            terms = self._point_terms(pose, False)
            if terms is None:
                return float('inf')
            scaled = np.sqrt(self.information[self.active] * np.sum(terms[0] ** 2, axis=1))
            total += self.point_term * float(np.sum(huber(self.problem.huber_alpha, scaled)))
        if self.use_markers:
            terms = self._marker_terms(pose, False)
            if terms is None:
                return float('inf')
            total += self.marker_term * float(np.sum(terms[0] ** 2))
        return total

    def normal_equations(self, pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
        hessian = np.zeros((6, 6))
        gradient = np.zeros(6)
        if self.use_points:
            residuals, jacobian = self._point_terms(pose, True)
            information = self.information[self.active]
            scaled = np.sqrt(information * np.sum(residuals ** 2, axis=1))
            weights = self.point_term * huber_weight(self.problem.huber_alpha, scaled) * information
            hessian += np.einsum('n,nia,nib->ab', weights, jacobian, jacobian)
            gradient += np.einsum('n,nia,ni->a', weights, jacobian, residuals)
        if self.use_markers:
            residuals, jacobian = self._marker_terms(pose, True)
            hessian += 2.0 * self.marker_term * np.einsum('nia,nib->ab', jacobian, jacobian)
            gradient += 2.0 * self.marker_term * np.einsum('nia,ni->a', jacobian, residuals)
        return hessian, gradient


def _minimize(objective: _TrackingObjective, pose: Pose, max_iterations: int, damping: float) -> Tuple[Pose, float, int]:
    cost = objective.cost(pose)
    if not np.isfinite(cost):
        raise DivergedSolve("Initial tracking pose puts constraints behind the camera")
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        hessian, gradient = objective.normal_equations(pose)
        if not np.all(np.isfinite(hessian)):
            raise DivergedSolve("Non-finite normal equations during tracking")
        accepted = False
        while not accepted and damping < 1e12:
            augmented = hessian + damping * np.diag(np.maximum(np.diag(hessian), 1e-9))
            try:
                step = -np.linalg.solve(augmented, gradient)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            candidate = pose.retract(step)
            candidate_cost = objective.cost(candidate)
            if candidate_cost <= cost:
                accepted = True
                converged = cost - candidate_cost <= 1e-14 * max(cost, 1e-12) or np.linalg.norm(step) < 1e-12
                pose, cost = candidate, candidate_cost
                damping = max(damping * 0.1, 1e-12)
                if converged:
                    return pose, cost, iterations
            else:
                damping *= 10.0
        if not accepted:
            break
    return pose, cost, iterations


def solve_tracking(problem: TrackingProblem, max_iterations: int = 10, outlier_chi2: float = 5.99,
                   initial_damping: float = 1e-4, rounds: int = 2) -> TrackingResult:
    """Frame pose from point and marker correspondences, Huber-robust on the point terms."""
    constraints = problem.point_count + 4 * problem.marker_count
    if constraints < 4:
        raise InsufficientConstraints(f"Only {constraints} correspondences, need 4")
    marker_term, point_term = problem.weights()
    if (point_term == 0.0 or problem.point_count == 0) and (marker_term == 0.0 or problem.marker_count == 0):
        raise InsufficientConstraints("Every correspondence carries zero weight")

    pose = problem.initial_pose
    depths = pose.apply(problem.point_positions)[:, 2] if problem.point_count else np.zeros(0)
    active = depths > 1e-9
    total_iterations = 0
    cost = 0.0
    for round_index in range(rounds):
        objective = _TrackingObjective(problem, active)
        if not objective.use_points and not objective.use_markers:
            raise InsufficientConstraints("No usable correspondence left after outlier rejection")
        pose, cost, iterations = _minimize(objective, pose, max_iterations, initial_damping)
        total_iterations += iterations
        chi2 = _point_chi2(problem, pose)
        active = chi2 <= outlier_chi2
        if round_index + 1 < rounds and not np.any(active) and problem.marker_count == 0:
            raise DivergedSolve("Every point flagged as outlier")

    if not (np.all(np.isfinite(pose.rotation)) and np.all(np.isfinite(pose.translation))):
        raise DivergedSolve("Tracking produced a non-finite pose")
    marker_chi2 = _marker_chi2(problem, pose)
    logger.debug("Tracking solved: %d/%d point inliers, %d markers, cost %.4g",
                  int(np.count_nonzero(active)), problem.point_count, problem.marker_count, cost)
    return TrackingResult(pose, active, marker_chi2 <= outlier_chi2, cost, total_iterations)


def _point_chi2(problem: TrackingProblem, pose: Pose) -> np.ndarray:
    if problem.point_count == 0:
        return np.zeros(0)
    camera_points = pose.apply(problem.point_positions)
    chi2 = np.full(problem.point_count, np.inf)
    in_front = camera_points[:, 2] > 1e-9
    if np.any(in_front):
        calibration = np.array([problem.intrinsics.fx, problem.intrinsics.fy,
                                problem.intrinsics.cx, problem.intrinsics.cy])
        projected, _ = project_camera_points(camera_points[in_front], calibration, problem.intrinsics.dist_array)
        residuals = projected - problem.point_pixels[in_front]
        chi2[in_front] = info_scalars(problem.point_levels[in_front], problem.pyramid) * np.sum(residuals ** 2, axis=1)
    return chi2


def _marker_chi2(problem: TrackingProblem, pose: Pose) -> np.ndarray:
    if problem.marker_count == 0:
        return np.zeros(0)
    camera_points = pose.apply(problem.marker_corners.reshape(-1, 3))
    if np.any(camera_points[:, 2] <= 1e-9):
        return np.full(problem.marker_count, np.inf)
    calibration = np.array([problem.intrinsics.fx, problem.intrinsics.fy,
                            problem.intrinsics.cx, problem.intrinsics.cy])
    projected, _ = project_camera_points(camera_points, calibration, problem.intrinsics.dist_array)
    squared = np.sum((projected - problem.marker_pixels.reshape(-1, 2)) ** 2, axis=1).reshape(-1, 4)
    return squared.mean(axis=1)
