"""Planar marker pose estimation with explicit two-solution ambiguity."""
import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from markerslam.errors import (AllCandidatesInconsistent, DegenerateCorners, InsufficientBaseline,
                               InsufficientParallax, NoCommonMarkers, NoConvergence, PointBehindCamera)
from markerslam.geometry import CameraIntrinsics, Pose, pose_increment_jacobian, project_camera_points
from markerslam.models import AmbiguousPose, Frame, MarkerObs, PoseSolution, canonical_corners

logger = logging.getLogger(__name__)

DEFAULT_AMBIGUITY_RATIO: float = 3.0
DEFAULT_MIN_BASELINE_DEG: float = 2.0

MarkerView = Tuple[Pose, np.ndarray, CameraIntrinsics]


def _check_corners(corners: np.ndarray) -> None:
    if not np.all(np.isfinite(corners)):
        raise DegenerateCorners("Corner pixels must be finite")
    longest = max(float(np.linalg.norm(a - b)) for a, b in itertools.combinations(corners, 2))
    if longest <= 0.0:
        raise DegenerateCorners("Corners coincide")
    for a, b, c in itertools.combinations(corners, 3):
        twice_area = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if twice_area < 1e-6 * longest * longest:
            raise DegenerateCorners("Three marker corners are collinear")


def _corner_terms(variable: Pose, local_corners: np.ndarray,
                  views: Sequence[MarkerView]) -> Tuple[np.ndarray, np.ndarray]:
    """Stacked corner residuals and their Jacobian w.r.t. a left increment of ``variable``.

    ``variable`` maps marker corners into the frame the view poses start from.
    """
    world_corners = variable.apply(local_corners)
    d_world = pose_increment_jacobian(world_corners)
    residuals = []
    jacobians = []
    for camera, pixels, intr in views:
        camera_corners = camera.apply(world_corners)
        if np.any(camera_corners[:, 2] <= 0.0):
            raise PointBehindCamera("Marker corner behind the camera")
        projected, d_pixel = project_camera_points(
            camera_corners, np.array([intr.fx, intr.fy, intr.cx, intr.cy]), intr.dist_array, with_jacobian=True)
        residuals.append((projected - pixels).reshape(-1))
        jacobians.append((d_pixel @ camera.R @ d_world).reshape(-1, 6))
    return np.concatenate(residuals), np.vstack(jacobians)


def corner_error(variable: Pose, local_corners: np.ndarray, views: Sequence[MarkerView]) -> float:
    """Sum of squared corner residuals in pixels², infinite when a corner falls behind a camera."""
    try:
        residuals, _ = _corner_terms(variable, local_corners, views)
    except PointBehindCamera:
        return float('inf')
    return float(residuals @ residuals)


def _refine(initial: Pose, terms: Callable[[Pose], Tuple[np.ndarray, np.ndarray]],
            max_iterations: int = 30) -> Tuple[Pose, float]:
    pose = initial
    residuals, jacobian = terms(pose)
    cost = float(residuals @ residuals)
    damping = 1e-6
    for _ in range(max_iterations):
        hessian = jacobian.T @ jacobian
        gradient = jacobian.T @ residuals
        if np.linalg.norm(gradient) < 1e-14:
            break
        try:
            step = -np.linalg.solve(hessian + damping * np.diag(np.maximum(np.diag(hessian), 1e-12)), gradient)
        except np.linalg.LinAlgError:
            damping *= 10.0
            continue
        candidate = pose.retract(step)
        try:
            candidate_residuals, candidate_jacobian = terms(candidate)
        except PointBehindCamera:
            damping *= 10.0
            continue
        candidate_cost = float(candidate_residuals @ candidate_residuals)
        if candidate_cost < cost:
            improvement = cost - candidate_cost
            pose, residuals, jacobian, cost = candidate, candidate_residuals, candidate_jacobian, candidate_cost
            damping = max(damping * 0.1, 1e-12)
            if improvement <= 1e-16 * max(cost, 1.0) or np.linalg.norm(step) < 1e-13:
                break
        else:
            damping *= 10.0
            if damping > 1e10:
                break
    if not np.isfinite(cost):
        raise NoConvergence("Marker pose refinement produced a non-finite cost")
    return pose, cost


def _same_pose(first: Pose, second: Pose) -> bool:
    scale = max(1.0, float(np.linalg.norm(first.translation)))
    return first.angle_to(second) < 1e-6 and float(np.linalg.norm(first.translation - second.translation)) < 1e-9 * scale


def solve_planar_pose(obs: MarkerObs, side: float, intr: CameraIntrinsics,
                      ambiguity_ratio: float = DEFAULT_AMBIGUITY_RATIO) -> AmbiguousPose:
    """Both local minima of the four-corner cost; poses map marker corners into the camera."""
    corners = np.asarray(obs.corners_px, dtype=np.float64)
    _check_corners(corners)
    local = canonical_corners(side)
    found, rvecs, tvecs, _ = cv2.solvePnPGeneric(local, corners.reshape(4, 1, 2), intr.K, intr.dist_array,
                                                 flags=cv2.SOLVEPNP_IPPE)
    if not found or len(rvecs) == 0:
        raise NoConvergence(f"No planar pose seed for marker {obs.marker_id}")
    seeds = [Pose.from_rotvec(np.asarray(r).reshape(3), np.asarray(t).reshape(3)) for r, t in zip(rvecs, tvecs)]
    views = [(Pose.identity(), corners, intr)]
    solutions = []
    for seed in seeds[:2]:
        try:
            pose, error = _refine(seed, lambda p: _corner_terms(p, local, views))
        except PointBehindCamera:
            continue
        solutions.append(PoseSolution(pose, error))
    if not solutions:
        raise NoConvergence(f"Both planar pose seeds for marker {obs.marker_id} failed")
    if len(solutions) == 1:
        solutions.append(solutions[0])
    solutions.sort(key=lambda solution: solution.error)
    best, other = solutions
    if _same_pose(best.pose, other.pose):
        ambiguous = False
    else:
        ambiguous = other.error / max(best.error, 1e-12) < ambiguity_ratio
    return AmbiguousPose(best, other, ambiguous)


def marker_center_world(camera_pose: Pose, marker_in_camera: Pose) -> np.ndarray:
    return camera_pose.inverse().apply(marker_in_camera.translation)


def ray_angle_deg(first_center: np.ndarray, second_center: np.ndarray, target: np.ndarray) -> float:
    first_ray = target - first_center
    second_ray = target - second_center
    denominator = np.linalg.norm(first_ray) * np.linalg.norm(second_ray)
    if denominator <= 0.0:
        return 0.0
    cosine = np.clip(float(first_ray @ second_ray) / denominator, -1.0, 1.0)
    return float(np.degrees(np.arccos(cosine)))


def _max_ray_angle(centers: List[np.ndarray], target: np.ndarray) -> float:
    best = 0.0
    for first, second in itertools.combinations(centers, 2):
        best = max(best, ray_angle_deg(first, second, target))
    return best


def resolve_pose_multiview(observations: Sequence[Tuple[Pose, MarkerObs]], side: float, intr: CameraIntrinsics,
                           ambiguity_ratio: float = DEFAULT_AMBIGUITY_RATIO,
                           min_baseline_deg: float = DEFAULT_MIN_BASELINE_DEG) -> Pose:
    """Marker-to-world pose minimising the corner error over every observing keyframe."""
    if len(observations) < 2:
        raise InsufficientBaseline("Multiview resolution needs at least two observations")
    local = canonical_corners(side)
    views = [(camera, np.asarray(obs.corners_px, dtype=np.float64), intr) for camera, obs in observations]
    solved = [solve_planar_pose(obs, side, intr, ambiguity_ratio) for _, obs in observations]

    center = np.mean([marker_center_world(camera, solution.sol1.pose)
                      for (camera, _), solution in zip(observations, solved)], axis=0)
    baseline = _max_ray_angle([camera.center for camera, _ in observations], center)
    if baseline <= min_baseline_deg:
        raise InsufficientBaseline(f"Largest ray angle {baseline:.3f} deg does not exceed {min_baseline_deg} deg")

    best_pose: Optional[Pose] = None
    best_error = float('inf')
    for (camera, _), solution in zip(observations, solved):
        for candidate in solution.candidates:
            marker_pose = camera.inverse().compose(candidate.pose)
            error = corner_error(marker_pose, local, views)
            if error < best_error:
                best_pose, best_error = marker_pose, error
    if best_pose is None:
        raise AllCandidatesInconsistent("Every candidate puts a corner behind some camera")
    try:
        refined, refined_error = _refine(best_pose, lambda p: _corner_terms(p, local, views))
    except NoConvergence:
        return best_pose
    return refined if refined_error <= best_error else best_pose


@dataclass
class MarkerInitialization:
    relative_pose: Pose
    marker_poses: Dict[int, Pose]
    error: float
    parallax_deg: float


def initialize_from_markers(f0: Frame, f1: Frame, sides: Dict[int, float], default_side: float = 0.0,
                            ambiguity_ratio: float = DEFAULT_AMBIGUITY_RATIO,
                            min_parallax_deg: float = DEFAULT_MIN_BASELINE_DEG) -> MarkerInitialization:
    """Metric relative pose of ``f1`` (``f0`` is the world frame) and the common marker poses."""
    first = f0.markers_by_id
    second = f1.markers_by_id
    common = sorted(set(first) & set(second))
    if not common:
        raise NoCommonMarkers(f"Frames {f0.index} and {f1.index} share no marker")
    identity = Pose.identity()
    solved = {}
    for marker_id in common:
        side = sides.get(marker_id, default_side)
        solved[marker_id] = (side,
                             solve_planar_pose(first[marker_id], side, f0.intrinsics, ambiguity_ratio),
                             solve_planar_pose(second[marker_id], side, f1.intrinsics, ambiguity_ratio))

    def _evaluate(relative: Pose) -> Tuple[float, Dict[int, Pose]]:
        total = 0.0
        chosen = {}
        for marker_id, (side, in_first, in_second) in solved.items():
            local = canonical_corners(side)
            views = [(identity, first[marker_id].corners_px, f0.intrinsics),
                     (relative, second[marker_id].corners_px, f1.intrinsics)]
            options = [solution.pose for solution in in_first.candidates]
            options += [relative.inverse().compose(solution.pose) for solution in in_second.candidates]
            errors = [corner_error(option, local, views) for option in options]
            index = int(np.argmin(errors))
            total += errors[index]
            chosen[marker_id] = options[index]
        return total, chosen

    best: Optional[Tuple[float, Pose, Dict[int, Pose]]] = None
    for marker_id, (_, in_first, in_second) in solved.items():
        for a, b in itertools.product(in_first.candidates, in_second.candidates):
            relative = b.pose.compose(a.pose.inverse())
            total, chosen = _evaluate(relative)
            if best is None or total < best[0]:
                best = (total, relative, chosen)
    total, relative, chosen = best
    if not np.isfinite(total):
        raise AllCandidatesInconsistent("No relative pose keeps every marker in front of both cameras")

    parallax = max(ray_angle_deg(np.zeros(3), relative.center, pose.translation) for pose in chosen.values())
    if parallax <= min_parallax_deg:
        raise InsufficientParallax(f"Parallax {parallax:.3f} deg does not exceed {min_parallax_deg} deg")
    logger.debug("Marker initialization from %d common markers, error %.3g px^2, parallax %.2f deg",
                  len(common), total, parallax)
    return MarkerInitialization(relative, chosen, total, parallax)
