import logging
from typing import Collection, Dict, Optional, Tuple

import numpy as np

from markerslam.errors import SolverError
from markerslam.geometry import Pose
from markerslam.mapping.world import WorldMap
from markerslam.markers import resolve_pose_multiview, solve_planar_pose
from markerslam.models import Frame, InsertionRule, KeyFrame, Marker, MarkerObs
from markerslam.optimization.tracking import TrackingProblem, TrackingResult
from markerslam.pipeline.state import PipelineParams

logger = logging.getLogger(__name__)


def _single_view_pose(obs: MarkerObs, marker: Marker, camera_pose: Pose, params: PipelineParams,
                      keyframe_intrinsics) -> Optional[Pose]:
    """Marker-to-world pose from one detection when the planar solve is unambiguous."""
    try:
        solution = solve_planar_pose(obs, marker.side, keyframe_intrinsics, params.ambiguity_ratio)
    except SolverError:
        return None
    if solution.ambiguous:
        return None
    return camera_pose.inverse().compose(solution.sol1.pose)


def _multiview_pose(observations, marker: Marker, intrinsics, params: PipelineParams) -> Optional[Pose]:
    if len(observations) < 2:
        return None
    try:
        return resolve_pose_multiview(observations, marker.side, intrinsics, params.ambiguity_ratio,
                                      params.min_baseline_deg)
    except SolverError:
        return None


def _marker_becomes_solvable(world: WorldMap, frame: Frame, pose: Pose, obs: MarkerObs, marker: Marker,
                             params: PipelineParams) -> bool:
    if _single_view_pose(obs, marker, pose, params, frame.intrinsics) is not None:
        return True
    observations = [(world.keyframe(k).pose, o) for k, o in sorted(world.marker_observers(marker.id).items())]
    observations.append((pose, obs))
    return _multiview_pose(observations, marker, frame.intrinsics, params) is not None


def should_insert_keyframe(frame: Frame, result: TrackingResult, problem: TrackingProblem, world: WorldMap,
                           reference: Optional[int], params: PipelineParams) -> Tuple[bool, Optional[InsertionRule]]:
    """Evaluates the insertion rules in order; the first one that fires is reported."""
    pose = result.pose
    detections = sorted(frame.marker_detections, key=lambda obs: obs.marker_id) if params.use_markers else []
    for obs in detections:
        if not world.has_marker(obs.marker_id):
            return True, InsertionRule.NEW_MARKER
    for obs in detections:
        marker = world.marker(obs.marker_id)
        if not marker.is_valid and _marker_becomes_solvable(world, frame, pose, obs, marker, params):
            return True, InsertionRule.MARKER_SOLVABLE
    if detections and world.keyframes:
        nearest = min(float(np.linalg.norm(keyframe.pose.center - pose.center)) for keyframe in world.keyframes.values())
        if nearest > params.tau_b:
            return True, InsertionRule.MARKER_BASELINE
    if params.use_keypoints and reference is not None and reference in world.keyframes:
        reference_points = len(world.registry.keyframe_points(reference))
        if reference_points > 0 and result.inlier_count < params.tau_k / 100.0 * reference_points:
            return True, InsertionRule.LOW_MATCHES
    return False, None


def bootstrap_marker_pose(world: WorldMap, marker_id: int, keyframe: KeyFrame, params: PipelineParams) -> bool:
    """Sets an invalid marker pose from the new keyframe or from every observer together."""
    marker = world.marker(marker_id)
    if marker is None or marker.is_valid:
        return False
    observers = world.marker_observers(marker_id)
    obs = observers.get(keyframe.id)
    pose = None
    if obs is not None:
        pose = _single_view_pose(obs, marker, keyframe.pose, params, keyframe.intrinsics)
    if pose is None:
        views = [(world.keyframe(k).pose, o) for k, o in sorted(observers.items())]
        pose = _multiview_pose(views, marker, keyframe.intrinsics, params)
    if pose is None:
        return False
    marker.pose = pose
    logger.info("Marker %d pose initialized from %d observation(s)", marker_id, len(observers))
    return True


def insert_keyframe(world: WorldMap, frame: Frame, pose: Pose, problem: TrackingProblem,
                    result: Optional[TrackingResult], params: PipelineParams,
                    marker_sides: Dict[int, float], skip_markers: Collection[int] = ()) -> KeyFrame:
    """Adds the frame as a keyframe bound to its inlier point matches and its detected markers.

    Markers in ``skip_markers`` (re-sighted loop markers awaiting closure) stay unbound.
    """
    keyframe = world.add_keyframe(frame, pose)
    if problem.point_count:
        inliers = result.point_inliers if result is not None else np.ones(problem.point_count, dtype=bool)
        for point_id, keypoint_index in zip(problem.point_ids[inliers], problem.keypoint_indices[inliers]):
            point_id, keypoint_index = int(point_id), int(keypoint_index)
            if point_id not in world.points or keypoint_index < 0:
                continue
            if world.registry.observes_point(keyframe.id, point_id):
                continue
            world.add_point_observation(point_id, keyframe.id, keypoint_index)
    if params.use_markers:
        for obs in sorted(frame.marker_detections, key=lambda detection: detection.marker_id):
            if obs.marker_id in skip_markers:
                continue
            world.add_marker(obs.marker_id, marker_sides.get(obs.marker_id, params.marker_side))
            world.add_marker_observation(obs.marker_id, keyframe.id, obs)
    return keyframe
