import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Set, Tuple, Union

import cv2
import numpy as np

from markerslam.errors import DegenerateConfiguration, SolverError
from markerslam.geometry import CameraIntrinsics, Pose, SimTransform, project_points, umeyama_alignment
from markerslam.mapping.world import WorldMap
from markerslam.markers import solve_planar_pose
from markerslam.models import Frame, KeyFrame, Marker, MarkerObs
from markerslam.optimization.bundle import GLOBAL, bundle_adjust, remove_outlier_observations
from markerslam.optimization.loop import sim3_loop_correct
from markerslam.optimization.tracking import TrackingProblem, solve_tracking
from markerslam.pipeline.matching import match_keyframe_to_points
from markerslam.pipeline.state import PipelineParams

logger = logging.getLogger(__name__)

MAX_LOOP_CANDIDATES: int = 5
PNP_REPROJECTION_PX: float = 4.0
PNP_ITERATIONS: int = 300
MIN_SCALE_PAIRS: int = 10
EXPECTED_MARKER_MARGIN_PX: float = 10.0


@dataclass
class PnpEstimate:
    pose: Pose
    keypoint_indices: np.ndarray
    point_ids: np.ndarray

    @property
    def inlier_count(self) -> int:
        return int(self.point_ids.size)


@dataclass
class MarkerLoop:
    chain: List[int]
    trailing: List[int]
    drift: SimTransform
    marker_ids: List[int]
    loop_pose: Pose
    tracked_pose: Pose


@dataclass
class KeypointLoop:
    keyframe_id: int
    candidate_id: int
    drift: SimTransform
    estimate: PnpEstimate


def _marker_pair_error(pose: Pose, pairs: Sequence[Tuple[Marker, MarkerObs]], intr: CameraIntrinsics) -> float:
    total = 0.0
    for marker, obs in pairs:
        pixels, depth = project_points(pose, marker.world_corners(), intr)
        if np.any(depth <= 0.0):
            return float('inf')
        total += float(np.sum((pixels - obs.corners_px) ** 2))
    return total


def pose_from_markers(pairs: Sequence[Tuple[Marker, MarkerObs]], intr: CameraIntrinsics, params: PipelineParams,
                      require_unambiguous: bool = True) -> Optional[Pose]:
    """Camera pose from mapped markers alone.

    With a single marker the planar solve must be unambiguous; several markers choose jointly among every
    candidate by the total corner error.
    """
    candidates: List[Pose] = []
    any_unambiguous = False
    for marker, obs in pairs:
        try:
            solution = solve_planar_pose(obs, marker.side, intr, params.ambiguity_ratio)
        except SolverError:
            continue
        any_unambiguous = any_unambiguous or not solution.ambiguous
        options = [solution.sol1] if not solution.ambiguous else list(solution.candidates)
        candidates.extend(option.pose.compose(marker.pose.inverse()) for option in options)
    if not candidates:
        return None
    if require_unambiguous and not any_unambiguous and len(pairs) < 2:
        return None
    best = min(candidates, key=lambda pose: _marker_pair_error(pose, pairs, intr))
    if not np.isfinite(_marker_pair_error(best, pairs, intr)):
        return None
    problem = TrackingProblem(intr, best, params.pyramid, huber_alpha=params.huber_alpha, tau_m=params.tau_m)
    for marker, obs in pairs:
        problem.add_marker(marker, obs)
    try:
        return solve_tracking(problem, params.max_iters_tracking, params.outlier_chi2, params.lm_lambda).pose
    except SolverError:
        return best


def markers_confirm(world: WorldMap, pose: Pose, intr: CameraIntrinsics, detected_ids: Set[int],
                    candidate_id: int) -> bool:
    """False when the candidate region's markers should be in view at ``pose`` yet none of them is detected."""
    expected = []
    for keyframe_id in world.local_window(candidate_id):
        for marker_id in world.registry.keyframe_markers(keyframe_id):
            marker = world.marker(marker_id)
            if marker is None or not marker.is_valid or marker_id in expected:
                continue
            pixels, depth = project_points(pose, marker.world_corners(), intr)
            if np.all(depth > 0.0) and np.all(intr.contains(pixels, EXPECTED_MARKER_MARGIN_PX)):
                expected.append(marker_id)
    if not expected:
        return True
    return bool(detected_ids & set(expected))


def pnp_against_region(target: Union[Frame, KeyFrame], world: WorldMap, candidate_id: int,
                       params: PipelineParams) -> Optional[PnpEstimate]:
    """RANSAC PnP of query keypoints against the map points around a candidate keyframe."""
    intr = target.intrinsics
    pixels = target.pixels
    point_ids = world.points_of_keyframes(world.local_window(candidate_id))
    keypoints, matched = match_keyframe_to_points(target.descriptors, world, point_ids, params)
    if matched.size < max(4, params.min_tracking_points):
        return None
    positions = np.array([world.point(int(point_id)).position for point_id in matched])
    try:
        found, rvec, tvec, inliers = cv2.solvePnPRansac(positions, pixels[keypoints], intr.K, intr.dist_array,
                                                        iterationsCount=PNP_ITERATIONS,
                                                        reprojectionError=PNP_REPROJECTION_PX, confidence=0.99,
                                                        flags=cv2.SOLVEPNP_EPNP)
    except cv2.error:
        return None
    if not found or inliers is None or len(inliers) < 4:
        return None
    inliers = np.sort(inliers.ravel())
    pose = Pose.from_rotvec(np.asarray(rvec).reshape(3), np.asarray(tvec).reshape(3))
    problem = TrackingProblem(intr, pose, world.pyramid, positions[inliers], pixels[keypoints[inliers]],
                              target.levels[keypoints[inliers]], matched[inliers], keypoints[inliers],
                              huber_alpha=params.huber_alpha, tau_m=params.tau_m)
    try:
        result = solve_tracking(problem, params.max_iters_tracking, params.outlier_chi2, params.lm_lambda)
    except SolverError:
        return None
    keep = result.point_inliers
    return PnpEstimate(result.pose, keypoints[inliers][keep], matched[inliers][keep])


def _chain_between(world: WorldMap, start_sequence: int, end_keyframe: int) -> Tuple[List[int], List[int]]:
    end_sequence = world.keyframe(end_keyframe).sequence
    ordered = world.keyframes_by_sequence()
    chain = [k.id for k in ordered if start_sequence <= k.sequence <= end_sequence]
    trailing = [k.id for k in ordered if k.sequence > end_sequence]
    return chain, trailing


def _loop_pairs(frame: Frame, world: WorldMap, reference: Optional[int],
                params: PipelineParams) -> List[Tuple[Marker, MarkerObs]]:
    if not params.use_markers or reference is None or reference not in world.keyframes:
        return []
    window = world.local_window(reference)
    nearby = {marker_id for keyframe_id in window for marker_id in world.registry.keyframe_markers(keyframe_id)}
    pairs = []
    for obs in sorted(frame.marker_detections, key=lambda detection: detection.marker_id):
        marker = world.marker(obs.marker_id)
        if marker is None or not marker.is_valid or obs.marker_id in nearby:
            continue
        if not world.marker_observers(obs.marker_id):
            continue
        pairs.append((marker, obs))
    return pairs


def loop_marker_ids(frame: Frame, world: WorldMap, reference: Optional[int], params: PipelineParams) -> Set[int]:
    """Mapped markers in view that the reference neighbourhood never observed."""
    return {marker.id for marker, _ in _loop_pairs(frame, world, reference, params)}


def detect_marker_loop(frame: Frame, tracked_pose: Pose, world: WorldMap, reference: Optional[int],
                       params: PipelineParams) -> Optional[MarkerLoop]:
    """A valid marker seen now but never from the reference neighbourhood closes a loop."""
    pairs = _loop_pairs(frame, world, reference, params)
    if not pairs:
        return None
    loop_pose = pose_from_markers(pairs, frame.intrinsics, params)
    if loop_pose is None:
        logger.debug("Frame %d re-sights markers %s but their pose is unresolved", frame.index,
                     [marker.id for marker, _ in pairs])
        return None
    drift = SimTransform.from_pose(loop_pose.inverse().compose(tracked_pose))
    start = min(world.keyframe(k).sequence for marker, _ in pairs for k in world.marker_observers(marker.id))
    chain, trailing = _chain_between(world, start, reference)
    if not chain:
        return None
    return MarkerLoop(chain, trailing, drift, [marker.id for marker, _ in pairs], loop_pose, tracked_pose)


def close_marker_loop(world: WorldMap, loop: MarkerLoop, params: PipelineParams) -> None:
    """Distributes the loop drift over the chain; the caller inserts the closing keyframe and runs the global BA."""
    sim3_loop_correct(world, loop.chain, loop.drift, loop.trailing)
    logger.info("Marker loop closed on markers %s: chain of %d keyframes, drift %.4f m / %.3f deg",
                loop.marker_ids, len(loop.chain), float(np.linalg.norm(loop.drift.translation)),
                np.degrees(np.linalg.norm(loop.drift.to_vector()[:3])))


def _loop_drift(world: WorldMap, keyframe: KeyFrame, estimate: PnpEstimate) -> SimTransform:
    """Similarity moving the current side onto the loop side, scaled when enough points are paired."""
    current, previous = [], []
    for keypoint_index, point_id in zip(estimate.keypoint_indices, estimate.point_ids):
        own = world.registry.point_of(keyframe.id, int(keypoint_index))
        if own >= 0 and own != int(point_id):
            current.append(world.point(own).position)
            previous.append(world.point(int(point_id)).position)
    if len(current) >= MIN_SCALE_PAIRS:
        try:
            return umeyama_alignment(np.array(current), np.array(previous), with_scale=True)
        except DegenerateConfiguration:
            pass
    return SimTransform.from_pose(estimate.pose.inverse().compose(keyframe.pose))


def detect_keypoint_loop(world: WorldMap, keyframe_id: int, params: PipelineParams) -> Optional[KeypointLoop]:
    """Place recognition against keyframes outside the graph neighbourhood, verified by RANSAC PnP."""
    keyframe = world.keyframe(keyframe_id)
    if keyframe.keypoint_count == 0 or not params.use_keypoints:
        return None
    neighbors = world.neighbors(keyframe_id)
    scores = [world.database.score(keyframe.descriptors, other) for other in neighbors]
    min_score = max(min(scores) if scores else 0.0, params.reloc_min_score)
    excluded = set(neighbors) | {keyframe_id}
    excluded.update(other.id for other in world.keyframes.values()
                    if abs(other.sequence - keyframe.sequence) < params.loop_keyframe_gap)
    candidates = world.database.query(keyframe.descriptors, excluded, min_score)
    for candidate_id, score in candidates[:MAX_LOOP_CANDIDATES]:
        estimate = pnp_against_region(keyframe, world, candidate_id, params)
        if estimate is None or estimate.inlier_count < params.loop_min_inliers:
            continue
        if params.marker_gating and not markers_confirm(world, estimate.pose, keyframe.intrinsics,
                                                         set(keyframe.markers), candidate_id):
            logger.debug("Loop candidate %d for keyframe %d rejected by marker identities", candidate_id, keyframe_id)
            continue
        drift = _loop_drift(world, keyframe, estimate)
        logger.debug("Keypoint loop candidate %d (score %.3f): %d inliers", candidate_id, score,
                     estimate.inlier_count)
        return KeypointLoop(keyframe_id, candidate_id, drift, estimate)
    return None


def fuse_loop_points(world: WorldMap, loop: KeypointLoop, params: PipelineParams) -> int:
    """Binds the closing keyframe's keypoints to the loop-side points, merging duplicates that reproject well."""
    keyframe = world.keyframe(loop.keyframe_id)
    pose = loop.estimate.pose
    fused = 0
    for keypoint_index, point_id in zip(loop.estimate.keypoint_indices, loop.estimate.point_ids):
        keypoint_index, point_id = int(keypoint_index), int(point_id)
        if point_id not in world.points:
            continue
        pixels, depth = project_points(pose, world.point(point_id).position[None], keyframe.intrinsics)
        if depth[0] <= 0.0:
            continue
        chi2 = float(np.sum((pixels[0] - keyframe.pixels[keypoint_index]) ** 2)) / world.pyramid.eta ** int(
            keyframe.levels[keypoint_index])
        if chi2 > params.outlier_chi2:
            continue
        own = world.registry.point_of(keyframe.id, keypoint_index)
        if own == point_id:
            continue
        if own >= 0:
            world.merge_points(point_id, own)
        elif not world.registry.observes_point(keyframe.id, point_id):
            world.add_point_observation(point_id, keyframe.id, keypoint_index)
        else:
            continue
        fused += 1
    return fused


def close_keypoint_loop(world: WorldMap, loop: KeypointLoop, params: PipelineParams) -> int:
    """Fuses both sides of the loop, corrects the chain and refines the whole map; returns the chain length."""
    start = world.keyframe(loop.candidate_id).sequence
    chain, trailing = _chain_between(world, start, loop.keyframe_id)
    fused = fuse_loop_points(world, loop, params)
    if len(chain) >= 2:
        sim3_loop_correct(world, chain, loop.drift, trailing)
    run_global_bundle(world, params)
    logger.info("Keypoint loop closed between keyframes %d and %d: %d points fused, chain of %d, scale %.4f",
                loop.keyframe_id, loop.candidate_id, fused, len(chain), loop.drift.scale)
    return len(chain)


def run_global_bundle(world: WorldMap, params: PipelineParams) -> None:
    try:
        bundle_adjust(world, GLOBAL, max_iters=params.max_iters_global, initial_damping=params.lm_lambda,
                      use_points=params.use_keypoints, use_markers=params.use_markers)
    except SolverError as error:
        logger.warning("Global bundle adjustment failed: %s", error.message)
        return
    remove_outlier_observations(world, world.points.ids(), params.outlier_chi2)

