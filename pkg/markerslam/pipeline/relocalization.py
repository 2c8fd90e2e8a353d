import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from markerslam.errors import SolverError
from markerslam.geometry import Pose
from markerslam.mapping.world import WorldMap
from markerslam.models import Frame
from markerslam.optimization.tracking import TrackingProblem, TrackingResult, solve_tracking
from markerslam.pipeline.loops import MAX_LOOP_CANDIDATES, markers_confirm, pnp_against_region, pose_from_markers
from markerslam.pipeline.matching import find_correspondences, reference_from_matches
from markerslam.pipeline.state import PipelineState

logger = logging.getLogger(__name__)

METHOD_MARKERS = 'markers'
METHOD_KEYPOINTS = 'keypoints'


@dataclass
class Relocalization:
    pose: Optional[Pose] = None
    reference_keyframe: Optional[int] = None
    method: Optional[str] = None
    problem: Optional[TrackingProblem] = None
    result: Optional[TrackingResult] = None
    candidates: List[int] = field(default_factory=list)

    @property
    def succeeded(self) -> bool:
        return self.pose is not None


def _nearest_marker_observer(world: WorldMap, marker_ids: List[int], pose: Pose) -> Optional[int]:
    observers = {k for marker_id in marker_ids for k in world.marker_observers(marker_id)}
    if not observers:
        return None
    return min(observers, key=lambda k: (world.keyframe(k).pose.distance_to(pose), world.keyframe(k).sequence))


def _refine(frame: Frame, world: WorldMap, state: PipelineState, pose: Pose, reference: Optional[int],
            update_counters: bool):
    """Tracks the frame from a relocalized guess; returns (problem, result) or None."""
    state.reference_keyframe = reference
    state.last_matched_points = {}
    correspondences = find_correspondences(frame, world, state, pose, update_counters=update_counters)
    problem = correspondences.problem
    try:
        result = solve_tracking(problem, state.params.max_iters_tracking, state.params.outlier_chi2,
                                state.params.lm_lambda)
    except SolverError:
        return None
    return problem, result


def _tracking_succeeded(problem: TrackingProblem, result: TrackingResult, min_points: int) -> bool:
    return result.inlier_count >= min_points or bool(np.any(result.marker_inliers))


def relocalize(frame: Frame, world: WorldMap, state: PipelineState, update_counters: bool = True) -> Relocalization:
    """Markers first; otherwise place recognition plus RANSAC PnP."""
    params = state.params
    outcome = Relocalization()
    if params.use_markers:
        pairs = []
        for obs in sorted(frame.marker_detections, key=lambda detection: detection.marker_id):
            marker = world.marker(obs.marker_id)
            if marker is not None and marker.is_valid:
                pairs.append((marker, obs))
        pose = pose_from_markers(pairs, frame.intrinsics, params) if pairs else None
        if pose is not None:
            reference = _nearest_marker_observer(world, [marker.id for marker, _ in pairs], pose)
            refined = _refine(frame, world, state, pose, reference, update_counters)
            if refined is not None and _tracking_succeeded(*refined, params.min_tracking_points):
                problem, result = refined
                outcome.pose, outcome.method = result.pose, METHOD_MARKERS
                outcome.problem, outcome.result = problem, result
                outcome.reference_keyframe = reference_from_matches(world, problem.point_ids[result.point_inliers],
                                                                    reference)
                logger.info("Frame %d relocalized from markers %s", frame.index, [m.id for m, _ in pairs])
                return outcome
    if not params.use_keypoints or frame.keypoint_count == 0:
        return outcome
    candidates = world.database.query(frame.descriptors, min_score=params.reloc_min_score)
    outcome.candidates = [keyframe_id for keyframe_id, _ in candidates]
    detected = {obs.marker_id for obs in frame.marker_detections}
    for candidate_id, _ in candidates[:MAX_LOOP_CANDIDATES]:
        estimate = pnp_against_region(frame, world, candidate_id, params)
        if estimate is None or estimate.inlier_count < params.loop_min_inliers:
            continue
        if params.marker_gating and params.use_markers and not markers_confirm(
                world, estimate.pose, frame.intrinsics, detected, candidate_id):
            logger.debug("Relocalization candidate %d rejected by marker identities", candidate_id)
            continue
        refined = _refine(frame, world, state, estimate.pose, candidate_id, update_counters)
        if refined is None or refined[1].inlier_count < params.min_tracking_points:
            continue
        problem, result = refined
        outcome.pose, outcome.method = result.pose, METHOD_KEYPOINTS
        outcome.problem, outcome.result = problem, result
        outcome.reference_keyframe = reference_from_matches(world, problem.point_ids[result.point_inliers],
                                                            candidate_id)
        logger.info("Frame %d relocalized against keyframe %d (%d inliers)", frame.index, candidate_id,
                    result.inlier_count)
        return outcome
    return outcome
