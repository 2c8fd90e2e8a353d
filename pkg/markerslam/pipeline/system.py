import logging
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Union

import numpy as np

from markerslam.errors import InitFailed, SolverError
from markerslam.geometry import Pose
from markerslam.evaluation.trajectory import TrajectoryEntry, TrajectoryRecord
from markerslam.mapping.world import WorldMap
from markerslam.models import Frame, InsertionRule, PipelineMode, TrackingStatus
from markerslam.optimization.tracking import TrackingProblem, TrackingResult, solve_tracking
from markerslam.pipeline.initializer import build_seed_map, initialize
from markerslam.pipeline.keyframes import bootstrap_marker_pose, insert_keyframe, should_insert_keyframe
from markerslam.pipeline.loops import (MarkerLoop, close_marker_loop, detect_marker_loop, loop_marker_ids,
                                      run_global_bundle)
from markerslam.pipeline.mapper import LoopEvent, MapManager
from markerslam.pipeline.matching import find_correspondences, reference_from_matches
from markerslam.pipeline.relocalization import relocalize
from markerslam.pipeline.state import PipelineParams, PipelineState

logger = logging.getLogger(__name__)

SEARCH_RADIUS_WIDENING: float = 2.0


@dataclass(frozen=True)
class KeyframeEvent:
    frame_index: int
    keyframe_id: int
    rule: Optional[InsertionRule]


@dataclass
class PendingLoop:
    frame: Frame
    loop: MarkerLoop
    problem: TrackingProblem
    result: TrackingResult
    reference: Optional[int]


class SlamSystem:
    """Per-frame state machine: initialize, track, close marker loops, insert keyframes, relocalize.

    ``frozen`` reuses an existing map for tracking only: no insertion, culling, loop closure or optimization.
    """

    def __init__(self, params: Optional[PipelineParams] = None, marker_sides: Optional[Dict[int, float]] = None,
                 world: Optional[WorldMap] = None, frozen: bool = False):
        self.params = (params or PipelineParams()).ensure_valid()
        self.marker_sides: Dict[int, float] = dict(marker_sides or {})
        self.state = PipelineState(self.params, frozen=frozen)
        self.world: Optional[WorldMap] = None
        self.mapper: Optional[MapManager] = None
        self.trajectory = TrajectoryRecord()
        self.keyframe_events: List[KeyframeEvent] = []
        self.loop_events: List[LoopEvent] = []
        if world is not None:
            self._attach(world)
            self.state.mode = PipelineMode.LOST

    def _attach(self, world: WorldMap) -> None:
        self.world = world
        self.mapper = MapManager(world, self.params, self.loop_events)

    @property
    def frozen(self) -> bool:
        return self.state.frozen

    def start_tracking(self, reference_keyframe: int, pose: Pose, previous_pose: Optional[Pose] = None) -> None:
        """Resumes tracking on the attached map from a known pose."""
        if self.world is None:
            raise InitFailed("No map to track against")
        self.world.keyframe(reference_keyframe)
        self.state.mode = PipelineMode.TRACKING
        self.state.reference_keyframe = reference_keyframe
        self.state.last_matched_points = {}
        self.state.previous_pose = previous_pose
        self.state.last_pose = pose

    # frame handling

    def _prepare(self, frame: Frame) -> Frame:
        if self.params.use_keypoints and self.params.use_markers:
            return frame
        if not self.params.use_keypoints:
            return Frame(frame.index, frame.timestamp, frame.intrinsics,
                         marker_detections=list(frame.marker_detections))
        return replace(frame, marker_detections=[])

    def _emit(self, frame: Frame, pose: Optional[Pose]) -> TrajectoryEntry:
        status = TrackingStatus.TRACKED if pose is not None else TrackingStatus.LOST
        entry = TrajectoryEntry(frame.timestamp, pose, status, frame.index)
        self.trajectory.append(entry)
        self.state.last_frame = frame
        return entry

    def _lose(self, frame: Frame, reason: str) -> TrajectoryEntry:
        if self.state.mode is PipelineMode.TRACKING:
            logger.warning("Tracking lost at frame %d: %s", frame.index, reason)
        self.state.mode = PipelineMode.LOST
        self.state.reset_motion()
        return self._emit(frame, None)

    def process_frame(self, frame: Frame) -> TrajectoryEntry:
        frame = self._prepare(frame)
        if self.state.mode is PipelineMode.UNINITIALIZED:
            return self._initialize(frame)
        if self.world is None:
            return self._emit(frame, None)
        with self.world.lock:
            if self.state.mode is not PipelineMode.TRACKING:
                return self._relocalize(frame)
            outcome = self._track(frame)
            if isinstance(outcome, TrajectoryEntry):
                return outcome
            if not self.mapper.concurrent:
                return self._close_marker_loop(outcome, redetect=False)
        # map manager jobs take the lock, so they drain outside it
        self.mapper.wait_idle()
        with self.world.lock:
            return self._close_marker_loop(outcome, redetect=True)

    def run(self, frames: Iterable[Frame]) -> TrajectoryRecord:
        for frame in frames:
            self.process_frame(frame)
        self.finish()
        return self.trajectory

    def finish(self) -> None:
        if self.mapper is not None:
            self.mapper.wait_idle()

    def close(self) -> None:
        if self.mapper is not None:
            self.mapper.shutdown()

    # initialization

    def _initialize(self, frame: Frame) -> TrajectoryEntry:
        state = self.state
        if self.frozen or frame.is_blank:
            return self._emit(frame, None)
        if state.init_frame is None:
            state.init_frame = frame
            return self._emit(frame, None)
        try:
            seed = initialize(state.init_frame, frame, self.params, self.marker_sides)
        except InitFailed as error:
            state.init_failures += 1
            logger.debug("Initialization with frames %d and %d failed: %s", state.init_frame.index, frame.index,
                         error.message)
            if state.init_failures >= self.params.init_attempts:
                logger.warning("Initialization attempts exhausted, frame %d replaces frame %d as first frame",
                               frame.index, state.init_frame.index)
                state.init_frame = frame
                state.init_failures = 0
            return self._emit(frame, None)
        world = build_seed_map(seed, state.init_frame, frame, self.params, self.marker_sides)
        self._attach(world)
        second = world.latest_keyframe()
        state.mode = PipelineMode.TRACKING
        state.reference_keyframe = second.id
        state.last_matched_points = {point_id: index for index, point_id in
                                     world.registry.keyframe_points(second.id).items()}
        state.previous_pose = None
        state.last_pose = second.pose
        state.init_frame = None
        state.init_failures = 0
        for keyframe in world.keyframes_by_sequence():
            self.keyframe_events.append(KeyframeEvent(keyframe.frame_index, keyframe.id, None))
        return self._emit(frame, second.pose)

    # tracking

    def _solve(self, frame: Frame, guess: Optional[Pose], radius_factor: float, update_counters: bool):
        correspondences = find_correspondences(frame, self.world, self.state, guess, radius_factor, update_counters)
        problem = correspondences.problem
        try:
            result = solve_tracking(problem, self.params.max_iters_tracking, self.params.outlier_chi2,
                                    self.params.lm_lambda)
        except SolverError as error:
            return problem, None, error.message
        return problem, result, None

    def _succeeded(self, problem: TrackingProblem, result: Optional[TrackingResult]) -> bool:
        if result is None:
            return False
        if self.params.use_keypoints and result.inlier_count >= self.params.min_tracking_points:
            return True
        return self.params.use_markers and bool(np.any(result.marker_inliers))

    def _track(self, frame: Frame) -> Union[TrajectoryEntry, PendingLoop]:
        state = self.state
        world = self.world
        if state.reference_keyframe not in world.keyframes:
            latest = world.latest_keyframe()
            state.reference_keyframe = latest.id if latest is not None else None
        guess = state.predicted_pose()
        problem, result, reason = self._solve(frame, guess, SEARCH_RADIUS_WIDENING, update_counters=False)
        if result is None:
            return self._lose(frame, reason)
        refined_problem, refined, _ = self._solve(frame, result.pose, 1.0, update_counters=not self.frozen)
        if self._succeeded(refined_problem, refined):
            problem, result = refined_problem, refined
        if not self._succeeded(problem, result):
            return self._lose(frame, f"{result.inlier_count} point inliers, no marker inliers")

        inlier_points = problem.point_ids[result.point_inliers]
        inlier_markers = [m for m, ok in zip(problem.marker_ids, result.marker_inliers) if ok]
        if not self.frozen:
            for point_id in inlier_points:
                world.point(int(point_id)).found_count += 1
        previous_reference = state.reference_keyframe
        state.last_matched_points = {int(p): int(k) for p, k in zip(inlier_points,
                                                                   problem.keypoint_indices[result.point_inliers])}
        pose = result.pose
        if not self.frozen:
            loop = detect_marker_loop(frame, pose, world, previous_reference, self.params)
            if loop is not None:
                return PendingLoop(frame, loop, problem, result, previous_reference)
            insert, rule = should_insert_keyframe(frame, result, problem, world, previous_reference, self.params)
            if insert:
                pending = loop_marker_ids(frame, world, previous_reference, self.params)
                keyframe = insert_keyframe(world, frame, pose, problem, result, self.params, self.marker_sides,
                                           skip_markers=pending)
                self.keyframe_events.append(KeyframeEvent(frame.index, keyframe.id, rule))
                logger.info("Frame %d inserted as keyframe %d (rule %d)", frame.index, keyframe.id, int(rule))
                state.reference_keyframe = keyframe.id
                self.mapper.submit(keyframe.id)
                state.record_pose(pose)
                return self._emit(frame, pose)
        state.reference_keyframe = reference_from_matches(world, inlier_points, previous_reference, inlier_markers)
        state.record_pose(pose)
        return self._emit(frame, pose)

    def _close_marker_loop(self, pending: PendingLoop, redetect: bool) -> TrajectoryEntry:
        """Corrects the drift at once, then adds the closing frame as a keyframe and refines globally.

        With ``redetect`` the loop is checked again against the map the worker left behind.
        """
        world = self.world
        frame, loop, problem, result = pending.frame, pending.loop, pending.problem, pending.result
        if redetect:
            reference = pending.reference
            if reference not in world.keyframes:
                latest = world.latest_keyframe()
                reference = latest.id if latest is not None else None
            loop = detect_marker_loop(frame, loop.tracked_pose, world, reference, self.params)
            if loop is None:
                logger.debug("Marker loop at frame %d vanished after the map manager drained", frame.index)
                self.state.reference_keyframe = reference
                self.state.record_pose(pending.loop.tracked_pose)
                return self._emit(frame, pending.loop.tracked_pose)
        close_marker_loop(world, loop, self.params)
        keyframe = insert_keyframe(world, frame, loop.loop_pose, problem, result, self.params, self.marker_sides)
        for marker_id in sorted(world.registry.keyframe_markers(keyframe.id)):
            bootstrap_marker_pose(world, marker_id, keyframe, self.params)
        run_global_bundle(world, self.params)
        self.keyframe_events.append(KeyframeEvent(frame.index, keyframe.id, None))
        self.loop_events.append(LoopEvent(frame.index, LoopEvent.MARKERS, len(loop.chain),
                                          float(np.linalg.norm(loop.drift.translation))))
        pose = world.keyframe(keyframe.id).pose
        self.state.reference_keyframe = keyframe.id
        self.state.reset_motion()
        self.state.record_pose(pose)
        return self._emit(frame, pose)

    # relocalization

    def _relocalize(self, frame: Frame) -> TrajectoryEntry:
        if frame.is_blank:
            return self._emit(frame, None)
        outcome = relocalize(frame, self.world, self.state, update_counters=not self.frozen)
        if not outcome.succeeded:
            self.state.reset_motion()
            return self._emit(frame, None)
        state = self.state
        state.mode = PipelineMode.TRACKING
        state.reference_keyframe = outcome.reference_keyframe
        inliers = outcome.result.point_inliers
        state.reset_motion()
        state.last_matched_points = {int(p): int(k) for p, k in zip(outcome.problem.point_ids[inliers],
                                                                   outcome.problem.keypoint_indices[inliers])}
        state.record_pose(outcome.pose)
        return self._emit(frame, outcome.pose)

    # results

    def keyframe_trajectory(self) -> Dict[int, Pose]:
        """Current pose of every live keyframe keyed by its frame index."""
        if self.world is None:
            return {}
        return {keyframe.frame_index: keyframe.pose for keyframe in self.world.keyframes_by_sequence()}
