"""Loop detection and closure against maps that drifted over a lap."""
import numpy as np
import pytest

from markerslam.geometry import Pose
from markerslam.pipeline.loops import close_keypoint_loop, close_marker_loop, detect_keypoint_loop, detect_marker_loop
from markerslam.pipeline.mapper import LoopEvent
from markerslam.pipeline.points import erase_orphan_points
from markerslam.pipeline.state import PipelineParams
from markerslam.pipeline.system import SlamSystem
from markerslam.simulation.scenarios import load_scenario
from markerslam.simulation.world import build_reference_map, generate

# Frames the truncated maps keep; the rest of the lap revisits their start.
MAPPED_UNTIL = 150
RESUME_AFTER = 185
REVISIT_FRAME = 225


# ── Helpers ──────────────────────────────────────────────────────────────

def _truncate(world, last_frame):
    """Drops every keyframe after ``last_frame`` together with what only they observed."""
    touched = set()
    for keyframe in world.keyframes_by_sequence():
        if keyframe.frame_index > last_frame:
            touched.update(world.remove_keyframe(keyframe.id))
    erase_orphan_points(world, touched)
    for marker in list(world.markers.values()):
        if not world.marker_observers(marker.id):
            world.markers.erase(world.marker_slot(marker.id))
    world.rebuild_marker_index()
    return world


def _center_errors(world, sequence, last_frame):
    return {keyframe.frame_index: keyframe.pose.distance_to(sequence.ground_truth[keyframe.frame_index])
            for keyframe in world.keyframes.values() if keyframe.frame_index <= last_frame}


def _first_loop(sequence, world, reference, params):
    """First frame after the map whose tracked (drifted) pose closes a marker loop."""
    corrections = sequence.drift_corrections()
    mapped_frame = world.keyframe(reference).frame_index
    for index in range(mapped_frame + 1, len(sequence)):
        tracked = corrections[mapped_frame].correct_pose(sequence.ground_truth[index])
        loop = detect_marker_loop(sequence.frames[index], tracked, world, reference, params)
        if loop is not None:
            return index, loop
    return None, None


@pytest.fixture(scope='module')
def marker_lap():
    config = load_scenario('loop_with_drift', seed=1, overrides={'landmark_count': 0, 'marker_count': 16,
                                                                  'corner_sigma': 0.0, 'drift_scale': 1.0})
    return generate(config)


@pytest.fixture(scope='module')
def keypoint_lap():
    config = load_scenario('loop_with_drift', seed=1, overrides={'landmark_count': 1200, 'corner_sigma': 0.0,
                                                                  'drift_scale': 1.0})
    return generate(config)


@pytest.fixture
def marker_params():
    return PipelineParams(use_keypoints=False)


@pytest.fixture
def drifted_marker_map(marker_lap, marker_params):
    world = build_reference_map(marker_lap, marker_params, keyframe_stride=5, drifted=True)
    return _truncate(world, MAPPED_UNTIL)


@pytest.fixture
def revisited_map(keypoint_lap):
    """Truthful map of the first part of the lap plus an isolated keyframe where the lap comes round again."""
    world = _truncate(build_reference_map(keypoint_lap, PipelineParams(), keyframe_stride=5), MAPPED_UNTIL)
    truth = keypoint_lap.ground_truth[REVISIT_FRAME]
    offset = Pose.from_matrix(truth.R, truth.t + np.array([0.2, -0.1, 0.05]))
    keyframe = world.add_keyframe(keypoint_lap.frames[REVISIT_FRAME], offset)
    return world, keyframe.id


# ── Marker loops ─────────────────────────────────────────────────────────

class TestMarkerLoop:
    def test_old_marker_outside_the_window_closes_a_loop(self, marker_lap, drifted_marker_map, marker_params):
        world = drifted_marker_map
        reference = world.latest_keyframe().id
        index, loop = _first_loop(marker_lap, world, reference, marker_params)
        assert loop is not None
        assert index > MAPPED_UNTIL
        window_markers = {m for k in world.local_window(reference) for m in world.registry.keyframe_markers(k)}
        assert not set(loop.marker_ids) & window_markers
        observers = [world.keyframe(k) for m in loop.marker_ids for k in world.marker_observers(m)]
        first = min(observers, key=lambda keyframe: keyframe.sequence)
        assert loop.chain[0] == first.id
        assert loop.chain[-1] == reference and loop.trailing == []

    def test_loop_pose_sits_in_the_old_markers_frame(self, marker_lap, drifted_marker_map, marker_params):
        world = drifted_marker_map
        reference = world.latest_keyframe().id
        index, loop = _first_loop(marker_lap, world, reference, marker_params)
        assert len(loop.marker_ids) == 1
        anchor_frame = min(world.keyframe(k).frame_index for k in world.marker_observers(loop.marker_ids[0]))
        expected = marker_lap.drift_corrections()[anchor_frame].correct_pose(marker_lap.ground_truth[index])
        assert loop.loop_pose.distance_to(expected) < 1e-5
        assert loop.loop_pose.angle_to(expected) < 1e-5
        moved = loop.drift.correct_pose(loop.tracked_pose)
        assert moved.distance_to(loop.loop_pose) < 1e-5
        assert moved.angle_to(loop.loop_pose) < 1e-5

    def test_closing_undoes_the_drift(self, marker_lap, drifted_marker_map, marker_params):
        world = drifted_marker_map
        reference = world.latest_keyframe().id
        _, loop = _first_loop(marker_lap, world, reference, marker_params)
        before = _center_errors(world, marker_lap, MAPPED_UNTIL)
        close_marker_loop(world, loop, marker_params)
        after = _center_errors(world, marker_lap, MAPPED_UNTIL)
        assert np.mean(list(before.values())) > 0.05
        assert np.mean(list(after.values())) <= 0.2 * np.mean(list(before.values()))

    def test_window_markers_never_close_a_loop(self, marker_lap, drifted_marker_map, marker_params):
        world = drifted_marker_map
        reference = world.latest_keyframe()
        frame = marker_lap.frames[reference.frame_index]
        assert detect_marker_loop(frame, reference.pose, world, reference.id, marker_params) is None


@pytest.mark.parametrize('concurrent', [False, True])
class TestLiveMarkerLoop:
    def test_resumed_run_closes_the_loop_and_undoes_drift(self, marker_lap, concurrent):
        params = PipelineParams(use_keypoints=False, concurrent=concurrent, tau_b=100.0)
        world = _truncate(build_reference_map(marker_lap, params, keyframe_stride=5, drifted=True), RESUME_AFTER)
        reference = world.latest_keyframe()
        resumed_at = reference.frame_index
        before = _center_errors(world, marker_lap, resumed_at)
        corrections = marker_lap.drift_corrections()
        previous = corrections[resumed_at - 1].correct_pose(marker_lap.ground_truth[resumed_at - 1])
        system = SlamSystem(params, marker_lap.marker_sides, world=world)
        system.start_tracking(reference.id, reference.pose, previous)
        try:
            for frame in marker_lap.frames[resumed_at + 1:]:
                system.process_frame(frame)
            system.finish()
        finally:
            system.close()
        assert any(event.kind == LoopEvent.MARKERS for event in system.loop_events)
        assert system.mapper._executor is None
        after = _center_errors(world, marker_lap, resumed_at)
        common = sorted(set(before) & set(after))
        assert len(common) >= 10
        assert np.mean([after[f] for f in common]) <= 0.2 * np.mean([before[f] for f in common])


# ── Keypoint loops ───────────────────────────────────────────────────────

class TestKeypointLoop:
    def test_revisit_outside_the_neighbourhood_is_found(self, keypoint_lap, revisited_map):
        world, keyframe_id = revisited_map
        params = PipelineParams(marker_gating=False)
        assert world.neighbors(keyframe_id) == []
        loop = detect_keypoint_loop(world, keyframe_id, params)
        assert loop is not None
        assert loop.candidate_id != keyframe_id
        assert world.keyframe(loop.candidate_id).frame_index <= 60
        assert loop.estimate.inlier_count >= params.loop_min_inliers
        truth = keypoint_lap.ground_truth[REVISIT_FRAME]
        assert loop.estimate.pose.distance_to(truth) < 0.05
        moved = loop.drift.correct_pose(world.keyframe(keyframe_id).pose)
        assert moved.distance_to(loop.estimate.pose) < 1e-6

    def test_nearby_keyframes_are_not_loop_candidates(self, revisited_map):
        world, keyframe_id = revisited_map
        params = PipelineParams(marker_gating=False, loop_keyframe_gap=1000)
        assert detect_keypoint_loop(world, keyframe_id, params) is None

    @pytest.mark.slow
    def test_closing_binds_and_moves_the_revisit(self, keypoint_lap, revisited_map):
        world, keyframe_id = revisited_map
        params = PipelineParams(marker_gating=False)
        loop = detect_keypoint_loop(world, keyframe_id, params)
        chain_length = close_keypoint_loop(world, loop, params)
        assert chain_length >= 2
        assert world.registry.keyframe_points(keyframe_id)
        assert loop.candidate_id in world.neighbors(keyframe_id)
        truth = keypoint_lap.ground_truth[REVISIT_FRAME]
        assert world.keyframe(keyframe_id).pose.distance_to(truth) < 0.1
