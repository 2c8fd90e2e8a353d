"""Planar marker poses: single view with its two solutions, several views, and two-frame initialization."""
import numpy as np
import pytest

from markerslam.errors import DegenerateCorners, InsufficientBaseline, NoCommonMarkers, NonPositiveSide
from markerslam.geometry import Pose
from markerslam.markers import (corner_error, initialize_from_markers, ray_angle_deg, resolve_pose_multiview,
                               solve_planar_pose)
from markerslam.models import MarkerObs, canonical_corners
from markerslam.simulation.world import look_pose, surface_pose

SIDE = 0.3


# ── Helpers ──────────────────────────────────────────────────────────────

def _two_views(rng, marker_view):
    marker_center = np.array([rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), 1.5])
    heading = rng.uniform(0.0, 2 * np.pi)
    normal = np.array([np.cos(heading), np.sin(heading), 0.0])
    marker_pose = surface_pose(marker_center, normal)
    lateral = np.cross([0.0, 0.0, 1.0], normal)
    views = []
    for sign in (-1.0, 1.0):
        offset = sign * rng.uniform(0.3, 0.9) * lateral + np.array([0.0, 0.0, rng.uniform(-0.3, 0.3)])
        center = marker_center + rng.uniform(2.5, 3.5) * normal + offset
        camera = look_pose(center, marker_center - center)
        views.append((camera, marker_view(camera, marker_pose, SIDE)))
    return marker_pose, views


# ── Single view ──────────────────────────────────────────────────────────

class TestCanonicalCorners:
    def test_layout(self):
        np.testing.assert_array_equal(canonical_corners(2.0), [[1.0, -1.0, 0.0], [1.0, 1.0, 0.0],
                                                               [-1.0, 1.0, 0.0], [-1.0, -1.0, 0.0]])

    @pytest.mark.parametrize('side', [0.0, -0.2])
    def test_side_must_be_positive(self, side):
        with pytest.raises(NonPositiveSide):
            canonical_corners(side)


class TestSolvePlanarPose:
    def test_recovers_noiseless_pose(self, intrinsics, marker_view):
        truth = Pose.from_rotvec([np.pi + 0.5, 0.3, 0.0], [0.1, -0.05, 1.0])
        obs = marker_view(Pose.identity(), truth, SIDE)
        solution = solve_planar_pose(obs, SIDE, intrinsics)
        assert solution.sol1.pose.is_close(truth, 1e-6)
        assert solution.sol1.error < 1e-12
        assert solution.sol2.error >= solution.sol1.error

    def test_tilted_close_marker_is_not_ambiguous(self, intrinsics, marker_view):
        truth = Pose.from_rotvec([np.pi + 0.7, 0.0, 0.0], [0.0, 0.0, 0.8])
        solution = solve_planar_pose(marker_view(Pose.identity(), truth, SIDE), SIDE, intrinsics)
        assert not solution.ambiguous
        assert solution.sol1.pose.is_close(truth, 1e-6)

    @pytest.mark.parametrize('depth, majority', [(12.0, True), (0.8, False)])
    def test_noisy_oblique_marker_ambiguity_grows_with_range(self, intrinsics, marker_view, depth, majority):
        rng = np.random.default_rng(21)
        truth = Pose.from_rotvec([np.pi + 0.7, 0.0, 0.0], [0.02 * depth, 0.01 * depth, depth])
        clean = marker_view(Pose.identity(), truth, SIDE)
        ambiguous = 0
        for _ in range(100):
            noisy = MarkerObs(0, clean.corners_px + rng.normal(0.0, 0.5, size=(4, 2)))
            ambiguous += solve_planar_pose(noisy, SIDE, intrinsics).ambiguous
        assert (ambiguous > 50) is majority

    @pytest.mark.parametrize('corners', [
        [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]],
        [[10.0, 10.0]] * 4,
        [[np.nan, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
    ])
    def test_degenerate_corners(self, intrinsics, corners):
        with pytest.raises(DegenerateCorners):
            solve_planar_pose(MarkerObs(0, np.array(corners)), SIDE, intrinsics)


class TestRayAngle:
    def test_right_angle_halves(self):
        assert ray_angle_deg(np.zeros(3), np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])) == pytest.approx(45.0)

    def test_same_center_has_no_parallax(self):
        center = np.array([0.2, 0.1, 0.0])
        assert ray_angle_deg(center, center, np.array([0.0, 0.0, 3.0])) == pytest.approx(0.0, abs=1e-6)


# ── Several views ────────────────────────────────────────────────────────

class TestResolvePoseMultiview:
    @pytest.mark.parametrize('seed', range(100))
    def test_recovers_marker_in_world(self, seed, intrinsics, marker_view):
        marker_pose, views = _two_views(np.random.default_rng(seed), marker_view)
        resolved = resolve_pose_multiview(views, SIDE, intrinsics)
        local = canonical_corners(SIDE)
        np.testing.assert_allclose(resolved.apply(local), marker_pose.apply(local), atol=1e-6)
        error = corner_error(resolved, local, [(camera, obs.corners_px, intrinsics) for camera, obs in views])
        assert np.sqrt(error / 8.0) < 1e-6

    def test_single_view_is_not_enough(self, intrinsics, marker_view):
        _, views = _two_views(np.random.default_rng(0), marker_view)
        with pytest.raises(InsufficientBaseline):
            resolve_pose_multiview(views[:1], SIDE, intrinsics)

    def test_identical_views_have_no_baseline(self, intrinsics, marker_view):
        _, views = _two_views(np.random.default_rng(1), marker_view)
        with pytest.raises(InsufficientBaseline):
            resolve_pose_multiview([views[0], views[0]], SIDE, intrinsics)


# ── Two-frame initialization ─────────────────────────────────────────────

class TestInitializeFromMarkers:
    def test_relative_pose_matches_ground_truth(self, exact_marker_sequence):
        sequence = exact_marker_sequence
        pair = None
        for first in range(len(sequence) - 12):
            second = first + 12
            shared = set(sequence.frames[first].markers_by_id) & set(sequence.frames[second].markers_by_id)
            if shared:
                pair = (first, second)
                break
        assert pair is not None
        first, second = pair
        result = initialize_from_markers(sequence.frames[first], sequence.frames[second], sequence.marker_sides)
        truth = sequence.ground_truth
        assert result.relative_pose.is_close(truth[second].compose(truth[first].inverse()), 1e-6)
        for marker_id, pose in result.marker_poses.items():
            assert pose.is_close(truth[first].compose(sequence.marker_poses[marker_id]), 1e-6)
        assert result.parallax_deg > 2.0

    def test_no_common_marker(self, frame_factory, marker_view):
        camera = Pose.identity()
        marker = Pose.from_rotvec([np.pi, 0.0, 0.0], [0.0, 0.0, 2.0])
        f0 = frame_factory(0, markers=[marker_view(camera, marker, SIDE, marker_id=1)])
        f1 = frame_factory(1, markers=[marker_view(camera, marker, SIDE, marker_id=2)])
        with pytest.raises(NoCommonMarkers):
            initialize_from_markers(f0, f1, {1: SIDE, 2: SIDE})
