"""Rigid and similarity transforms, projection, robust-cost helpers and alignment."""
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from markerslam.errors import DegenerateConfiguration, LevelOutOfRange, PointBehindCamera
from markerslam.geometry import (
    CameraIntrinsics, Pose, PyramidConfig, SimTransform, huber, huber_weight, info_scalars, info_weight,
    project, project_camera_points, project_points, reprojection_jacobians, reprojection_residual,
    triangulate_points, umeyama_alignment, undistort_pixels,
)


# ── Helpers ──────────────────────────────────────────────────────────────────

def _random_pose(rng: np.random.Generator, angle: float = 0.3, offset: float = 0.5) -> Pose:
    return Pose.from_rotvec(rng.uniform(-angle, angle, 3), rng.uniform(-offset, offset, 3))


def _random_similarity(rng: np.random.Generator) -> SimTransform:
    rotation = Rotation.random(random_state=int(rng.integers(0, 2 ** 31))).as_matrix()
    return SimTransform.from_matrix(float(rng.uniform(0.5, 2.0)), rotation, rng.uniform(-3.0, 3.0, 3))


def _points_in_front(rng: np.random.Generator, count: int) -> np.ndarray:
    return np.column_stack([rng.uniform(-1.0, 1.0, count), rng.uniform(-1.0, 1.0, count),
                            rng.uniform(3.0, 6.0, count)])


# ── Pose ─────────────────────────────────────────────────────────────────────

class TestPose:
    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            pose = _random_pose(rng, angle=2.0, offset=3.0)
            assert pose.compose(pose.inverse()).is_close(Pose.identity(), 1e-12)

    def test_compose_matches_matrix_product(self):
        rng = np.random.default_rng(2)
        first, second = _random_pose(rng), _random_pose(rng)
        np.testing.assert_allclose(first.compose(second).matrix, first.matrix @ second.matrix, atol=1e-12)

    def test_center_maps_to_origin(self):
        pose = _random_pose(np.random.default_rng(3), angle=1.0, offset=2.0)
        np.testing.assert_allclose(pose.apply(pose.center), np.zeros(3), atol=1e-12)

    def test_retract_zero_is_noop(self):
        pose = _random_pose(np.random.default_rng(4))
        assert pose.retract(np.zeros(6)).is_close(pose, 1e-14)

    def test_retract_is_left_increment(self):
        pose = _random_pose(np.random.default_rng(5))
        delta = np.array([0.01, -0.02, 0.03, 0.1, 0.0, -0.1])
        expected = Pose.from_rotvec(delta[:3], delta[3:]).compose(pose)
        assert pose.retract(delta).is_close(expected, 1e-12)

    def test_rejects_non_unit_quaternion(self):
        with pytest.raises(ValueError):
            Pose(np.array([0.0, 0.0, 0.0, 2.0]), np.zeros(3))

    def test_optical_axis_is_camera_z_in_world(self):
        pose = _random_pose(np.random.default_rng(6), angle=1.0)
        np.testing.assert_allclose(pose.optical_axis, pose.inverse().R[:, 2], atol=1e-12)


# ── Similarity ───────────────────────────────────────────────────────────────

class TestSimTransform:
    def test_inverse_undoes_apply(self):
        rng = np.random.default_rng(10)
        transform = _random_similarity(rng)
        points = rng.normal(size=(10, 3))
        np.testing.assert_allclose(transform.inverse().apply(transform.apply(points)), points, atol=1e-10)

    def test_compose_applies_right_first(self):
        rng = np.random.default_rng(11)
        first, second = _random_similarity(rng), _random_similarity(rng)
        points = rng.normal(size=(5, 3))
        np.testing.assert_allclose(first.compose(second).apply(points), first.apply(second.apply(points)),
                                   atol=1e-10)

    def test_vector_round_trip(self):
        transform = _random_similarity(np.random.default_rng(12))
        restored = SimTransform.from_vector(transform.to_vector())
        assert restored.scale == pytest.approx(transform.scale, rel=1e-12)
        np.testing.assert_allclose(restored.R, transform.R, atol=1e-12)
        np.testing.assert_allclose(restored.translation, transform.translation, atol=1e-12)

    def test_interpolate_endpoints(self):
        transform = SimTransform.from_matrix(1.03, Rotation.from_rotvec([0.0, 0.0, 0.05]).as_matrix(),
                                             [0.25, 0.1, 0.0])
        assert transform.interpolate(0.0).is_identity(1e-12)
        end = transform.interpolate(1.0)
        assert end.scale == pytest.approx(1.03)
        np.testing.assert_allclose(end.R, transform.R, atol=1e-12)
        np.testing.assert_allclose(end.translation, transform.translation, atol=1e-12)

    def test_correct_pose_moves_the_camera_with_the_world(self):
        rng = np.random.default_rng(13)
        intr = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)
        transform = _random_similarity(rng)
        pose = _random_pose(rng)
        points = _points_in_front(rng, 15)
        original, _ = project_points(pose, points, intr)
        moved, _ = project_points(transform.correct_pose(pose), transform.apply(points), intr)
        np.testing.assert_allclose(moved, original, atol=1e-8)
        np.testing.assert_allclose(transform.correct_pose(pose).center, transform.apply(pose.center), atol=1e-10)

    def test_correct_marker_moves_corners(self):
        rng = np.random.default_rng(14)
        transform = _random_similarity(rng)
        marker = _random_pose(rng)
        local = np.array([[0.1, 0.2, 0.0]])
        corrected = transform.correct_marker(marker)
        np.testing.assert_allclose(corrected.translation, transform.apply(marker.translation), atol=1e-10)
        np.testing.assert_allclose(corrected.R, transform.R @ marker.R, atol=1e-12)
        assert np.linalg.norm(corrected.apply(local) - corrected.translation) == pytest.approx(
            np.linalg.norm(local), rel=1e-12)

    def test_rejects_non_positive_scale(self):
        with pytest.raises(ValueError):
            SimTransform(0.0, np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))


# ── Projection ───────────────────────────────────────────────────────────────

class TestProjection:
    def test_principal_point(self, intrinsics):
        np.testing.assert_allclose(project(Pose.identity(), [0.0, 0.0, 2.0], intrinsics), [320.0, 240.0])

    def test_known_pixel(self, intrinsics):
        np.testing.assert_allclose(project(Pose.identity(), [1.0, -0.5, 2.0], intrinsics), [570.0, 115.0])

    def test_point_behind_camera(self, intrinsics):
        with pytest.raises(PointBehindCamera):
            project(Pose.identity(), [0.0, 0.0, -1.0], intrinsics)
        with pytest.raises(PointBehindCamera):
            reprojection_jacobians(Pose.identity(), [0.0, 0.0, 0.0], intrinsics)

    def test_batch_marks_points_behind_with_nan(self, intrinsics):
        pixels, depth = project_points(Pose.identity(), np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]), intrinsics)
        assert np.all(np.isfinite(pixels[0]))
        assert np.all(np.isnan(pixels[1]))
        np.testing.assert_allclose(depth, [1.0, -1.0])

    def test_residual_is_zero_at_projection(self, intrinsics):
        pose = _random_pose(np.random.default_rng(20))
        point = np.array([0.2, 0.1, 4.0])
        np.testing.assert_allclose(reprojection_residual(pose, point, intrinsics, project(pose, point, intrinsics)),
                                   np.zeros(2), atol=1e-12)

    @pytest.mark.parametrize('dist', [(0.0, 0.0, 0.0, 0.0, 0.0), (-0.2, 0.05, 0.001, -0.001, 0.01)])
    def test_jacobians_match_finite_differences(self, dist):
        intr = CameraIntrinsics(500.0, 480.0, 320.0, 240.0, dist)
        rng = np.random.default_rng(21)
        step = 1e-6
        for _ in range(10):
            pose = _random_pose(rng, angle=0.2, offset=0.3)
            point = _points_in_front(rng, 1)[0]
            pose_jacobian, point_jacobian = reprojection_jacobians(pose, point, intr)
            numeric_pose = np.zeros((2, 6))
            for i in range(6):
                delta = np.zeros(6)
                delta[i] = step
                numeric_pose[:, i] = (project(pose.retract(delta), point, intr)
                                      - project(pose.retract(-delta), point, intr)) / (2.0 * step)
            numeric_point = np.zeros((2, 3))
            for i in range(3):
                delta = np.zeros(3)
                delta[i] = step
                numeric_point[:, i] = (project(pose, point + delta, intr)
                                       - project(pose, point - delta, intr)) / (2.0 * step)
            np.testing.assert_allclose(pose_jacobian, numeric_pose, rtol=1e-5, atol=1e-4)
            np.testing.assert_allclose(point_jacobian, numeric_point, rtol=1e-5, atol=1e-4)

    def test_undistort_inverts_projection(self):
        intr = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, (-0.2, 0.05, 0.001, -0.001, 0.0))
        rng = np.random.default_rng(22)
        normalized = rng.uniform(-0.4, 0.4, size=(25, 2))
        camera_points = np.column_stack([normalized, np.ones(25)])
        pixels, _ = project_camera_points(camera_points, np.array([500.0, 500.0, 320.0, 240.0]), intr.dist_array)
        np.testing.assert_allclose(undistort_pixels(pixels, intr), normalized, atol=1e-7)

    def test_undistort_without_distortion_is_linear(self, intrinsics):
        np.testing.assert_allclose(undistort_pixels(np.array([[570.0, 115.0]]), intrinsics), [[0.5, -0.25]])


# ── Robust cost ──────────────────────────────────────────────────────────────

class TestRobustCost:
    def test_info_weight_shrinks_with_level(self, pyramid):
        np.testing.assert_allclose(info_weight(0, pyramid), np.eye(2))
        np.testing.assert_allclose(info_weight(2, pyramid), np.eye(2) / 1.44)

    @pytest.mark.parametrize('level', [-1, 8])
    def test_info_weight_level_out_of_range(self, pyramid, level):
        with pytest.raises(LevelOutOfRange):
            info_weight(level, pyramid)

    def test_info_scalars_match_matrices(self, pyramid):
        levels = np.array([0, 1, 3, 7])
        np.testing.assert_allclose(info_scalars(levels, pyramid), [info_weight(l, pyramid)[0, 0] for l in levels])
        with pytest.raises(LevelOutOfRange):
            info_scalars(np.array([0, 9]), pyramid)

    def test_huber_branches(self):
        assert huber(2.0, 1.0) == pytest.approx(0.5)
        assert huber(2.0, -2.0) == pytest.approx(2.0)
        assert huber(2.0, 5.0) == pytest.approx(2.0 * (5.0 - 1.0))
        np.testing.assert_allclose(huber(2.0, np.array([0.0, 3.0])), [0.0, 4.0])

    def test_huber_is_continuous_at_threshold(self):
        alpha = 2.45
        assert huber(alpha, alpha - 1e-9) == pytest.approx(huber(alpha, alpha + 1e-9), abs=1e-8)

    def test_huber_weight(self):
        assert huber_weight(2.0, 1.0) == 1.0
        assert huber_weight(2.0, 4.0) == pytest.approx(0.5)


# ── Triangulation and alignment ──────────────────────────────────────────────

class TestTriangulation:
    def test_recovers_points_from_two_views(self):
        rng = np.random.default_rng(30)
        points = _points_in_front(rng, 30)
        first = Pose.identity()
        second = Pose.from_rotvec([0.0, -0.05, 0.0], [-0.4, 0.0, 0.0])
        normalized_first = points[:, :2] / points[:, 2:]
        camera = second.apply(points)
        normalized_second = camera[:, :2] / camera[:, 2:]
        np.testing.assert_allclose(triangulate_points(first, second, normalized_first, normalized_second), points,
                                   atol=1e-8)


class TestUmeyama:
    def test_recovers_known_similarity(self):
        rng = np.random.default_rng(40)
        for _ in range(10):
            truth = _random_similarity(rng)
            source = rng.normal(size=(50, 3)) * 3.0
            recovered = umeyama_alignment(source, truth.apply(source))
            assert recovered.scale == pytest.approx(truth.scale, abs=1e-9)
            np.testing.assert_allclose(recovered.R, truth.R, atol=1e-9)
            np.testing.assert_allclose(recovered.translation, truth.translation, atol=1e-9)

    def test_without_scale_keeps_unit_scale(self):
        rng = np.random.default_rng(41)
        source = rng.normal(size=(20, 3))
        rigid = SimTransform.from_matrix(1.0, Rotation.from_rotvec([0.1, 0.2, 0.3]).as_matrix(), [1.0, 2.0, 3.0])
        recovered = umeyama_alignment(source, rigid.apply(source), with_scale=False)
        assert recovered.scale == 1.0
        np.testing.assert_allclose(recovered.apply(source), rigid.apply(source), atol=1e-10)

    def test_collinear_positions_are_degenerate(self):
        line = np.outer(np.linspace(0.0, 1.0, 10), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateConfiguration):
            umeyama_alignment(line, line)

    def test_needs_three_positions(self):
        with pytest.raises(DegenerateConfiguration):
            umeyama_alignment(np.zeros((2, 3)), np.zeros((2, 3)))


class TestPyramid:
    def test_scale(self):
        assert PyramidConfig(1.2, 8).scale(2) == pytest.approx(1.44)

    def test_rejects_eta_at_most_one(self):
        with pytest.raises(ValueError):
            PyramidConfig(1.0, 8)
