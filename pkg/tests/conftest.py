"""Shared fixtures: a small simulated room, its ground-truth map and frame builders."""
import numpy as np
import pytest

from markerslam.geometry import CameraIntrinsics, Pose, PyramidConfig, project_points
from markerslam.models import DESCRIPTOR_BYTES, Frame, MarkerObs, canonical_corners
from markerslam.pipeline.state import PipelineParams
from markerslam.simulation.world import WorldConfig, build_reference_map, generate


@pytest.fixture
def intrinsics():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0)


@pytest.fixture
def pyramid():
    return PyramidConfig(1.2, 8)


@pytest.fixture
def params():
    return PipelineParams()


@pytest.fixture(scope='session')
def small_config():
    # Same per-frame step as the default lap, started where a marker is in view.
    return WorldConfig(seed=3, frame_count=40, laps=1.15 * 40 / 240, landmark_count=800, start_angle_deg=10.0)


@pytest.fixture(scope='session')
def small_sequence(small_config):
    return generate(small_config)


@pytest.fixture(scope='session')
def marker_config():
    return WorldConfig(seed=5, frame_count=60, laps=1.15 * 60 / 240, landmark_count=0, marker_count=16,
                       start_angle_deg=10.0)


@pytest.fixture(scope='session')
def marker_sequence(marker_config):
    return generate(marker_config)


@pytest.fixture(scope='session')
def exact_marker_sequence(marker_config):
    return generate(marker_config.with_overrides({'corner_sigma': 0.0}))


@pytest.fixture
def reference_map(small_sequence):
    return build_reference_map(small_sequence, PipelineParams(), keyframe_stride=5)


@pytest.fixture
def frame_factory(intrinsics):
    """Builds frames with random keypoints; ``seed`` fixes the draw."""

    def build(index=0, count=20, seed=0, markers=None, timestamp=None):
        rng = np.random.default_rng(seed)
        pixels = rng.uniform([0.0, 0.0], [640.0, 480.0], size=(count, 2))
        levels = rng.integers(0, 3, size=count)
        descriptors = rng.integers(0, 256, size=(count, DESCRIPTOR_BYTES), dtype=np.uint8)
        stamp = index / 30.0 if timestamp is None else timestamp
        return Frame(index, stamp, intrinsics, pixels, levels, descriptors, list(markers or []))

    return build


@pytest.fixture
def marker_view(intrinsics):
    """Projects a marker into a camera: ``(camera_pose, marker_pose, side) -> MarkerObs``."""

    def build(camera_pose: Pose, marker_pose: Pose, side: float, marker_id: int = 0) -> MarkerObs:
        corners, _ = project_points(camera_pose, marker_pose.apply(canonical_corners(side)), intrinsics)
        return MarkerObs(marker_id, corners)

    return build
