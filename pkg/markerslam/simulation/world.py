"""Synthetic worlds: wall landmarks with random binary descriptors, planar markers and a moving camera.

Every random draw comes from one generator seeded by ``WorldConfig.seed``, in a fixed order, so a
configuration fully determines its sequence.
"""
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from markerslam.errors import InvalidConfig
from markerslam.evaluation.trajectory import TrajectoryEntry, TrajectoryRecord
from markerslam.geometry import CameraIntrinsics, Pose, PyramidConfig, SimTransform, project_points, rotation_exp
from markerslam.mapping.world import WorldMap
from markerslam.models import DESCRIPTOR_BYTES, Frame, MarkerObs, PointStability, TrackingStatus, canonical_corners
from markerslam.pipeline.state import PipelineParams, coerce_setting

logger = logging.getLogger(__name__)

TRAJECTORY_CIRCLE = 'circle'
TRAJECTORY_CORRIDOR = 'corridor'
HEADING_OUTWARD = 'outward'
HEADING_FORWARD = 'forward'

MIN_DEPTH: float = 0.1
CORRIDOR_MARGIN: float = 0.5

_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    frame_count: int = 240
    fps: float = 30.0
    # trajectory
    trajectory: str = TRAJECTORY_CIRCLE
    heading: str = HEADING_OUTWARD
    radius: float = 1.5
    camera_height: float = 1.5
    laps: float = 1.15
    start_angle_deg: float = 0.0
    height_wobble: float = 0.05
    view_yaw_deg: float = 20.0
    # surfaces
    room_width: float = 8.0
    room_depth: float = 8.0
    room_height: float = 3.0
    corridor_half_width: float = 2.0
    segment_length: float = 6.0
    segment_count: int = 1
    landmark_count: int = 2500
    surface_jitter: float = 0.15
    marker_count: int = 8
    marker_side: float = 0.3
    marker_height: float = 1.5
    # observation model
    pixel_sigma: float = 0.5
    bit_flip_prob: float = 0.02
    corner_sigma: float = 0.3
    marker_dropout: float = 0.0
    keypoint_dropout: float = 0.0
    max_view_angle_deg: float = 75.0
    max_range: float = 12.0
    min_marker_px: float = 20.0
    level_reference_depth: float = 4.0
    max_level_offset: int = 2
    # camera
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    pyramid_eta: float = 1.2
    pyramid_levels: int = 8
    # kidnapping
    kidnap_frame: int = -1
    kidnap_blank_frames: int = 0
    kidnap_jump_deg: float = 0.0
    # accumulated odometry error at the last frame
    drift_x: float = 0.0
    drift_y: float = 0.0
    drift_z: float = 0.0
    drift_yaw_deg: float = 0.0
    drift_scale: float = 1.0

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, width=self.width, height=self.height)

    @property
    def pyramid(self) -> PyramidConfig:
        return PyramidConfig(self.pyramid_eta, self.pyramid_levels)

    @property
    def drift(self) -> SimTransform:
        return SimTransform.from_matrix(self.drift_scale, rotation_exp([0.0, 0.0, np.radians(self.drift_yaw_deg)]),
                                        [self.drift_x, self.drift_y, self.drift_z])

    def validate(self) -> Tuple[bool, Optional[str]]:
        if self.frame_count < 1:
            return False, "frame_count must be at least 1"
        if self.trajectory not in (TRAJECTORY_CIRCLE, TRAJECTORY_CORRIDOR):
            return False, f"Unknown trajectory '{self.trajectory}'"
        if self.heading not in (HEADING_OUTWARD, HEADING_FORWARD):
            return False, f"Unknown heading '{self.heading}'"
        for name in ('pixel_sigma', 'corner_sigma', 'surface_jitter', 'height_wobble'):
            if getattr(self, name) < 0.0:
                return False, f"{name} cannot be negative"
        for name in ('bit_flip_prob', 'marker_dropout', 'keypoint_dropout'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                return False, f"{name} must be a probability in [0, 1]"
        for name in ('fps', 'radius', 'room_width', 'room_depth', 'room_height', 'corridor_half_width',
                     'segment_length', 'marker_side', 'max_range', 'level_reference_depth', 'fx', 'fy',
                     'drift_scale'):
            if not getattr(self, name) > 0.0:
                return False, f"{name} must be positive"
        for name in ('landmark_count', 'marker_count', 'max_level_offset', 'kidnap_blank_frames'):
            if getattr(self, name) < 0:
                return False, f"{name} cannot be negative"
        if self.segment_count < 1:
            return False, "segment_count must be at least 1"
        if self.width < 1 or self.height < 1:
            return False, "Image size must be positive"
        if not self.pyramid_eta > 1.0 or self.pyramid_levels < 1:
            return False, "Pyramid needs eta > 1 and at least one level"
        if self.trajectory == TRAJECTORY_CIRCLE:
            if self.radius >= min(self.room_width, self.room_depth) / 2.0:
                return False, "The camera circle must stay inside the room"
        return True, None

    def ensure_valid(self) -> 'WorldConfig':
        ok, reason = self.validate()
        if not ok:
            raise InvalidConfig(reason)
        return self

    def with_overrides(self, overrides: Mapping[str, Any]) -> 'WorldConfig':
        known = {item.name for item in fields(self)}
        parsed: Dict[str, Any] = {}
        for key, raw in overrides.items():
            name = key.strip().lower()
            if name not in known:
                raise InvalidConfig(f"Unknown world setting '{key}'")
            parsed[name] = coerce_setting(name, raw, getattr(self, name))
        return replace(self, **parsed)

    def to_mapping(self) -> Dict[str, str]:
        return {item.name: repr(getattr(self, item.name)) if isinstance(getattr(self, item.name), float)
                else str(getattr(self, item.name)) for item in fields(self)}


@dataclass(eq=False)
class ObservationSequence:
    """Frames plus everything that generated them."""
    config: WorldConfig
    frames: List[Frame]
    ground_truth: List[Pose]
    landmark_positions: np.ndarray
    landmark_descriptors: np.ndarray
    keypoint_landmarks: List[np.ndarray]
    marker_poses: Dict[int, Pose] = field(default_factory=dict)
    marker_sides: Dict[int, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.config.intrinsics

    def ground_truth_record(self) -> TrajectoryRecord:
        return TrajectoryRecord([TrajectoryEntry(frame.timestamp, pose, TrackingStatus.TRACKED, frame.index)
                                 for frame, pose in zip(self.frames, self.ground_truth)])

    def drift_corrections(self) -> List[SimTransform]:
        """Share of the configured drift carried by each frame, none at the first and all of it at the last."""
        drift = self.config.drift
        last = max(len(self.frames) - 1, 1)
        return [drift.interpolate(index / last) for index in range(len(self.frames))]

    def drifted_record(self) -> TrajectoryRecord:
        corrections = self.drift_corrections()
        return TrajectoryRecord([TrajectoryEntry(frame.timestamp, correction.correct_pose(pose),
                                                 TrackingStatus.TRACKED, frame.index)
                                 for frame, pose, correction in zip(self.frames, self.ground_truth, corrections)])

    def __repr__(self) -> str:
        return (f'<ObservationSequence frames={len(self.frames)} landmarks={self.landmark_positions.shape[0]} '
                f'markers={len(self.marker_poses)}>')


def look_pose(center: np.ndarray, forward: np.ndarray) -> Pose:
    """World-to-camera pose of a level camera at ``center`` looking along ``forward``."""
    z_axis = np.asarray(forward, dtype=np.float64)
    z_axis = z_axis / np.linalg.norm(z_axis)
    x_axis = np.cross(z_axis, _UP)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    rotation = np.vstack([x_axis, y_axis, z_axis])
    return Pose.from_matrix(rotation, -rotation @ np.asarray(center, dtype=np.float64))


def surface_pose(center: np.ndarray, normal: np.ndarray) -> Pose:
    """Marker-to-world pose of a vertical marker whose +z axis is ``normal``."""
    z_axis = np.asarray(normal, dtype=np.float64) / np.linalg.norm(normal)
    x_axis = np.cross(_UP, z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    return Pose.from_matrix(np.column_stack([x_axis, y_axis, z_axis]), center)


def _kidnap_offset(config: WorldConfig, index: int) -> float:
    if config.kidnap_frame < 0 or index < config.kidnap_frame:
        return 0.0
    return np.radians(config.kidnap_jump_deg)


def is_blank_frame(config: WorldConfig, index: int) -> bool:
    return 0 <= config.kidnap_frame <= index < config.kidnap_frame + config.kidnap_blank_frames


def trajectory_poses(config: WorldConfig) -> List[Pose]:
    poses = []
    if config.trajectory == TRAJECTORY_CORRIDOR:
        total = config.segment_length * config.segment_count
        start = -total / 2.0 + CORRIDOR_MARGIN
        travel = total - 2.0 * CORRIDOR_MARGIN
        yaw = np.radians(config.view_yaw_deg)
        forward = np.array([np.sin(yaw), np.cos(yaw), 0.0])
        last = max(config.frame_count - 1, 1)
        for index in range(config.frame_count):
            center = np.array([start + travel * index / last, 0.0, config.camera_height])
            poses.append(look_pose(center, forward))
        return poses
    step = 2.0 * np.pi * config.laps / config.frame_count
    for index in range(config.frame_count):
        angle = np.radians(config.start_angle_deg) + step * index + _kidnap_offset(config, index)
        center = np.array([config.radius * np.cos(angle), config.radius * np.sin(angle),
                           config.camera_height + config.height_wobble * np.sin(3.0 * angle)])
        if config.heading == HEADING_OUTWARD:
            forward = np.array([np.cos(angle), np.sin(angle), 0.0])
        else:
            forward = np.array([-np.sin(angle), np.cos(angle), 0.0])
        poses.append(look_pose(center, forward))
    return poses


def _room_walls(config: WorldConfig) -> List[Tuple[np.ndarray, np.ndarray, float, np.ndarray]]:
    """(corner, along-wall axis, length, inward normal) for each vertical wall."""
    half_w, half_d = config.room_width / 2.0, config.room_depth / 2.0
    return [
        (np.array([half_w, -half_d, 0.0]), np.array([0.0, 1.0, 0.0]), config.room_depth, np.array([-1.0, 0.0, 0.0])),
        (np.array([-half_w, -half_d, 0.0]), np.array([0.0, 1.0, 0.0]), config.room_depth, np.array([1.0, 0.0, 0.0])),
        (np.array([-half_w, half_d, 0.0]), np.array([1.0, 0.0, 0.0]), config.room_width, np.array([0.0, -1.0, 0.0])),
        (np.array([-half_w, -half_d, 0.0]), np.array([1.0, 0.0, 0.0]), config.room_width, np.array([0.0, 1.0, 0.0])),
    ]


def _sample_on_walls(rng: np.random.Generator, walls, count: int, height: float,
                     jitter: float) -> Tuple[np.ndarray, np.ndarray]:
    if count == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    lengths = np.array([wall[2] for wall in walls])
    choice = rng.choice(len(walls), size=count, p=lengths / lengths.sum())
    along = rng.random(count)
    up = rng.random(count)
    depth = rng.random(count) * jitter
    positions = np.empty((count, 3))
    normals = np.empty((count, 3))
    for row, wall_index in enumerate(choice):
        corner, axis, length, normal = walls[wall_index]
        positions[row] = corner + axis * along[row] * length + _UP * up[row] * height + normal * depth[row]
        normals[row] = normal
    return positions, normals


def _corridor_walls(config: WorldConfig) -> List[Tuple[np.ndarray, np.ndarray, float, np.ndarray]]:
    start = -config.segment_length * config.segment_count / 2.0
    half = config.corridor_half_width
    return [
        (np.array([start, half, 0.0]), np.array([1.0, 0.0, 0.0]), config.segment_length, np.array([0.0, -1.0, 0.0])),
        (np.array([start, -half, 0.0]), np.array([1.0, 0.0, 0.0]), config.segment_length, np.array([0.0, 1.0, 0.0])),
    ]


def generate_landmarks(config: WorldConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions, inward surface normals and descriptors; corridor segments repeat the first one exactly."""
    if config.trajectory == TRAJECTORY_CORRIDOR:
        per_segment = config.landmark_count // config.segment_count
        base, normals = _sample_on_walls(rng, _corridor_walls(config), per_segment, config.room_height,
                                         config.surface_jitter)
        descriptors = rng.integers(0, 256, size=(per_segment, DESCRIPTOR_BYTES), dtype=np.uint8)
        offsets = [np.array([config.segment_length * segment, 0.0, 0.0]) for segment in range(config.segment_count)]
        return (np.vstack([base + offset for offset in offsets]).reshape(-1, 3),
                np.vstack([normals] * config.segment_count).reshape(-1, 3),
                np.vstack([descriptors] * config.segment_count).reshape(-1, DESCRIPTOR_BYTES))
    positions, normals = _sample_on_walls(rng, _room_walls(config), config.landmark_count, config.room_height,
                                          config.surface_jitter)
    descriptors = rng.integers(0, 256, size=(config.landmark_count, DESCRIPTOR_BYTES), dtype=np.uint8)
    return positions, normals, descriptors


def _room_wall_hit(config: WorldConfig, azimuth: float) -> Tuple[np.ndarray, np.ndarray]:
    direction = np.array([np.cos(azimuth), np.sin(azimuth)])
    half_w, half_d = config.room_width / 2.0, config.room_depth / 2.0
    with np.errstate(divide='ignore'):
        to_x = half_w / abs(direction[0]) if direction[0] != 0.0 else np.inf
        to_y = half_d / abs(direction[1]) if direction[1] != 0.0 else np.inf
    if to_x <= to_y:
        normal = np.array([-np.sign(direction[0]), 0.0, 0.0])
        reach = to_x
    else:
        normal = np.array([0.0, -np.sign(direction[1]), 0.0])
        reach = to_y
    center = np.array([direction[0] * reach, direction[1] * reach, config.marker_height])
    return center, normal


def generate_markers(config: WorldConfig) -> Dict[int, Pose]:
    poses: Dict[int, Pose] = {}
    if config.trajectory == TRAJECTORY_CORRIDOR:
        total = config.segment_length * config.segment_count
        for marker_id in range(config.marker_count):
            x = -total / 2.0 + (marker_id + 0.5) * total / config.marker_count
            center = np.array([x, config.corridor_half_width, config.marker_height])
            poses[marker_id] = surface_pose(center, np.array([0.0, -1.0, 0.0]))
        return poses
    for marker_id in range(config.marker_count):
        azimuth = 2.0 * np.pi * (marker_id + 0.5) / config.marker_count
        center, normal = _room_wall_hit(config, azimuth)
        poses[marker_id] = surface_pose(center, normal)
    return poses


def flip_bits(rng: np.random.Generator, descriptors: np.ndarray, probability: float) -> np.ndarray:
    if probability <= 0.0 or descriptors.shape[0] == 0:
        return descriptors.copy()
    bits = np.unpackbits(descriptors, axis=1)
    flips = (rng.random(bits.shape) < probability).astype(np.uint8)
    return np.packbits(bits ^ flips, axis=1)


def keypoint_levels(distances: np.ndarray, offsets: np.ndarray, config: WorldConfig) -> np.ndarray:
    """Pyramid level grows as the landmark approaches, by one level per factor ``pyramid_eta``."""
    raw = offsets + np.log(config.level_reference_depth / distances) / np.log(config.pyramid_eta)
    return np.clip(np.round(raw), 0, config.pyramid_levels - 1).astype(np.int64)


class _Observer:
    def __init__(self, config: WorldConfig, rng: np.random.Generator, positions: np.ndarray, normals: np.ndarray,
                 descriptors: np.ndarray, level_offsets: np.ndarray, markers: Dict[int, Pose]):
        self.config = config
        self.rng = rng
        self.intr = config.intrinsics
        self.positions = positions
        self.normals = normals
        self.descriptors = descriptors
        self.level_offsets = level_offsets
        self.markers = markers
        self.cos_view = np.cos(np.radians(config.max_view_angle_deg))
        self.local_corners = canonical_corners(config.marker_side)

    def keypoints(self, pose: Pose) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        config = self.config
        if self.positions.shape[0] == 0:
            return np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros((0, DESCRIPTOR_BYTES), np.uint8), \
                np.zeros(0, dtype=np.int64)
        pixels, depth = project_points(pose, self.positions, self.intr)
        rays = pose.center - self.positions
        distance = np.linalg.norm(rays, axis=1)
        facing = np.einsum('ij,ij->i', rays, self.normals) >= self.cos_view * distance
        visible = (depth > MIN_DEPTH) & (distance <= config.max_range) & facing & self.intr.contains(pixels)
        if config.keypoint_dropout > 0.0:
            visible &= self.rng.random(visible.size) >= config.keypoint_dropout
        ids = np.flatnonzero(visible)
        ids = ids[self.rng.permutation(ids.size)]
        observed = pixels[ids].copy()
        if config.pixel_sigma > 0.0:
            observed += self.rng.normal(0.0, config.pixel_sigma, size=observed.shape)
        levels = keypoint_levels(distance[ids], self.level_offsets[ids], config)
        descriptors = flip_bits(self.rng, self.descriptors[ids], config.bit_flip_prob)
        return observed, levels, descriptors, ids.astype(np.int64)

    def markers_seen(self, pose: Pose) -> List[MarkerObs]:
        config = self.config
        detections = []
        for marker_id in sorted(self.markers):
            marker_pose = self.markers[marker_id]
            ray = pose.center - marker_pose.translation
            normal = marker_pose.R[:, 2]
            if float(ray @ normal) < self.cos_view * float(np.linalg.norm(ray)):
                continue
            corners, depth = project_points(pose, marker_pose.apply(self.local_corners), self.intr)
            if np.any(depth <= MIN_DEPTH) or not np.all(self.intr.contains(corners)):
                continue
            if np.min(np.linalg.norm(corners - np.roll(corners, 1, axis=0), axis=1)) < config.min_marker_px:
                continue
            if config.marker_dropout > 0.0 and self.rng.random() < config.marker_dropout:
                continue
            if config.corner_sigma > 0.0:
                corners = corners + self.rng.normal(0.0, config.corner_sigma, size=corners.shape)
            detections.append(MarkerObs(marker_id, corners))
        return detections


def generate(config: WorldConfig) -> ObservationSequence:
    """Deterministic observation sequence for ``config``."""
    config.ensure_valid()
    rng = np.random.default_rng(config.seed)
    positions, normals, descriptors = generate_landmarks(config, rng)
    level_offsets = rng.integers(0, config.max_level_offset + 1, size=positions.shape[0]).astype(np.float64)
    markers = generate_markers(config)
    observer = _Observer(config, rng, positions, normals, descriptors, level_offsets, markers)
    intr = config.intrinsics
    frames: List[Frame] = []
    landmark_ids: List[np.ndarray] = []
    poses = trajectory_poses(config)
    for index, pose in enumerate(poses):
        timestamp = index / config.fps
        if is_blank_frame(config, index):
            frames.append(Frame(index, timestamp, intr))
            landmark_ids.append(np.zeros(0, dtype=np.int64))
            continue
        pixels, levels, frame_descriptors, ids = observer.keypoints(pose)
        frames.append(Frame(index, timestamp, intr, pixels, levels, frame_descriptors, observer.markers_seen(pose)))
        landmark_ids.append(ids)
    sequence = ObservationSequence(config, frames, poses, positions, descriptors, landmark_ids, markers,
                                   {marker_id: config.marker_side for marker_id in markers})
    logger.info("Generated %s", sequence)
    return sequence


def build_reference_map(sequence: ObservationSequence, params: Optional[PipelineParams] = None,
                        keyframe_stride: int = 5, drifted: bool = False, min_observers: int = 2) -> WorldMap:
    """Map built straight from ground truth, every ``keyframe_stride``-th frame a keyframe.

    With ``drifted`` each keyframe carries its share of the configured drift; points and markers follow the
    first keyframe that observes them.
    """
    params = params or PipelineParams()
    world = WorldMap(params.pyramid, params.tau_d, params.slot_block_capacity)
    corrections = sequence.drift_corrections() if drifted else [SimTransform.identity()] * len(sequence)
    keyframe_corrections: Dict[int, SimTransform] = {}
    observations: Dict[int, Dict[int, int]] = {}
    for index in range(0, len(sequence), keyframe_stride):
        frame = sequence.frames[index]
        if frame.is_blank:
            continue
        keyframe = world.add_keyframe(frame, corrections[index].correct_pose(sequence.ground_truth[index]))
        keyframe_corrections[keyframe.id] = corrections[index]
        for keypoint_index, landmark_id in enumerate(sequence.keypoint_landmarks[index]):
            observations.setdefault(int(landmark_id), {})[keyframe.id] = keypoint_index
        for obs in frame.marker_detections:
            marker = world.add_marker(obs.marker_id, sequence.marker_sides.get(obs.marker_id, params.marker_side))
            if marker.pose is None:
                marker.pose = corrections[index].correct_marker(sequence.marker_poses[obs.marker_id])
            world.add_marker_observation(obs.marker_id, keyframe.id, obs)
    for landmark_id in sorted(observations):
        observers = observations[landmark_id]
        if len(observers) < min_observers:
            continue
        first = min(observers, key=lambda keyframe_id: world.keyframe(keyframe_id).sequence)
        position = keyframe_corrections[first].apply(sequence.landmark_positions[landmark_id])
        ordered = {first: observers[first]}
        ordered.update({k: v for k, v in sorted(observers.items()) if k != first})
        world.add_point(position, ordered, PointStability.STABLE)
    logger.info("Reference map built: %s", world.statistics())
    return world
