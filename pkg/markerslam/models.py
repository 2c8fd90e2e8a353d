from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, List, Optional, Tuple

import numpy as np

from markerslam.errors import NonPositiveSide
from markerslam.geometry import CameraIntrinsics, Pose

DESCRIPTOR_BYTES: int = 32


class PointStability(Enum):
    PROVISIONAL = 'provisional'
    STABLE = 'stable'


class TrackingStatus(Enum):
    TRACKED = 'tracked'
    LOST = 'lost'


class PipelineMode(Enum):
    UNINITIALIZED = 'uninitialized'
    TRACKING = 'tracking'
    LOST = 'lost'


class InsertionRule(IntEnum):
    NEW_MARKER = 1
    MARKER_SOLVABLE = 2
    MARKER_BASELINE = 3
    LOW_MATCHES = 4


def canonical_corners(side: float) -> np.ndarray:
    if not side > 0.0:
        raise NonPositiveSide(f"Marker side must be positive, got {side}")
    half = side / 2.0
    return np.array([[half, -half, 0.0], [half, half, 0.0], [-half, half, 0.0], [-half, -half, 0.0]])


@dataclass(frozen=True, eq=False)
class KeyPointObs:
    level: int
    pixel: np.ndarray
    descriptor: np.ndarray

    def __repr__(self) -> str:
        return f'<KeyPointObs level={self.level} pixel={np.round(self.pixel, 3).tolist()}>'


@dataclass(frozen=True, eq=False)
class MarkerObs:
    marker_id: int
    corners_px: np.ndarray

    def __post_init__(self):
        corners = np.array(self.corners_px, dtype=np.float64).reshape(-1, 2)
        if corners.shape != (4, 2):
            raise ValueError("A marker observation carries exactly four corners")
        object.__setattr__(self, 'marker_id', int(self.marker_id))
        object.__setattr__(self, 'corners_px', corners)

    @property
    def center_px(self) -> np.ndarray:
        return self.corners_px.mean(axis=0)

    def __repr__(self) -> str:
        return f'<MarkerObs {self.marker_id}>'


def _empty_pixels() -> np.ndarray:
    return np.zeros((0, 2))


def _empty_levels() -> np.ndarray:
    return np.zeros(0, dtype=np.int64)


def _empty_descriptors() -> np.ndarray:
    return np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)


@dataclass(eq=False)
class Frame:
    """One capture: keypoints stored column-wise, markers as detections."""
    index: int
    timestamp: float
    intrinsics: CameraIntrinsics
    pixels: np.ndarray = field(default_factory=_empty_pixels)
    levels: np.ndarray = field(default_factory=_empty_levels)
    descriptors: np.ndarray = field(default_factory=_empty_descriptors)
    marker_detections: List[MarkerObs] = field(default_factory=list)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.levels = np.asarray(self.levels, dtype=np.int64).reshape(-1)
        descriptors = np.asarray(self.descriptors, dtype=np.uint8)
        if descriptors.size == 0:
            descriptors = _empty_descriptors()
        self.descriptors = descriptors.reshape(descriptors.shape[0], -1) if descriptors.ndim > 1 \
            else descriptors.reshape(self.pixels.shape[0], -1)
        if not (self.pixels.shape[0] == self.levels.shape[0] == self.descriptors.shape[0]):
            raise ValueError("Keypoint columns differ in length")

    @classmethod
    def from_keypoints(cls, index: int, timestamp: float, intrinsics: CameraIntrinsics,
                       keypoints: List[KeyPointObs], marker_detections: Optional[List[MarkerObs]] = None) -> 'Frame':
        if keypoints:
            pixels = np.array([kp.pixel for kp in keypoints], dtype=np.float64)
            levels = np.array([kp.level for kp in keypoints], dtype=np.int64)
            descriptors = np.array([kp.descriptor for kp in keypoints], dtype=np.uint8)
        else:
            pixels, levels, descriptors = _empty_pixels(), _empty_levels(), _empty_descriptors()
        return cls(index, timestamp, intrinsics, pixels, levels, descriptors, list(marker_detections or []))

    @property
    def keypoint_count(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def keypoints(self) -> List[KeyPointObs]:
        return [self.keypoint(i) for i in range(self.keypoint_count)]

    def keypoint(self, index: int) -> KeyPointObs:
        return KeyPointObs(int(self.levels[index]), self.pixels[index], self.descriptors[index])

    @property
    def markers_by_id(self) -> Dict[int, MarkerObs]:
        return {obs.marker_id: obs for obs in self.marker_detections}

    @property
    def is_blank(self) -> bool:
        return self.keypoint_count == 0 and not self.marker_detections

    def __repr__(self) -> str:
        return f'<Frame {self.index} t={self.timestamp:.3f} kps={self.keypoint_count} markers={len(self.marker_detections)}>'


@dataclass(eq=False)
class KeyFrame:
    id: int
    sequence: int
    frame_index: int
    timestamp: float
    pose: Pose
    intrinsics: CameraIntrinsics
    pixels: np.ndarray
    levels: np.ndarray
    descriptors: np.ndarray
    markers: Dict[int, MarkerObs] = field(default_factory=dict)

    @classmethod
    def from_frame(cls, frame: Frame, pose: Pose, keyframe_id: int = -1, sequence: int = -1) -> 'KeyFrame':
        return cls(keyframe_id, sequence, frame.index, frame.timestamp, pose, frame.intrinsics,
                   frame.pixels.copy(), frame.levels.copy(), frame.descriptors.copy(),
                   {obs.marker_id: obs for obs in frame.marker_detections})

    @property
    def keypoint_count(self) -> int:
        return int(self.pixels.shape[0])

    def __repr__(self) -> str:
        return f'<KeyFrame {self.id} seq={self.sequence} frame={self.frame_index}>'


@dataclass(eq=False)
class MapPoint:
    id: int
    position: np.ndarray
    view_dir: np.ndarray
    rep_descriptor: np.ndarray
    ref_keyframe: int
    created_sequence: int
    stability: PointStability = PointStability.PROVISIONAL
    visible_count: int = 0
    found_count: int = 0
    min_distance: float = 0.0
    max_distance: float = float('inf')

    @property
    def found_ratio(self) -> float:
        if self.visible_count == 0:
            return 1.0
        return self.found_count / self.visible_count

    def __repr__(self) -> str:
        return f'<MapPoint {self.id} {self.stability.value}>'


@dataclass(eq=False)
class Marker:
    id: int
    side: float
    pose: Optional[Pose] = None

    def __post_init__(self):
        if not self.side > 0.0:
            raise NonPositiveSide(f"Marker side must be positive, got {self.side}")

    @property
    def corners_local(self) -> np.ndarray:
        return canonical_corners(self.side)

    @property
    def is_valid(self) -> bool:
        return self.pose is not None

    def world_corners(self) -> np.ndarray:
        if self.pose is None:
            raise ValueError(f"Marker {self.id} has no valid pose")
        return self.pose.apply(self.corners_local)

    def __repr__(self) -> str:
        state = 'valid' if self.is_valid else 'invalid'
        return f'<Marker {self.id} side={self.side} {state}>'


@dataclass(frozen=True, eq=False)
class PoseSolution:
    pose: Pose
    error: float


@dataclass(frozen=True, eq=False)
class AmbiguousPose:
    sol1: PoseSolution
    sol2: PoseSolution
    ambiguous: bool

    @property
    def ratio(self) -> float:
        return self.sol2.error / max(self.sol1.error, 1e-12)

    @property
    def candidates(self) -> Tuple[PoseSolution, PoseSolution]:
        return self.sol1, self.sol2

