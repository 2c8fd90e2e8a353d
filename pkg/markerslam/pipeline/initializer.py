"""Map initialization from two frames, marker based (metric) or keypoint based (up to scale)."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import cv2
import numpy as np

from markerslam.errors import InitFailed, SolverError
from markerslam.geometry import Pose, undistort_pixels
from markerslam.mapping.descriptors import hamming_matrix
from markerslam.mapping.world import WorldMap
from markerslam.markers import initialize_from_markers
from markerslam.models import Frame, KeyFrame
from markerslam.optimization.bundle import GLOBAL, bundle_adjust, remove_outlier_observations
from markerslam.pipeline.points import MIN_PARALLAX_DEG, triangulate_checked
from markerslam.pipeline.state import PipelineParams

logger = logging.getLogger(__name__)

MIN_INIT_MATCHES: int = 50
MIN_INIT_POINTS: int = 30
HOMOGRAPHY_SELECTION_RATIO: float = 0.45
HOMOGRAPHY_THRESHOLD_PX: float = 2.0
ESSENTIAL_THRESHOLD_PX: float = 1.0

METHOD_MARKERS = 'markers'
METHOD_KEYPOINTS = 'keypoints'


@dataclass
class MapSeed:
    method: str
    relative_pose: Pose
    marker_poses: Dict[int, Pose] = field(default_factory=dict)
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    first_keypoints: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    second_keypoints: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def point_count(self) -> int:
        return int(self.positions.shape[0])


def match_frames(first: Frame, second: Frame, params: PipelineParams) -> Tuple[np.ndarray, np.ndarray]:
    """Mutual nearest descriptor matches passing the distinctiveness ratio and tau_d."""
    empty = np.zeros(0, dtype=np.int64)
    if first.keypoint_count == 0 or second.keypoint_count == 0:
        return empty, empty
    distances = hamming_matrix(first.descriptors, second.descriptors)
    best = np.argmin(distances, axis=1)
    rows = np.arange(first.keypoint_count)
    best_distance = distances[rows, best]
    if second.keypoint_count > 1:
        second_best = np.partition(distances, 1, axis=1)[:, 1]
        distinct = best_distance < params.ratio_test * second_best
    else:
        distinct = np.ones(first.keypoint_count, dtype=bool)
    accept = (best_distance < params.tau_d) & distinct & (np.argmin(distances, axis=0)[best] == rows)
    return rows[accept], best[accept]


def _provisional_keyframe(frame: Frame, pose: Pose) -> KeyFrame:
    return KeyFrame.from_frame(frame, pose)


def _triangulate(f0: Frame, fi: Frame, relative: Pose, first: np.ndarray, second: np.ndarray,
                 params: PipelineParams, min_parallax_deg: float):
    positions, good = triangulate_checked(_provisional_keyframe(f0, Pose.identity()),
                                          _provisional_keyframe(fi, relative), first, second, params.pyramid,
                                          params.outlier_chi2, min_parallax_deg)
    return positions[good], first[good], second[good]


def _ideal_pixels(frame: Frame, indices: np.ndarray) -> np.ndarray:
    normalized = undistort_pixels(frame.pixels[indices], frame.intrinsics)
    intr = frame.intrinsics
    return np.column_stack([normalized[:, 0] * intr.fx + intr.cx, normalized[:, 1] * intr.fy + intr.cy])


def _motion_hypotheses(f0: Frame, fi: Frame, first: np.ndarray,
                       second: np.ndarray) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], np.ndarray, str]:
    """Candidate (R, t) pairs from whichever of homography and essential matrix explains the matches better."""
    p0 = _ideal_pixels(f0, first)
    p1 = _ideal_pixels(fi, second)
    camera = f0.intrinsics.K
    homography, homography_mask = cv2.findHomography(p0, p1, cv2.RANSAC, HOMOGRAPHY_THRESHOLD_PX)
    essential, essential_mask = cv2.findEssentialMat(p0, p1, camera, method=cv2.RANSAC, prob=0.999,
                                                     threshold=ESSENTIAL_THRESHOLD_PX)
    homography_inliers = 0 if homography_mask is None else int(homography_mask.sum())
    essential_inliers = 0 if essential_mask is None or essential is None else int(essential_mask.sum())
    if homography_inliers + essential_inliers == 0:
        raise InitFailed("Neither homography nor essential matrix fits the matches")
    ratio = homography_inliers / (homography_inliers + essential_inliers)
    logger.debug("Keypoint initialization: %d homography vs %d essential inliers (R_H=%.2f)",
                 homography_inliers, essential_inliers, ratio)
    if ratio > HOMOGRAPHY_SELECTION_RATIO and homography is not None:
        _, rotations, translations, _ = cv2.decomposeHomographyMat(homography, camera)
        hypotheses = [(np.asarray(r), np.asarray(t).reshape(3)) for r, t in zip(rotations, translations)]
        return hypotheses, homography_mask.ravel().astype(bool), 'homography'
    essential = essential[:3]
    _, rotation, translation, _ = cv2.recoverPose(essential, p0, p1, camera, mask=essential_mask.copy())
    return [(rotation, translation.reshape(3))], essential_mask.ravel().astype(bool), 'essential'


def initialize_from_keypoints(f0: Frame, fi: Frame, params: PipelineParams) -> MapSeed:
    """Scale-free seed; the map is scaled so the median depth in ``f0`` equals one."""
    first, second = match_frames(f0, fi, params)
    if first.size < MIN_INIT_MATCHES:
        raise InitFailed(f"Only {first.size} keypoint matches between frames {f0.index} and {fi.index}")
    hypotheses, inliers, model = _motion_hypotheses(f0, fi, first, second)
    best = None
    for rotation, translation in hypotheses:
        norm = float(np.linalg.norm(translation))
        if norm <= 1e-12:
            continue
        relative = Pose.from_matrix(rotation, translation / norm)
        positions, kept_first, kept_second = _triangulate(f0, fi, relative, first[inliers], second[inliers], params,
                                                          MIN_PARALLAX_DEG)
        if best is None or positions.shape[0] > best[1].shape[0]:
            best = (relative, positions, kept_first, kept_second)
    if best is None or best[1].shape[0] < MIN_INIT_POINTS:
        found = 0 if best is None else best[1].shape[0]
        raise InitFailed(f"{model} hypothesis triangulated {found} points, need {MIN_INIT_POINTS}")
    relative, positions, kept_first, kept_second = best
    scale = 1.0 / float(np.median(positions[:, 2]))
    relative = Pose(relative.rotation, relative.translation * scale)
    return MapSeed(METHOD_KEYPOINTS, relative, {}, positions * scale, kept_first, kept_second)


def initialize_with_markers(f0: Frame, fi: Frame, params: PipelineParams, marker_sides: Dict[int, float]) -> MapSeed:
    solved = initialize_from_markers(f0, fi, marker_sides, params.marker_side, params.ambiguity_ratio,
                                     params.min_baseline_deg)
    seed = MapSeed(METHOD_MARKERS, solved.relative_pose, dict(solved.marker_poses))
    if params.use_keypoints:
        first, second = match_frames(f0, fi, params)
        seed.positions, seed.first_keypoints, seed.second_keypoints = _triangulate(
            f0, fi, solved.relative_pose, first, second, params, MIN_PARALLAX_DEG)
    return seed


def initialize(f0: Frame, fi: Frame, params: PipelineParams, marker_sides: Optional[Dict[int, float]] = None) -> MapSeed:
    """Runs both initializers; a marker-based success always takes priority."""
    reasons = []
    if params.use_markers:
        try:
            return initialize_with_markers(f0, fi, params, marker_sides or {})
        except SolverError as error:
            reasons.append(f"markers: {error.message}")
    if params.use_keypoints:
        try:
            return initialize_from_keypoints(f0, fi, params)
        except (SolverError, cv2.error) as error:
            reasons.append(f"keypoints: {getattr(error, 'message', error)}")
    raise InitFailed("; ".join(reasons) or "No observation type enabled")


def build_seed_map(seed: MapSeed, f0: Frame, fi: Frame, params: PipelineParams,
                   marker_sides: Optional[Dict[int, float]] = None) -> WorldMap:
    """Two-keyframe map from a seed, refined by a global bundle adjustment."""
    marker_sides = marker_sides or {}
    world = WorldMap(params.pyramid, params.tau_d, params.slot_block_capacity)
    first = world.add_keyframe(f0, Pose.identity())
    second = world.add_keyframe(fi, seed.relative_pose)
    for position, a, b in zip(seed.positions, seed.first_keypoints, seed.second_keypoints):
        world.add_point(position, {first.id: int(a), second.id: int(b)})
    if params.use_markers:
        for keyframe, frame in ((first, f0), (second, fi)):
            for obs in sorted(frame.marker_detections, key=lambda detection: detection.marker_id):
                marker = world.add_marker(obs.marker_id, marker_sides.get(obs.marker_id, params.marker_side))
                if marker.pose is None and obs.marker_id in seed.marker_poses:
                    marker.pose = seed.marker_poses[obs.marker_id]
                world.add_marker_observation(obs.marker_id, keyframe.id, obs)
    try:
        bundle_adjust(world, GLOBAL, max_iters=params.max_iters_global, initial_damping=params.lm_lambda,
                      use_points=params.use_keypoints, use_markers=params.use_markers)
        remove_outlier_observations(world, world.points.ids(), params.outlier_chi2)
    except SolverError as error:
        logger.warning("Seed map bundle adjustment skipped: %s", error.message)
    logger.info("Map initialized from %s: frames %d and %d, %d points, %d valid markers", seed.method,
                f0.index, fi.index, len(world.points), len(world.valid_markers()))
    return world
