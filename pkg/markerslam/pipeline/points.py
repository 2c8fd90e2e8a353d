import logging
from typing import List, Tuple

import numpy as np

from markerslam.geometry import CameraIntrinsics, Pose, PyramidConfig, info_scalars, project_camera_points, skew, \
    triangulate_points, undistort_pixels
from markerslam.mapping.descriptors import hamming_matrix
from markerslam.mapping.world import WorldMap
from markerslam.models import KeyFrame, PointStability
from markerslam.pipeline.state import PipelineParams

logger = logging.getLogger(__name__)

MIN_PARALLAX_DEG: float = 1.0
MIN_VISIBILITY_SAMPLES: int = 3
MAX_TRIANGULATION_NEIGHBORS: int = 10

PROVISIONAL_MIN_RATIO: float = 2.0 / 3.0
STABLE_MIN_RATIO: float = 1.0 / 3.0

_BLOCKED = np.iinfo(np.int64).max // 2


def _reprojection_chi2(pose: Pose, positions: np.ndarray, pixels: np.ndarray, levels: np.ndarray,
                       intr: CameraIntrinsics, pyramid: PyramidConfig) -> np.ndarray:
    camera = pose.apply(positions)
    chi2 = np.full(positions.shape[0], np.inf)
    in_front = camera[:, 2] > 1e-9
    if np.any(in_front):
        projected, _ = project_camera_points(camera[in_front], np.array([intr.fx, intr.fy, intr.cx, intr.cy]),
                                             intr.dist_array)
        squared = np.sum((projected - pixels[in_front]) ** 2, axis=1)
        chi2[in_front] = info_scalars(levels[in_front], pyramid) * squared
    return chi2


def triangulate_checked(first: KeyFrame, second: KeyFrame, first_indices: np.ndarray, second_indices: np.ndarray,
                        pyramid: PyramidConfig, chi2_threshold: float,
                        min_parallax_deg: float = MIN_PARALLAX_DEG) -> Tuple[np.ndarray, np.ndarray]:
    """Triangulates keypoint pairs; the mask keeps points in front of both views with enough parallax
    and a small reprojection error in each."""
    if first_indices.size == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    normalized_first = undistort_pixels(first.pixels[first_indices], first.intrinsics)
    normalized_second = undistort_pixels(second.pixels[second_indices], second.intrinsics)
    positions = triangulate_points(first.pose, second.pose, normalized_first, normalized_second)
    good = np.all(np.isfinite(positions), axis=1)
    positions = np.where(good[:, None], positions, 0.0)
    rays_first = positions - first.pose.center
    rays_second = positions - second.pose.center
    norms = np.linalg.norm(rays_first, axis=1) * np.linalg.norm(rays_second, axis=1)
    with np.errstate(invalid='ignore', divide='ignore'):
        cosine = np.einsum('ij,ij->i', rays_first, rays_second) / norms
    good &= norms > 0.0
    good &= cosine < np.cos(np.radians(min_parallax_deg))
    good &= first.pose.apply(positions)[:, 2] > 0.0
    good &= second.pose.apply(positions)[:, 2] > 0.0
    good &= _reprojection_chi2(first.pose, positions, first.pixels[first_indices], first.levels[first_indices],
                               first.intrinsics, pyramid) <= chi2_threshold
    good &= _reprojection_chi2(second.pose, positions, second.pixels[second_indices], second.levels[second_indices],
                               second.intrinsics, pyramid) <= chi2_threshold
    return positions, good


def epipolar_matches(first: KeyFrame, second: KeyFrame, first_free: np.ndarray, second_free: np.ndarray,
                     params: PipelineParams, pyramid: PyramidConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Descriptor matches between free keypoints that lie near their epipolar lines."""
    empty = np.zeros(0, dtype=np.int64)
    if first_free.size == 0 or second_free.size == 0:
        return empty, empty
    relative = second.pose.compose(first.pose.inverse())
    essential = skew(relative.translation) @ relative.R
    first_h = np.column_stack([undistort_pixels(first.pixels[first_free], first.intrinsics), np.ones(first_free.size)])
    second_h = np.column_stack([undistort_pixels(second.pixels[second_free], second.intrinsics),
                                np.ones(second_free.size)])
    lines = first_h @ essential.T
    line_norm = np.linalg.norm(lines[:, :2], axis=1)
    with np.errstate(invalid='ignore', divide='ignore'):
        line_distance = np.abs(lines @ second_h.T) / line_norm[:, None] * second.intrinsics.fx
    threshold = params.epipolar_px * np.power(pyramid.eta, second.levels[second_free].astype(np.float64))
    distances = hamming_matrix(first.descriptors[first_free], second.descriptors[second_free])
    distances = np.where(line_distance <= threshold[None, :], distances, _BLOCKED)
    best = np.argmin(distances, axis=1)
    rows = np.arange(first_free.size)
    best_distance = distances[rows, best]
    if second_free.size > 1:
        second_best = np.partition(distances, 1, axis=1)[:, 1]
    else:
        second_best = np.full(first_free.size, _BLOCKED)
    accept = best_distance < params.tau_d
    accept &= (second_best >= _BLOCKED) | (best_distance < params.ratio_test * second_best)
    accept &= np.argmin(distances, axis=0)[best] == rows
    return first_free[rows[accept]], second_free[best[accept]]


def _free_keypoints(world: WorldMap, keyframe: KeyFrame) -> np.ndarray:
    bound = world.registry.keyframe_points(keyframe.id)
    mask = np.ones(keyframe.keypoint_count, dtype=bool)
    if bound:
        mask[np.fromiter(bound.keys(), dtype=np.int64)] = False
    return np.flatnonzero(mask)


def create_map_points(world: WorldMap, keyframe_id: int, params: PipelineParams) -> List[int]:
    """Triangulates unmatched keypoints of a new keyframe against its graph neighbours."""
    keyframe = world.keyframe(keyframe_id)
    if keyframe.keypoint_count == 0:
        return []
    created: List[int] = []
    for neighbor_id in world.neighbors(keyframe_id)[:MAX_TRIANGULATION_NEIGHBORS]:
        neighbor = world.keyframe(neighbor_id)
        if neighbor.keypoint_count == 0 or np.linalg.norm(keyframe.pose.center - neighbor.pose.center) < 1e-9:
            continue
        first, second = epipolar_matches(keyframe, neighbor, _free_keypoints(world, keyframe),
                                         _free_keypoints(world, neighbor), params, world.pyramid)
        positions, good = triangulate_checked(keyframe, neighbor, first, second, world.pyramid, params.outlier_chi2)
        for position, first_index, second_index in zip(positions[good], first[good], second[good]):
            point = world.add_point(position, {keyframe_id: int(first_index), neighbor_id: int(second_index)})
            created.append(point.id)
    if created:
        logger.debug("Keyframe %d: %d new map points", keyframe_id, len(created))
    return created


def apply_survival_policy(world: WorldMap) -> List[int]:
    """Erases points matched too rarely where they were predicted visible; promotes survivors."""
    erased: List[int] = []
    for point in list(world.points.values()):
        if point.stability is PointStability.PROVISIONAL:
            if world.next_sequence - point.created_sequence >= 2:
                point.stability = PointStability.STABLE
            elif point.visible_count >= MIN_VISIBILITY_SAMPLES and point.found_ratio < PROVISIONAL_MIN_RATIO:
                world.erase_point(point.id)
                erased.append(point.id)
                continue
        if (point.stability is PointStability.STABLE and point.visible_count >= MIN_VISIBILITY_SAMPLES
                and point.found_ratio < STABLE_MIN_RATIO):
            world.erase_point(point.id)
            erased.append(point.id)
    if erased:
        logger.debug("Survival policy erased %d points", len(erased))
    return erased


def erase_orphan_points(world: WorldMap, point_ids) -> List[int]:
    erased = []
    for point_id in sorted(point_ids):
        if point_id in world.points and world.registry.observer_count(point_id) < 2:
            world.erase_point(point_id)
            erased.append(point_id)
    return erased
