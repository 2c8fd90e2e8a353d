import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.spatial import cKDTree

from markerslam.geometry import Pose, project_camera_points
from markerslam.mapping.database import mutual_matches
from markerslam.mapping.graph import MARKER_EDGE_WEIGHT, POINT_EDGE_WEIGHT
from markerslam.mapping.world import WorldMap
from markerslam.models import Frame
from markerslam.optimization.tracking import TrackingProblem
from markerslam.pipeline.state import PipelineParams, PipelineState

logger = logging.getLogger(__name__)

_NO_MATCH = np.iinfo(np.int64).max

_POPCOUNT = np.array([bin(value).count('1') for value in range(256)], dtype=np.int64)


def pair_distances(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Row-wise Hamming distance between two equally long descriptor stacks."""
    if first.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return _POPCOUNT[np.bitwise_xor(first, second)].sum(axis=1)


@dataclass
class ProjectionMatches:
    point_ids: np.ndarray
    keypoint_indices: np.ndarray
    distances: np.ndarray
    visible_ids: np.ndarray


def _visible_candidates(world: WorldMap, point_ids: Sequence[int], pose: Pose, target, params: PipelineParams):
    """Filters candidates by viewing angle, scale region and in-image projection."""
    if not point_ids:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    points = [world.point(point_id) for point_id in point_ids]
    positions = np.array([point.position for point in points])
    view_dirs = np.array([point.view_dir for point in points])
    min_distance = np.array([point.min_distance for point in points])
    max_distance = np.array([point.max_distance for point in points])
    rays = positions - pose.center
    distance = np.linalg.norm(rays, axis=1)
    with np.errstate(invalid='ignore', divide='ignore'):
        cosine = np.einsum('ij,ij->i', rays, view_dirs) / distance
    eta = world.pyramid.eta
    keep = cosine >= np.cos(np.radians(params.view_angle_max_deg))
    keep &= (distance >= min_distance / eta) & (distance <= max_distance * eta)
    camera = pose.apply(positions)
    keep &= camera[:, 2] > 1e-6
    ids = np.asarray(point_ids, dtype=np.int64)[keep]
    if ids.size == 0:
        return ids, np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    intr = target.intrinsics
    pixels, _ = project_camera_points(camera[keep], np.array([intr.fx, intr.fy, intr.cx, intr.cy]), intr.dist_array)
    inside = intr.contains(pixels)
    ratio = np.clip(max_distance[keep][inside] / np.maximum(distance[keep][inside], 1e-12), 1.0, None)
    predicted_level = np.clip(np.ceil(np.log(ratio) / np.log(eta)).astype(np.int64), 0, world.pyramid.levels - 1)
    return ids[inside], pixels[inside], predicted_level


def search_by_projection(world: WorldMap, target, pose: Pose, point_ids: Sequence[int], params: PipelineParams,
                         radius_factor: float = 1.0, exclude_keypoints: Optional[Set[int]] = None) -> ProjectionMatches:
    """Matches map points to the keypoints of ``target`` (a Frame or KeyFrame) around their projections."""
    visible_ids, predicted, predicted_level = _visible_candidates(world, point_ids, pose, target, params)
    empty = np.zeros(0, dtype=np.int64)
    if visible_ids.size == 0 or target.pixels.shape[0] == 0:
        return ProjectionMatches(empty, empty, empty, visible_ids)
    eta = world.pyramid.eta
    base_radius = params.search_radius_px * radius_factor
    tree = cKDTree(target.pixels)
    neighbourhoods = tree.query_ball_point(predicted, base_radius * eta ** (world.pyramid.levels - 1))
    candidate_rows, candidate_keypoints = [], []
    for row, keypoints in enumerate(neighbourhoods):
        for keypoint in keypoints:
            candidate_rows.append(row)
            candidate_keypoints.append(keypoint)
    if not candidate_rows:
        return ProjectionMatches(empty, empty, empty, visible_ids)
    rows = np.array(candidate_rows, dtype=np.int64)
    keypoints = np.array(candidate_keypoints, dtype=np.int64)
    offsets = np.linalg.norm(target.pixels[keypoints] - predicted[rows], axis=1)
    level = target.levels[keypoints]
    keep = offsets <= base_radius * np.power(eta, level)
    keep &= np.abs(level - predicted_level[rows]) <= 1
    if exclude_keypoints:
        keep &= ~np.isin(keypoints, np.fromiter(exclude_keypoints, dtype=np.int64))
    rows, keypoints = rows[keep], keypoints[keep]
    if rows.size == 0:
        return ProjectionMatches(empty, empty, empty, visible_ids)
    descriptors = np.array([world.point(int(visible_ids[row])).rep_descriptor for row in range(visible_ids.size)])
    distances = pair_distances(descriptors[rows], target.descriptors[keypoints])
    best_rows, best_keypoints, best_distances = _accept_best(rows, keypoints, distances, params)
    point_ids_matched, keypoints_matched, distances_matched = _deduplicate(
        visible_ids[best_rows], best_keypoints, best_distances)
    return ProjectionMatches(point_ids_matched, keypoints_matched, distances_matched, visible_ids)


def _accept_best(rows: np.ndarray, keypoints: np.ndarray, distances: np.ndarray,
                 params: PipelineParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Best two per map point, then nearest < tau_d and the distinctiveness ratio."""
    order = np.lexsort((keypoints, distances, rows))
    rows, keypoints, distances = rows[order], keypoints[order], distances[order]
    starts = np.flatnonzero(np.r_[True, rows[1:] != rows[:-1]])
    ends = np.r_[starts[1:], rows.size]
    best = distances[starts]
    has_second = ends - starts > 1
    second = np.where(has_second, distances[np.minimum(starts + 1, rows.size - 1)], _NO_MATCH)
    accept = best < params.tau_d
    accept &= ~has_second | (best < params.ratio_test * second)
    return rows[starts[accept]], keypoints[starts[accept]], best[accept]


def _deduplicate(point_ids: np.ndarray, keypoints: np.ndarray,
                 distances: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One map point per keypoint, the smallest descriptor distance wins (lowest point id on ties)."""
    if point_ids.size == 0:
        return point_ids, keypoints, distances
    order = np.lexsort((point_ids, distances, keypoints))
    point_ids, keypoints, distances = point_ids[order], keypoints[order], distances[order]
    first = np.r_[True, keypoints[1:] != keypoints[:-1]]
    point_ids, keypoints, distances = point_ids[first], keypoints[first], distances[first]
    order = np.argsort(point_ids, kind='stable')
    return point_ids[order], keypoints[order], distances[order]


def candidate_points(world: WorldMap, state: PipelineState, reference: Optional[int]) -> List[int]:
    collected: Set[int] = set(pid for pid in state.last_matched_points if pid in world.points)
    if reference is not None and reference in world.keyframes:
        collected.update(world.points_of_keyframes(world.local_window(reference)))
    return sorted(collected)


def marker_window(world: WorldMap, reference: Optional[int]) -> Set[int]:
    if reference is None or reference not in world.keyframes:
        return set()
    return {marker_id for keyframe_id in world.local_window(reference)
            for marker_id in world.registry.keyframe_markers(keyframe_id)}


@dataclass
class Correspondences:
    problem: TrackingProblem
    visible_ids: np.ndarray


def find_correspondences(frame: Frame, world: WorldMap, state: PipelineState, pose_guess: Optional[Pose] = None,
                         radius_factor: float = 1.0, update_counters: bool = True) -> Correspondences:
    """Builds the tracking problem for ``frame`` from the reference keyframe's neighbourhood."""
    params = state.params
    guess = pose_guess or state.predicted_pose() or Pose.identity()
    reference = state.reference_keyframe
    problem = TrackingProblem(frame.intrinsics, guess, world.pyramid, huber_alpha=params.huber_alpha,
                              tau_m=params.tau_m)
    visible = np.zeros(0, dtype=np.int64)
    if params.use_keypoints and frame.keypoint_count:
        matches = search_by_projection(world, frame, guess, candidate_points(world, state, reference), params,
                                       radius_factor)
        visible = matches.visible_ids
        if matches.point_ids.size:
            problem.point_positions = np.array([world.point(int(p)).position for p in matches.point_ids])
            problem.point_pixels = frame.pixels[matches.keypoint_indices]
            problem.point_levels = frame.levels[matches.keypoint_indices]
            problem.point_ids = matches.point_ids.copy()
            problem.keypoint_indices = matches.keypoint_indices.copy()
        if update_counters:
            for point_id in visible:
                world.point(int(point_id)).visible_count += 1
    if params.use_markers:
        allowed = marker_window(world, reference) if params.marker_gating else None
        for obs in sorted(frame.marker_detections, key=lambda detection: detection.marker_id):
            marker = world.marker(obs.marker_id)
            if marker is None or not marker.is_valid:
                continue
            if allowed is not None and obs.marker_id not in allowed:
                continue
            problem.add_marker(marker, obs)
    logger.debug("Frame %d: %d point matches, %d markers", frame.index, problem.point_count, problem.marker_count)
    return Correspondences(problem, visible)


def match_keyframe_to_points(keyframe_descriptors: np.ndarray, world: WorldMap, point_ids: Sequence[int],
                             params: PipelineParams) -> Tuple[np.ndarray, np.ndarray]:
    """Appearance-only 2D-3D association (keypoint index, point id) by mutual nearest neighbours."""
    if not point_ids or keyframe_descriptors.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    descriptors = np.array([world.point(point_id).rep_descriptor for point_id in point_ids])
    matches = mutual_matches(keyframe_descriptors, descriptors, params.tau_d)
    keypoints = np.array([m[0] for m in matches], dtype=np.int64)
    points = np.array([point_ids[m[1]] for m in matches], dtype=np.int64)
    return keypoints, points


def reference_from_matches(world: WorldMap, point_ids: Iterable[int], fallback: Optional[int],
                           marker_ids: Iterable[int] = ()) -> Optional[int]:
    """Keyframe sharing the most matches, markers counted with their graph weight (lowest sequence on ties)."""
    votes: Dict[int, int] = {}
    for point_id in point_ids:
        if point_id not in world.points:
            continue
        for keyframe_id in world.point_observers(int(point_id)):
            votes[keyframe_id] = votes.get(keyframe_id, 0) + POINT_EDGE_WEIGHT
    for marker_id in marker_ids:
        for keyframe_id in world.marker_observers(int(marker_id)):
            votes[keyframe_id] = votes.get(keyframe_id, 0) + MARKER_EDGE_WEIGHT
    if not votes:
        return fallback if fallback is not None and fallback in world.keyframes else None
    return max(votes, key=lambda k: (votes[k], -world.keyframe(k).sequence))
