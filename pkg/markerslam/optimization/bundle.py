"""Sparse Levenberg-Marquardt bundle adjustment over keyframes, points and markers.

Keyframe and marker poses form the reduced ("camera") block, points are
eliminated through their 3x3 blocks (Schur complement). The objective is

    E = sum w_p * omega * |e_point|^2 + sum w_m * |e_corner|^2

with omega the pyramid information of the observing keypoint.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from markerslam.errors import DivergedSolve, SingularSystem
from markerslam.geometry import CameraIntrinsics, Pose, PyramidConfig, pose_increment_jacobian, project_camera_points
from markerslam.mapping.world import WorldMap
from markerslam.models import canonical_corners
from markerslam.optimization.weights import bundle_marker_weight

logger = logging.getLogger(__name__)

LOCAL = 'local'
GLOBAL = 'global'

_DIAGONAL_FLOOR: float = 1e-9


@dataclass
class BundleProblem:
    keyframe_ids: List[int]
    keyframe_poses: List[Pose]
    intrinsics: List[CameraIntrinsics]
    variable_keyframes: np.ndarray
    point_ids: List[int]
    point_positions: np.ndarray
    variable_points: np.ndarray
    marker_ids: List[int]
    marker_poses: List[Pose]
    marker_sides: np.ndarray
    variable_markers: np.ndarray
    obs_point: np.ndarray
    obs_point_keyframe: np.ndarray
    obs_point_pixels: np.ndarray
    obs_point_levels: np.ndarray
    obs_marker: np.ndarray
    obs_marker_keyframe: np.ndarray
    obs_marker_pixels: np.ndarray
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    point_weight: float = 1.0
    marker_weight: Optional[float] = None

    def __post_init__(self):
        if self.marker_weight is None:
            self.marker_weight = bundle_marker_weight(len(self.obs_point), len(self.obs_marker))

    @property
    def variable_count(self) -> int:
        return (6 * int(np.count_nonzero(self.variable_keyframes)) + 6 * int(np.count_nonzero(self.variable_markers))
                + 3 * int(np.count_nonzero(self.variable_points)))


@dataclass
class BundleState:
    keyframe_poses: List[Pose]
    marker_poses: List[Pose]
    point_positions: np.ndarray

    def copy(self) -> 'BundleState':
        return BundleState(list(self.keyframe_poses), list(self.marker_poses), self.point_positions.copy())


@dataclass
class BundleResult:
    initial_cost: float
    final_cost: float
    cost_history: List[float]
    accepted_steps: int
    iterations: int
    state: BundleState


def _block_coo(row_blocks: np.ndarray, col_blocks: np.ndarray, values: np.ndarray,
               shape: Tuple[int, int]) -> sp.coo_matrix:
    count, rows, cols = values.shape
    row_index = (row_blocks[:, None, None] * rows + np.arange(rows)[None, :, None]) * np.ones((1, 1, cols), dtype=np.int64)
    col_index = (col_blocks[:, None, None] * cols + np.arange(cols)[None, None, :]) * np.ones((1, rows, 1), dtype=np.int64)
    return sp.coo_matrix((values.reshape(-1), (row_index.reshape(-1), col_index.reshape(-1))), shape=shape)


class BundleAdjuster:
    def __init__(self, problem: BundleProblem):
        self.problem = problem
        keyframe_slots = np.full(len(problem.keyframe_ids), -1, dtype=np.int64)
        keyframe_slots[problem.variable_keyframes] = np.arange(int(np.count_nonzero(problem.variable_keyframes)))
        marker_slots = np.full(len(problem.marker_ids), -1, dtype=np.int64)
        offset = int(np.count_nonzero(problem.variable_keyframes))
        marker_slots[problem.variable_markers] = offset + np.arange(int(np.count_nonzero(problem.variable_markers)))
        point_slots = np.full(len(problem.point_ids), -1, dtype=np.int64)
        point_slots[problem.variable_points] = np.arange(int(np.count_nonzero(problem.variable_points)))
        self.keyframe_slots = keyframe_slots
        self.marker_slots = marker_slots
        self.point_slots = point_slots
        self.camera_blocks = offset + int(np.count_nonzero(problem.variable_markers))
        self.point_blocks = int(np.count_nonzero(problem.variable_points))
        self.information = 1.0 / np.power(problem.pyramid.eta, problem.obs_point_levels.astype(np.float64))
        calibration = np.array([[c.fx, c.fy, c.cx, c.cy] for c in problem.intrinsics]).reshape(-1, 4)
        dist = np.array([c.dist for c in problem.intrinsics], dtype=np.float64).reshape(-1, 5)
        self.point_calibration = calibration[problem.obs_point_keyframe]
        self.point_dist = dist[problem.obs_point_keyframe]
        corner_keyframes = np.repeat(problem.obs_marker_keyframe, 4)
        self.corner_keyframes = corner_keyframes
        self.corner_markers = np.repeat(problem.obs_marker, 4)
        self.corner_calibration = calibration[corner_keyframes]
        self.corner_dist = dist[corner_keyframes]
        self.local_corners = np.concatenate([canonical_corners(side) for side in problem.marker_sides]).reshape(-1, 4, 3) \
            if len(problem.marker_sides) else np.zeros((0, 4, 3))

    def initial_state(self) -> BundleState:
        return BundleState(list(self.problem.keyframe_poses), list(self.problem.marker_poses),
                           np.asarray(self.problem.point_positions, dtype=np.float64).copy())

    # residuals

    def _stack_poses(self, poses: Sequence[Pose]) -> Tuple[np.ndarray, np.ndarray]:
        if not poses:
            return np.zeros((0, 3, 3)), np.zeros((0, 3))
        return np.array([pose.R for pose in poses]), np.array([pose.translation for pose in poses])

    def _point_terms(self, state: BundleState, with_jacobian: bool):
        problem = self.problem
        if len(problem.obs_point) == 0:
            return np.zeros((0, 2)), None, None, None
        rotations, translations = self._stack_poses(state.keyframe_poses)
        world = state.point_positions[problem.obs_point]
        rotation = rotations[problem.obs_point_keyframe]
        camera = np.einsum('nij,nj->ni', rotation, world) + translations[problem.obs_point_keyframe]
        if np.any(camera[:, 2] <= 1e-9):
            return None, None, None, None
        projected, d_pixel = project_camera_points(camera, self.point_calibration, self.point_dist, with_jacobian)
        residuals = projected - problem.obs_point_pixels
        if not with_jacobian:
            return residuals, None, None, None
        d_pose = d_pixel @ pose_increment_jacobian(camera)
        d_point = d_pixel @ rotation
        return residuals, d_pose, d_point, None

    def _marker_terms(self, state: BundleState, with_jacobian: bool):
        problem = self.problem
        if len(problem.obs_marker) == 0:
            return np.zeros((0, 2)), None, None
        marker_rotations, marker_translations = self._stack_poses(state.marker_poses)
        rotations, translations = self._stack_poses(state.keyframe_poses)
        local = self.local_corners[problem.obs_marker].reshape(-1, 3)
        world = (np.einsum('nij,nj->ni', marker_rotations[self.corner_markers], local)
                 + marker_translations[self.corner_markers])
        rotation = rotations[self.corner_keyframes]
        camera = np.einsum('nij,nj->ni', rotation, world) + translations[self.corner_keyframes]
        if np.any(camera[:, 2] <= 1e-9):
            return None, None, None
        projected, d_pixel = project_camera_points(camera, self.corner_calibration, self.corner_dist, with_jacobian)
        residuals = projected - problem.obs_marker_pixels.reshape(-1, 2)
        if not with_jacobian:
            return residuals, None, None
        d_pose = d_pixel @ pose_increment_jacobian(camera)
        d_marker = d_pixel @ rotation @ pose_increment_jacobian(world)
        return residuals, d_pose, d_marker

    def cost(self, state: BundleState) -> float:
        point_residuals = self._point_terms(state, False)[0]
        marker_residuals = self._marker_terms(state, False)[0]
        if point_residuals is None or marker_residuals is None:
            return float('inf')
        point_cost = float(np.sum(self.information * np.sum(point_residuals ** 2, axis=1)))
        marker_cost = float(np.sum(marker_residuals ** 2))
        return self.problem.point_weight * point_cost + self.problem.marker_weight * marker_cost

    # normal equations

    def _linearize(self, state: BundleState):
        problem = self.problem
        point_residuals, point_d_pose, point_d_point, _ = self._point_terms(state, True)
        marker_residuals, marker_d_pose, marker_d_marker = self._marker_terms(state, True)
        if point_residuals is None or marker_residuals is None:
            raise DivergedSolve("Linearization point has observations behind a camera")
        camera_size = 6 * self.camera_blocks
        point_size = 3 * self.point_blocks
        hessian_blocks = []
        coupling_blocks = []
        camera_gradient = np.zeros(camera_size)
        point_gradient = np.zeros(point_size)
        point_hessian = np.zeros((self.point_blocks, 3, 3))

        if len(problem.obs_point):
            weights = problem.point_weight * self.information
            pose_block = self.keyframe_slots[problem.obs_point_keyframe]
            point_block = self.point_slots[problem.obs_point]
            pose_live = pose_block >= 0
            point_live = point_block >= 0
            weighted_pose = weights[:, None, None] * point_d_pose
            weighted_point = weights[:, None, None] * point_d_point
            if np.any(pose_live):
                values = np.einsum('nia,nib->nab', weighted_pose[pose_live], point_d_pose[pose_live])
                hessian_blocks.append((pose_block[pose_live], pose_block[pose_live], values))
                np.add.at(camera_gradient.reshape(-1, 6), pose_block[pose_live],
                          np.einsum('nia,ni->na', weighted_pose[pose_live], point_residuals[pose_live]))
            if np.any(point_live):
                np.add.at(point_hessian, point_block[point_live],
                          np.einsum('nia,nib->nab', weighted_point[point_live], point_d_point[point_live]))
                np.add.at(point_gradient.reshape(-1, 3), point_block[point_live],
                          np.einsum('nia,ni->na', weighted_point[point_live], point_residuals[point_live]))
            both = pose_live & point_live
            if np.any(both):
                coupling_blocks.append((pose_block[both], point_block[both],
                                        np.einsum('nia,nib->nab', weighted_pose[both], point_d_point[both])))

        if len(problem.obs_marker):
            weight = problem.marker_weight
            pose_block = self.keyframe_slots[self.corner_keyframes]
            marker_block = self.marker_slots[self.corner_markers]
            pose_live = pose_block >= 0
            marker_live = marker_block >= 0
            if np.any(pose_live):
                hessian_blocks.append((pose_block[pose_live], pose_block[pose_live],
                                       weight * np.einsum('nia,nib->nab', marker_d_pose[pose_live], marker_d_pose[pose_live])))
                np.add.at(camera_gradient.reshape(-1, 6), pose_block[pose_live],
                          weight * np.einsum('nia,ni->na', marker_d_pose[pose_live], marker_residuals[pose_live]))
            if np.any(marker_live):
                hessian_blocks.append((marker_block[marker_live], marker_block[marker_live],
                                       weight * np.einsum('nia,nib->nab', marker_d_marker[marker_live], marker_d_marker[marker_live])))
                np.add.at(camera_gradient.reshape(-1, 6), marker_block[marker_live],
                          weight * np.einsum('nia,ni->na', marker_d_marker[marker_live], marker_residuals[marker_live]))
            both = pose_live & marker_live
            if np.any(both):
                cross = weight * np.einsum('nia,nib->nab', marker_d_pose[both], marker_d_marker[both])
                hessian_blocks.append((pose_block[both], marker_block[both], cross))
                hessian_blocks.append((marker_block[both], pose_block[both], np.transpose(cross, (0, 2, 1))))

        camera_hessian = sp.csr_matrix((camera_size, camera_size))
        for rows, cols, values in hessian_blocks:
            camera_hessian = camera_hessian + _block_coo(rows, cols, values, (camera_size, camera_size)).tocsr()
        coupling = sp.csr_matrix((camera_size, point_size))
        for rows, cols, values in coupling_blocks:
            coupling = coupling + _block_coo(rows, cols, values, (camera_size, point_size)).tocsr()
        return camera_hessian, coupling, point_hessian, camera_gradient, point_gradient

    def gradient(self, state: BundleState) -> np.ndarray:
        """d E / d(increment) in variable order (keyframes, markers, points)."""
        _, _, _, camera_gradient, point_gradient = self._linearize(state)
        return 2.0 * np.concatenate([camera_gradient, point_gradient])

    def dense_system(self, state: BundleState) -> Tuple[np.ndarray, np.ndarray]:
        camera_hessian, coupling, point_hessian, camera_gradient, point_gradient = self._linearize(state)
        point_size = 3 * self.point_blocks
        point_matrix = np.zeros((point_size, point_size))
        for index in range(self.point_blocks):
            point_matrix[3 * index:3 * index + 3, 3 * index:3 * index + 3] = point_hessian[index]
        coupling_dense = coupling.toarray()
        hessian = np.block([[camera_hessian.toarray(), coupling_dense], [coupling_dense.T, point_matrix]])
        return hessian, np.concatenate([camera_gradient, point_gradient])

    def dense_step(self, state: BundleState, damping: float) -> np.ndarray:
        hessian, gradient = self.dense_system(state)
        augmented = hessian + damping * np.diag(np.maximum(np.diag(hessian), _DIAGONAL_FLOOR))
        return np.linalg.solve(augmented, -gradient)

    def schur_step(self, state: BundleState, damping: float) -> np.ndarray:
        camera_hessian, coupling, point_hessian, camera_gradient, point_gradient = self._linearize(state)
        return self._solve_reduced(camera_hessian, coupling, point_hessian, camera_gradient, point_gradient, damping)

    def _solve_reduced(self, camera_hessian, coupling, point_hessian, camera_gradient, point_gradient,
                       damping: float) -> np.ndarray:
        camera_size = camera_hessian.shape[0]
        point_diagonal = np.maximum(np.einsum('nii->ni', point_hessian), _DIAGONAL_FLOOR)
        damped_points = point_hessian.copy()
        damped_points[:, np.arange(3), np.arange(3)] += damping * point_diagonal
        try:
            point_inverse = np.linalg.inv(damped_points) if self.point_blocks else np.zeros((0, 3, 3))
        except np.linalg.LinAlgError as exc:
            raise SingularSystem("Point block is singular") from exc
        if not np.all(np.isfinite(point_inverse)):
            raise SingularSystem("Point block inverse is not finite")
        blocks = self.point_blocks
        inverse_matrix = sp.bsr_matrix((point_inverse, np.arange(blocks), np.arange(blocks + 1)),
                                       shape=(3 * blocks, 3 * blocks)).tocsr()
        scaled_point_gradient = inverse_matrix @ point_gradient if self.point_blocks else np.zeros(0)

        camera_step = np.zeros(camera_size)
        if camera_size:
            camera_dense = camera_hessian.toarray()
            camera_dense = camera_dense + damping * np.diag(np.maximum(np.diag(camera_dense), _DIAGONAL_FLOOR))
            if self.point_blocks:
                reduced = camera_dense - (coupling @ inverse_matrix @ coupling.T).toarray()
                right_hand = -camera_gradient + coupling @ scaled_point_gradient
            else:
                reduced = camera_dense
                right_hand = -camera_gradient
            try:
                factor = scipy.linalg.cho_factor(reduced, check_finite=True)
                camera_step = scipy.linalg.cho_solve(factor, right_hand)
            except (np.linalg.LinAlgError, ValueError):
                try:
                    camera_step = np.linalg.solve(reduced, right_hand)
                except np.linalg.LinAlgError as exc:
                    raise SingularSystem("Reduced camera system is singular") from exc
        if self.point_blocks:
            point_step = inverse_matrix @ (-point_gradient - coupling.T @ camera_step)
        else:
            point_step = np.zeros(0)
        step = np.concatenate([camera_step, point_step])
        if not np.all(np.isfinite(step)):
            raise SingularSystem("Non-finite increment")
        return step

    def retract(self, state: BundleState, step: np.ndarray) -> BundleState:
        updated = state.copy()
        camera_steps = step[:6 * self.camera_blocks].reshape(-1, 6)
        for index, slot in enumerate(self.keyframe_slots):
            if slot >= 0:
                updated.keyframe_poses[index] = state.keyframe_poses[index].retract(camera_steps[slot])
        for index, slot in enumerate(self.marker_slots):
            if slot >= 0:
                updated.marker_poses[index] = state.marker_poses[index].retract(camera_steps[slot])
        point_steps = step[6 * self.camera_blocks:].reshape(-1, 3)
        live = self.point_slots >= 0
        updated.point_positions[live] = state.point_positions[live] + point_steps[self.point_slots[live]]
        return updated

    def run(self, max_iterations: int, initial_damping: float = 1e-4) -> BundleResult:
        state = self.initial_state()
        cost = self.cost(state)
        if not np.isfinite(cost):
            raise DivergedSolve("Initial bundle state has observations behind a camera")
        history = [cost]
        accepted = 0
        damping = initial_damping
        iterations = 0
        if self.problem.variable_count == 0:
            return BundleResult(cost, cost, history, 0, 0, state)
        linearization = None
        while iterations < max_iterations and cost > 0.0:
            iterations += 1
            if linearization is None:
                linearization = self._linearize(state)
            try:
                step = self._solve_reduced(*linearization, damping)
            except SingularSystem:
                damping *= 10.0
                if damping > 1e12:
                    raise
                continue
            candidate = self.retract(state, step)
            candidate_cost = self.cost(candidate)
            if candidate_cost < cost:
                decrease = cost - candidate_cost
                state, cost = candidate, candidate_cost
                history.append(cost)
                accepted += 1
                linearization = None
                damping = max(damping * 0.1, 1e-12)
                if decrease <= 1e-12 * max(cost, 1e-300):
                    break
            else:
                damping *= 10.0
                if damping > 1e12:
                    break
        if not np.isfinite(cost):
            raise DivergedSolve("Bundle adjustment produced a non-finite cost")
        logger.debug("Bundle adjustment: cost %.6g -> %.6g in %d iterations (%d accepted)",
                     history[0], cost, iterations, accepted)
        return BundleResult(history[0], cost, history, accepted, iterations, state)


def _build_problem(world: WorldMap, variable_keyframes: Set[int], point_ids: Iterable[int],
                   marker_ids: Iterable[int], fixed_keyframes: Set[int], min_observers: int = 2) -> BundleProblem:
    anchor = world.anchor_keyframe
    variable_keyframes = {k for k in variable_keyframes if k != anchor}
    keyframe_ids: List[int] = []
    keyframe_index: Dict[int, int] = {}

    def _keyframe_slot(keyframe_id: int) -> int:
        if keyframe_id not in keyframe_index:
            keyframe_index[keyframe_id] = len(keyframe_ids)
            keyframe_ids.append(keyframe_id)
        return keyframe_index[keyframe_id]

    allowed = variable_keyframes | fixed_keyframes | ({anchor} if anchor is not None else set())
    obs_point, obs_point_keyframe, obs_pixels, obs_levels = [], [], [], []
    kept_points: List[int] = []
    positions = []
    for point_id in sorted(point_ids):
        point = world.point(point_id)
        observers = {k: i for k, i in world.point_observers(point_id).items() if k in allowed}
        usable = []
        for keyframe_id, keypoint_index in sorted(observers.items()):
            keyframe = world.keyframe(keyframe_id)
            if keyframe.pose.apply(point.position)[2] <= 1e-6:
                continue
            usable.append((keyframe_id, keypoint_index, keyframe))
        if len(usable) < min_observers:
            continue
        index = len(kept_points)
        kept_points.append(point_id)
        positions.append(point.position)
        for keyframe_id, keypoint_index, keyframe in usable:
            obs_point.append(index)
            obs_point_keyframe.append(_keyframe_slot(keyframe_id))
            obs_pixels.append(keyframe.pixels[keypoint_index])
            obs_levels.append(int(keyframe.levels[keypoint_index]))

    obs_marker, obs_marker_keyframe, obs_corners = [], [], []
    kept_markers: List[int] = []
    marker_poses: List[Pose] = []
    sides = []
    for marker_id in sorted(marker_ids):
        marker = world.marker(marker_id)
        if marker is None or not marker.is_valid:
            continue
        usable = []
        for keyframe_id, obs in sorted(world.marker_observers(marker_id).items(), key=lambda item: item[0]):
            if keyframe_id not in allowed:
                continue
            keyframe = world.keyframe(keyframe_id)
            if np.any(keyframe.pose.apply(marker.world_corners())[:, 2] <= 1e-6):
                continue
            usable.append((keyframe_id, obs))
        if not usable:
            continue
        index = len(kept_markers)
        kept_markers.append(marker_id)
        marker_poses.append(marker.pose)
        sides.append(marker.side)
        for keyframe_id, obs in usable:
            obs_marker.append(index)
            obs_marker_keyframe.append(_keyframe_slot(keyframe_id))
            obs_corners.append(obs.corners_px)

    poses = [world.keyframe(k).pose for k in keyframe_ids]
    intrinsics = [world.keyframe(k).intrinsics for k in keyframe_ids]
    return BundleProblem(
        keyframe_ids=keyframe_ids,
        keyframe_poses=poses,
        intrinsics=intrinsics,
        variable_keyframes=np.array([k in variable_keyframes for k in keyframe_ids], dtype=bool),
        point_ids=kept_points,
        point_positions=np.array(positions, dtype=np.float64).reshape(-1, 3),
        variable_points=np.ones(len(kept_points), dtype=bool),
        marker_ids=kept_markers,
        marker_poses=marker_poses,
        marker_sides=np.array(sides, dtype=np.float64),
        variable_markers=np.ones(len(kept_markers), dtype=bool),
        obs_point=np.array(obs_point, dtype=np.int64),
        obs_point_keyframe=np.array(obs_point_keyframe, dtype=np.int64),
        obs_point_pixels=np.array(obs_pixels, dtype=np.float64).reshape(-1, 2),
        obs_point_levels=np.array(obs_levels, dtype=np.int64),
        obs_marker=np.array(obs_marker, dtype=np.int64),
        obs_marker_keyframe=np.array(obs_marker_keyframe, dtype=np.int64),
        obs_marker_pixels=np.array(obs_corners, dtype=np.float64).reshape(-1, 4, 2),
        pyramid=world.pyramid,
    )


def build_bundle_problem(world: WorldMap, mode: str = GLOBAL, keyframe_id: Optional[int] = None,
                         use_points: bool = True, use_markers: bool = True) -> BundleProblem:
    if mode == GLOBAL:
        variable = set(world.keyframes.ids())
        points = world.points.ids() if use_points else []
        markers = [marker.id for marker in world.markers.values()] if use_markers else []
        return _build_problem(world, variable, points, markers, set())
    if mode != LOCAL or keyframe_id is None:
        raise ValueError("Local bundle adjustment needs a keyframe")
    window = set(world.local_window(keyframe_id))
    points = world.points_of_keyframes(window) if use_points else []
    markers = sorted({m for k in window for m in world.registry.keyframe_markers(k)}) if use_markers else []
    fixed: Set[int] = set()
    for point_id in points:
        fixed.update(k for k in world.point_observers(point_id) if k not in window)
    for marker_id in markers:
        fixed.update(k for k in world.marker_observers(marker_id) if k not in window)
    return _build_problem(world, window, points, markers, fixed)


def apply_bundle_state(world: WorldMap, problem: BundleProblem, state: BundleState) -> None:
    for index, keyframe_id in enumerate(problem.keyframe_ids):
        if problem.variable_keyframes[index]:
            world.keyframe(keyframe_id).pose = state.keyframe_poses[index]
    for index, marker_id in enumerate(problem.marker_ids):
        if problem.variable_markers[index]:
            world.marker(marker_id).pose = state.marker_poses[index]
    for index, point_id in enumerate(problem.point_ids):
        if problem.variable_points[index]:
            world.point(point_id).position = state.point_positions[index].copy()
    world.refresh_points(problem.point_ids)


def bundle_adjust(world: WorldMap, mode: str = GLOBAL, keyframe_id: Optional[int] = None, max_iters: int = 50,
                  initial_damping: float = 1e-4, use_points: bool = True, use_markers: bool = True) -> BundleResult:
    """Refines the map in place; local mode only moves the keyframe's graph window."""
    with world.lock:
        problem = build_bundle_problem(world, mode, keyframe_id, use_points, use_markers)
        result = BundleAdjuster(problem).run(max_iters, initial_damping)
        apply_bundle_state(world, problem, result.state)
    logger.debug("%s bundle adjustment over %d keyframes, %d points, %d markers: %.6g -> %.6g",
                 mode, len(problem.keyframe_ids), len(problem.point_ids), len(problem.marker_ids),
                 result.initial_cost, result.final_cost)
    return result


def remove_outlier_observations(world: WorldMap, point_ids: Iterable[int], chi2_threshold: float = 5.99) -> int:
    """Drops point observations whose information-weighted squared residual exceeds the threshold."""
    removed = 0
    for point_id in sorted(point_ids):
        if point_id not in world.points:
            continue
        point = world.point(point_id)
        for keyframe_id, keypoint_index in world.point_observers(point_id).items():
            keyframe = world.keyframe(keyframe_id)
            camera_point = keyframe.pose.apply(point.position)
            level = int(keyframe.levels[keypoint_index])
            if camera_point[2] <= 1e-6:
                chi2 = float('inf')
            else:
                calibration = np.array([keyframe.intrinsics.fx, keyframe.intrinsics.fy,
                                        keyframe.intrinsics.cx, keyframe.intrinsics.cy])
                projected, _ = project_camera_points(camera_point[None], calibration, keyframe.intrinsics.dist_array)
                chi2 = float(np.sum((projected[0] - keyframe.pixels[keypoint_index]) ** 2)) / world.pyramid.eta ** level
            if chi2 > chi2_threshold:
                world.remove_point_observation(point_id, keyframe_id, refresh=False)
                removed += 1
        if point_id in world.points and world.registry.observer_count(point_id) < 2:
            world.erase_point(point_id)
        elif point_id in world.points:
            world.refresh_point(point_id)
    return removed
