import logging
from typing import Dict, List, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from markerslam.errors import DeadId, EmptyChain
from markerslam.geometry import Pose, SimTransform
from markerslam.mapping.world import WorldMap

logger = logging.getLogger(__name__)


def _camera_to_world(pose: Pose) -> SimTransform:
    inverse = pose.inverse()
    return SimTransform(1.0, inverse.rotation, inverse.translation)


def _split(parameters: np.ndarray):
    parameters = parameters.reshape(-1, 7)
    return Rotation.from_rotvec(parameters[:, :3]), parameters[:, 3:6], np.exp(parameters[:, 6])


def _relative(rotations: Rotation, translations: np.ndarray, scales: np.ndarray):
    """Relative similarity between consecutive nodes: node_i^-1 * node_{i+1}."""
    first = rotations[:-1]
    second = rotations[1:]
    inverse_first = first.inv()
    relative_rotation = inverse_first * second
    relative_translation = inverse_first.apply(translations[1:] - translations[:-1]) / scales[:-1, None]
    relative_scale = scales[1:] / scales[:-1]
    return relative_rotation, relative_translation, relative_scale


def _edge_residuals(rotations: Rotation, translations: np.ndarray, scales: np.ndarray,
                    measured: tuple) -> np.ndarray:
    measured_rotation, measured_translation, measured_scale = measured
    rotation, translation, scale = _relative(rotations, translations, scales)
    inverse_measured = measured_rotation.inv()
    rotation_error = (inverse_measured * rotation).as_rotvec()
    translation_error = inverse_measured.apply(translation - measured_translation) / measured_scale[:, None]
    scale_error = np.log(scale / measured_scale)
    return np.column_stack([rotation_error, translation_error, scale_error]).reshape(-1)


def _refine_chain(original: List[SimTransform], seeded: List[SimTransform]) -> List[SimTransform]:
    """Sim(3) pose graph over the chain; both ends stay where the seed put them."""
    stacked = np.array([node.to_vector() for node in original])
    measured = _relative(*_split(stacked))
    first = seeded[0].to_vector()
    last = seeded[-1].to_vector()
    interior = np.array([node.to_vector() for node in seeded[1:-1]]).reshape(-1)

    def _residuals(parameters: np.ndarray) -> np.ndarray:
        nodes = np.vstack([first, parameters.reshape(-1, 7), last])
        return _edge_residuals(*_split(nodes), measured)

    edges = len(original) - 1
    sparsity = sp.lil_matrix((7 * edges, interior.size), dtype=np.int8)
    for edge in range(edges):
        for node in (edge - 1, edge):
            if 0 <= node < len(original) - 2:
                sparsity[7 * edge:7 * edge + 7, 7 * node:7 * node + 7] = 1
    solution = least_squares(_residuals, interior, jac_sparsity=sparsity, method='trf', x_scale='jac',
                             ftol=1e-12, xtol=1e-12, gtol=1e-12, max_nfev=200)
    nodes = [seeded[0]] + [SimTransform.from_vector(row) for row in solution.x.reshape(-1, 7)] + [seeded[-1]]
    logger.debug("Chain pose graph: cost %.3g after %d evaluations", solution.cost, solution.nfev)
    return nodes


def propagate_drift(chain_length: int, drift: SimTransform) -> List[SimTransform]:
    """Uniform share of the drift for each chain position (first gets none, last gets all)."""
    if chain_length < 1:
        raise EmptyChain("Loop correction needs at least one keyframe")
    if chain_length == 1:
        return [drift]
    return [drift.interpolate(index / (chain_length - 1)) for index in range(chain_length)]


def sim3_loop_correct(world: WorldMap, keyframe_chain: Sequence[int], drift: SimTransform,
                      trailing: Sequence[int] = (), refine: bool = True) -> Dict[int, SimTransform]:
    """Spreads ``drift`` along the chain and moves keyframes, points and markers accordingly.

    Returns the world-frame correction applied to every touched keyframe.
    """
    if not keyframe_chain:
        raise EmptyChain("Loop correction needs at least one keyframe")
    for keyframe_id in list(keyframe_chain) + list(trailing):
        if keyframe_id not in world.keyframes:
            raise DeadId(f"Keyframe {keyframe_id} in the loop chain is not live")
    if drift.is_identity():
        return {}
    with world.lock:
        original = [_camera_to_world(world.keyframe(k).pose) for k in keyframe_chain]
        shares = propagate_drift(len(keyframe_chain), drift)
        seeded = [share.compose(node) for share, node in zip(shares, original)]
        if refine and len(keyframe_chain) > 2:
            seeded = _refine_chain(original, seeded)
        corrections = {k: node.compose(base.inverse()) for k, node, base in zip(keyframe_chain, seeded, original)}
        for keyframe_id in trailing:
            if keyframe_id not in corrections:
                corrections[keyframe_id] = drift
        _apply_corrections(world, corrections)
    logger.info("Loop correction over %d keyframes (+%d trailing), drift scale %.4f, translation %.4f m",
                len(keyframe_chain), len(trailing), drift.scale, float(np.linalg.norm(drift.translation)))
    return corrections


def _apply_corrections(world: WorldMap, corrections: Dict[int, SimTransform]) -> None:
    for point_id, point in list(world.points.items()):
        correction = corrections.get(point.ref_keyframe)
        if correction is not None:
            point.position = correction.apply(point.position)
    for marker in world.markers.values():
        if not marker.is_valid:
            continue
        observers = world.marker_observers(marker.id)
        if not observers:
            continue
        anchor = min(observers, key=lambda k: world.keyframe(k).sequence)
        correction = corrections.get(anchor)
        if correction is not None:
            marker.pose = correction.correct_marker(marker.pose)
    for keyframe_id, correction in corrections.items():
        keyframe = world.keyframe(keyframe_id)
        keyframe.pose = correction.correct_pose(keyframe.pose)
    world.refresh_points(world.points.ids())
