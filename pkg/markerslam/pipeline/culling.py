import itertools
import logging
from typing import Iterable, List, Optional, Set, Tuple

import numpy as np

from markerslam.mapping.world import WorldMap
from markerslam.pipeline.points import erase_orphan_points
from markerslam.pipeline.state import PipelineParams

logger = logging.getLogger(__name__)

REDUNDANT_OBSERVERS: int = 3


def _spread(world: WorldMap, triple: Tuple[int, int, int]) -> float:
    centers = [world.keyframe(keyframe_id).pose.center for keyframe_id in triple]
    return sum(float(np.linalg.norm(a - b)) for a, b in itertools.combinations(centers, 2))


def protected_keyframes(world: WorldMap) -> Set[int]:
    """Per marker, the three observers farthest apart from each other (all of them when three or fewer)."""
    protected: Set[int] = set()
    for marker_id in world.registry.observed_markers():
        observers = sorted(world.marker_observers(marker_id))
        if len(observers) <= 3:
            protected.update(observers)
            continue
        protected.update(max(itertools.combinations(observers, 3), key=lambda triple: _spread(world, triple)))
    return protected


def keyframe_redundancy(world: WorldMap, keyframe_id: int) -> Tuple[int, int]:
    """(redundant, total) matched keypoints; redundant ones are seen by three other keyframes at an
    equal or finer pyramid level."""
    keyframe = world.keyframe(keyframe_id)
    bound = world.registry.keyframe_points(keyframe_id)
    redundant = 0
    for keypoint_index, point_id in bound.items():
        observers = world.point_observers(point_id)
        if len(observers) <= REDUNDANT_OBSERVERS:
            continue
        level = keyframe.levels[keypoint_index]
        finer = sum(1 for other, index in observers.items()
                    if other != keyframe_id and world.keyframe(other).levels[index] <= level)
        if finer >= REDUNDANT_OBSERVERS:
            redundant += 1
    return redundant, len(bound)


def cull_keyframes(world: WorldMap, params: PipelineParams, candidates: Optional[Iterable[int]] = None,
                   keep: Iterable[int] = ()) -> List[int]:
    """Removes redundant keyframes outside the marker-protected set, oldest first."""
    removed: List[int] = []
    spared = set(keep)
    if world.anchor_keyframe is not None:
        spared.add(world.anchor_keyframe)
    pool = sorted(candidates if candidates is not None else world.keyframes.ids(),
                  key=lambda k: world.keyframe(k).sequence if k in world.keyframes else -1)
    for keyframe_id in pool:
        if keyframe_id in spared or keyframe_id not in world.keyframes:
            continue
        if keyframe_id in protected_keyframes(world):
            continue
        redundant, total = keyframe_redundancy(world, keyframe_id)
        if total == 0 or 100.0 * redundant / total < params.tau_c:
            continue
        touched = world.remove_keyframe(keyframe_id)
        erase_orphan_points(world, touched)
        removed.append(keyframe_id)
    if removed:
        logger.debug("Culled keyframes %s", removed)
    return removed
