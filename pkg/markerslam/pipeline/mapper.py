import logging
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import ClassVar, List, Optional

import numpy as np

from markerslam.errors import SolverError
from markerslam.mapping.world import WorldMap
from markerslam.optimization.bundle import LOCAL, bundle_adjust, remove_outlier_observations
from markerslam.pipeline.culling import cull_keyframes
from markerslam.pipeline.keyframes import bootstrap_marker_pose
from markerslam.pipeline.loops import close_keypoint_loop, detect_keypoint_loop
from markerslam.pipeline.points import apply_survival_policy, create_map_points
from markerslam.pipeline.state import PipelineParams

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoopEvent:
    MARKERS: ClassVar[str] = 'markers'
    KEYPOINTS: ClassVar[str] = 'keypoints'

    frame_index: int
    kind: str
    chain_length: int
    drift_translation: float


@dataclass
class MapUpdate:
    keyframe_id: int
    markers_initialized: List[int] = field(default_factory=list)
    points_created: int = 0
    points_erased: int = 0
    keyframes_culled: List[int] = field(default_factory=list)
    loop_candidate: Optional[int] = None


class MapManager:
    """Keyframe post-processing: marker bootstrap, point creation, culling, loop check and BA.

    Sequential by default; the concurrent profile hands each keyframe to one background worker.
    """

    def __init__(self, world: WorldMap, params: PipelineParams, loop_events: Optional[List[LoopEvent]] = None):
        self.world = world
        self.params = params
        self.loop_events: List[LoopEvent] = loop_events if loop_events is not None else []
        self._executor: Optional[ThreadPoolExecutor] = None
        self._pending: List[Future] = []
        if params.concurrent:
            self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix='map-manager')

    @property
    def concurrent(self) -> bool:
        return self._executor is not None

    def submit(self, keyframe_id: int) -> Optional[MapUpdate]:
        if self._executor is None:
            return self.process_keyframe(keyframe_id)
        self._pending = [future for future in self._pending if not future.done()]
        self._pending.append(self._executor.submit(self.process_keyframe, keyframe_id))
        return None

    def wait_idle(self) -> None:
        for future in self._pending:
            future.result()
        self._pending = []

    def shutdown(self) -> None:
        if self._executor is not None:
            self.wait_idle()
            self._executor.shutdown(wait=True)
            self._executor = None

    def process_keyframe(self, keyframe_id: int) -> MapUpdate:
        world = self.world
        params = self.params
        update = MapUpdate(keyframe_id)
        with world.lock:
            if keyframe_id not in world.keyframes:
                return update
            keyframe = world.keyframe(keyframe_id)
            if params.use_markers:
                for marker_id in sorted(world.registry.keyframe_markers(keyframe_id)):
                    if bootstrap_marker_pose(world, marker_id, keyframe, params):
                        update.markers_initialized.append(marker_id)
            if params.use_keypoints:
                update.points_created = len(create_map_points(world, keyframe_id, params))
                update.points_erased = len(apply_survival_policy(world))
            update.keyframes_culled = cull_keyframes(world, params, world.neighbors(keyframe_id), keep=[keyframe_id])
            loop = None
            if params.use_keypoints and params.keypoint_loop_closure:
                loop = detect_keypoint_loop(world, keyframe_id, params)
            if loop is not None:
                update.loop_candidate = loop.candidate_id
                chain_length = close_keypoint_loop(world, loop, params)
                self.loop_events.append(LoopEvent(keyframe.frame_index, LoopEvent.KEYPOINTS, chain_length,
                                                  float(np.linalg.norm(loop.drift.translation))))
            else:
                self._local_bundle(keyframe_id)
        return update

    def _local_bundle(self, keyframe_id: int) -> None:
        world = self.world
        params = self.params
        try:
            bundle_adjust(world, LOCAL, keyframe_id, max_iters=params.max_iters_local,
                          initial_damping=params.lm_lambda, use_points=params.use_keypoints,
                          use_markers=params.use_markers)
        except SolverError as error:
            logger.warning("Local bundle adjustment around keyframe %d skipped: %s", keyframe_id, error.message)
            return
        if params.use_keypoints:
            remove_outlier_observations(world, world.points_of_keyframes(world.local_window(keyframe_id)),
                                        params.outlier_chi2)
