import logging
import threading
from typing import Dict, Iterable, List, Optional, Set

import numpy as np

from markerslam.errors import DeadId, DegenerateDirections
from markerslam.geometry import Pose, PyramidConfig
from markerslam.mapping.database import RecognitionDatabase
from markerslam.mapping.descriptors import representative_descriptor, viewing_direction
from markerslam.mapping.graph import ConnectionGraph
from markerslam.mapping.registry import ObservationRegistry
from markerslam.mapping.slots import DEFAULT_BLOCK_CAPACITY, SlotStore
from markerslam.models import Frame, KeyFrame, MapPoint, Marker, MarkerObs, PointStability

logger = logging.getLogger(__name__)


class WorldMap:
    """Keyframes, map points and markers plus the observation sets, graph and database."""

    def __init__(self, pyramid: Optional[PyramidConfig] = None, tau_d: int = 50,
                 block_capacity: int = DEFAULT_BLOCK_CAPACITY):
        self.pyramid = pyramid or PyramidConfig()
        self.block_capacity = block_capacity
        self.keyframes: SlotStore[KeyFrame] = SlotStore(block_capacity)
        self.points: SlotStore[MapPoint] = SlotStore(block_capacity)
        self.markers: SlotStore[Marker] = SlotStore(block_capacity)
        self._marker_slots: Dict[int, int] = {}
        self.registry = ObservationRegistry()
        self.graph = ConnectionGraph()
        self.database = RecognitionDatabase(tau_d)
        self.anchor_keyframe: Optional[int] = None
        self.next_sequence: int = 0
        self.lock = threading.RLock()

    # keyframes

    def add_keyframe(self, frame: Frame, pose: Pose) -> KeyFrame:
        keyframe = KeyFrame.from_frame(frame, pose, sequence=self.next_sequence)
        keyframe.id = self.keyframes.insert(keyframe)
        self.next_sequence += 1
        self.graph.add_keyframe(keyframe.id)
        self.database.add(keyframe.id, keyframe.descriptors)
        if self.anchor_keyframe is None:
            self.anchor_keyframe = keyframe.id
        return keyframe

    def keyframe(self, keyframe_id: int) -> KeyFrame:
        return self.keyframes.get(keyframe_id)

    def remove_keyframe(self, keyframe_id: int) -> List[int]:
        """Drops a keyframe with all its observations; returns the points it observed."""
        self.keyframes.get(keyframe_id)
        for marker_id in self.registry.keyframe_markers(keyframe_id):
            self.remove_marker_observation(marker_id, keyframe_id)
        touched = sorted(self.registry.keyframe_points(keyframe_id).values())
        for point_id in touched:
            self.remove_point_observation(point_id, keyframe_id)
        self.graph.remove_keyframe(keyframe_id)
        self.database.remove(keyframe_id)
        self.keyframes.erase(keyframe_id)
        if self.anchor_keyframe == keyframe_id:
            remaining = self.keyframes_by_sequence()
            self.anchor_keyframe = remaining[0].id if remaining else None
        return touched

    def keyframes_by_sequence(self) -> List[KeyFrame]:
        return sorted(self.keyframes.values(), key=lambda keyframe: keyframe.sequence)

    def latest_keyframe(self) -> Optional[KeyFrame]:
        ordered = self.keyframes_by_sequence()
        return ordered[-1] if ordered else None

    def neighbors(self, keyframe_id: int, min_weight: int = 1) -> List[int]:
        return self.graph.neighbors(keyframe_id, min_weight)

    def local_window(self, keyframe_id: int) -> List[int]:
        return [keyframe_id] + self.graph.neighbors(keyframe_id)

    # map points

    def add_point(self, position: np.ndarray, observations: Dict[int, int],
                  stability: PointStability = PointStability.PROVISIONAL) -> MapPoint:
        if not observations:
            raise ValueError("A map point needs at least one observation")
        ref_keyframe = next(iter(observations))
        keyframe = self.keyframes.get(ref_keyframe)
        point = MapPoint(-1, np.asarray(position, dtype=np.float64).reshape(3).copy(), keyframe.pose.optical_axis,
                         keyframe.descriptors[observations[ref_keyframe]].copy(), ref_keyframe,
                         self.next_sequence, stability)
        point.id = self.points.insert(point)
        for keyframe_id, keypoint_index in observations.items():
            self.add_point_observation(point.id, keyframe_id, keypoint_index, refresh=False)
        self.refresh_point(point.id)
        return point

    def point(self, point_id: int) -> MapPoint:
        return self.points.get(point_id)

    def add_point_observation(self, point_id: int, keyframe_id: int, keypoint_index: int,
                              refresh: bool = True) -> None:
        self.points.get(point_id)
        self.keyframes.get(keyframe_id)
        self.registry.add_point_observation(point_id, keyframe_id, keypoint_index)
        self.graph.on_point_observation_added(point_id, keyframe_id, self.registry)
        if refresh:
            self.refresh_point(point_id)

    def remove_point_observation(self, point_id: int, keyframe_id: int, refresh: bool = True) -> None:
        self.registry.remove_point_observation(point_id, keyframe_id)
        self.graph.on_point_observation_removed(point_id, keyframe_id, self.registry)
        if refresh and point_id in self.points:
            self.refresh_point(point_id)

    def erase_point(self, point_id: int) -> None:
        for keyframe_id in self.registry.point_observers(point_id):
            self.remove_point_observation(point_id, keyframe_id, refresh=False)
        self.points.erase(point_id)

    def point_observers(self, point_id: int) -> Dict[int, int]:
        return self.registry.point_observers(point_id)

    def refresh_point(self, point_id: int) -> None:
        """Recomputes representative descriptor, viewing direction and scale range."""
        point = self.points.get(point_id)
        observers = self.registry.point_observers(point_id)
        if not observers:
            return
        keyframes = {keyframe_id: self.keyframes.get(keyframe_id) for keyframe_id in observers}
        point.rep_descriptor = representative_descriptor(
            np.array([keyframes[k].descriptors[index] for k, index in observers.items()]))
        try:
            point.view_dir = viewing_direction([keyframe.pose for keyframe in keyframes.values()])
        except DegenerateDirections:
            logger.debug("Point %d keeps its viewing direction, observer axes cancel", point_id)
        if point.ref_keyframe not in observers:
            point.ref_keyframe = min(observers, key=lambda k: keyframes[k].sequence)
        reference = keyframes[point.ref_keyframe]
        level = int(reference.levels[observers[point.ref_keyframe]])
        distance = float(np.linalg.norm(point.position - reference.pose.center))
        point.max_distance = distance * self.pyramid.eta ** level
        point.min_distance = point.max_distance / self.pyramid.eta ** (self.pyramid.levels - 1)

    def refresh_points(self, point_ids: Iterable[int]) -> None:
        for point_id in point_ids:
            if point_id in self.points:
                self.refresh_point(point_id)

    def merge_points(self, keep_id: int, drop_id: int) -> None:
        """Moves the observations of ``drop_id`` onto ``keep_id`` and erases ``drop_id``."""
        if keep_id == drop_id:
            return
        keep = self.points.get(keep_id)
        drop = self.points.get(drop_id)
        moved = self.registry.point_observers(drop_id)
        self.erase_point(drop_id)
        for keyframe_id, keypoint_index in moved.items():
            if self.registry.observes_point(keyframe_id, keep_id):
                continue
            if self.registry.point_of(keyframe_id, keypoint_index) >= 0:
                continue
            self.add_point_observation(keep_id, keyframe_id, keypoint_index, refresh=False)
        keep.visible_count += drop.visible_count
        keep.found_count += drop.found_count
        self.refresh_point(keep_id)

    def points_of_keyframes(self, keyframe_ids: Iterable[int]) -> List[int]:
        collected: Set[int] = set()
        for keyframe_id in keyframe_ids:
            collected.update(self.registry.keyframe_points(keyframe_id).values())
        return sorted(collected)

    # markers

    def add_marker(self, marker_id: int, side: float) -> Marker:
        if marker_id in self._marker_slots:
            return self.markers.get(self._marker_slots[marker_id])
        marker = Marker(marker_id, side)
        self._marker_slots[marker_id] = self.markers.insert(marker)
        return marker

    def marker(self, marker_id: int) -> Optional[Marker]:
        slot = self._marker_slots.get(marker_id)
        return None if slot is None else self.markers.get(slot)

    def has_marker(self, marker_id: int) -> bool:
        return marker_id in self._marker_slots

    def marker_slot(self, marker_id: int) -> int:
        if marker_id not in self._marker_slots:
            raise DeadId(f"Marker {marker_id} is not in the map")
        return self._marker_slots[marker_id]

    def valid_markers(self) -> List[Marker]:
        return sorted((marker for marker in self.markers.values() if marker.is_valid), key=lambda m: m.id)

    def add_marker_observation(self, marker_id: int, keyframe_id: int, obs: MarkerObs) -> None:
        self.marker_slot(marker_id)
        self.keyframes.get(keyframe_id)
        self.registry.add_marker_observation(marker_id, keyframe_id, obs)
        self.graph.on_marker_observation_added(marker_id, keyframe_id, self.registry)

    def remove_marker_observation(self, marker_id: int, keyframe_id: int) -> None:
        self.registry.remove_marker_observation(marker_id, keyframe_id)
        self.graph.on_marker_observation_removed(marker_id, keyframe_id, self.registry)

    def marker_observers(self, marker_id: int) -> Dict[int, MarkerObs]:
        return self.registry.marker_observers(marker_id)

    def rebuild_marker_index(self) -> None:
        self._marker_slots = {marker.id: slot for slot, marker in self.markers.items()}

    # summaries

    def statistics(self) -> Dict[str, int]:
        return {
            'keyframes': len(self.keyframes),
            'points': len(self.points),
            'markers': len(self.markers),
            'valid_markers': len(self.valid_markers()),
            'point_observations': self.registry.point_observation_count,
            'marker_observations': self.registry.marker_observation_count,
            'graph_edges': len(self.graph.edges()),
        }

    def __repr__(self) -> str:
        stats = self.statistics()
        return f"<WorldMap kfs={stats['keyframes']} points={stats['points']} markers={stats['markers']}>"
