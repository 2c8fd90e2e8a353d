from typing import Dict, Iterator, List, Tuple

from markerslam.errors import DeadId, DuplicateObservation
from markerslam.models import MarkerObs


class ObservationRegistry:
    """The two observation sets: (point, keyframe, keypoint) and (marker, keyframe, detection)."""

    def __init__(self):
        self._point_observers: Dict[int, Dict[int, int]] = {}
        self._keyframe_points: Dict[int, Dict[int, int]] = {}
        self._marker_observers: Dict[int, Dict[int, MarkerObs]] = {}
        self._keyframe_markers: Dict[int, Dict[int, MarkerObs]] = {}

    def add_point_observation(self, point_id: int, keyframe_id: int, keypoint_index: int) -> None:
        observers = self._point_observers.setdefault(point_id, {})
        if keyframe_id in observers:
            raise DuplicateObservation(f"Point {point_id} already observed by keyframe {keyframe_id}")
        keyframe_points = self._keyframe_points.setdefault(keyframe_id, {})
        if keypoint_index in keyframe_points:
            raise DuplicateObservation(
                f"Keypoint {keypoint_index} of keyframe {keyframe_id} already bound to point {keyframe_points[keypoint_index]}")
        observers[keyframe_id] = keypoint_index
        keyframe_points[keypoint_index] = point_id

    def remove_point_observation(self, point_id: int, keyframe_id: int) -> int:
        observers = self._point_observers.get(point_id, {})
        if keyframe_id not in observers:
            raise DeadId(f"No observation of point {point_id} in keyframe {keyframe_id}")
        keypoint_index = observers.pop(keyframe_id)
        del self._keyframe_points[keyframe_id][keypoint_index]
        if not observers:
            del self._point_observers[point_id]
        return keypoint_index

    def add_marker_observation(self, marker_id: int, keyframe_id: int, obs: MarkerObs) -> None:
        observers = self._marker_observers.setdefault(marker_id, {})
        if keyframe_id in observers:
            raise DuplicateObservation(f"Marker {marker_id} already observed by keyframe {keyframe_id}")
        observers[keyframe_id] = obs
        self._keyframe_markers.setdefault(keyframe_id, {})[marker_id] = obs

    def remove_marker_observation(self, marker_id: int, keyframe_id: int) -> MarkerObs:
        observers = self._marker_observers.get(marker_id, {})
        if keyframe_id not in observers:
            raise DeadId(f"No observation of marker {marker_id} in keyframe {keyframe_id}")
        obs = observers.pop(keyframe_id)
        del self._keyframe_markers[keyframe_id][marker_id]
        if not observers:
            del self._marker_observers[marker_id]
        return obs

    def point_observers(self, point_id: int) -> Dict[int, int]:
        return dict(self._point_observers.get(point_id, {}))

    def keyframe_points(self, keyframe_id: int) -> Dict[int, int]:
        return dict(self._keyframe_points.get(keyframe_id, {}))

    def marker_observers(self, marker_id: int) -> Dict[int, MarkerObs]:
        return dict(self._marker_observers.get(marker_id, {}))

    def keyframe_markers(self, keyframe_id: int) -> Dict[int, MarkerObs]:
        return dict(self._keyframe_markers.get(keyframe_id, {}))

    def observer_count(self, point_id: int) -> int:
        return len(self._point_observers.get(point_id, {}))

    def point_of(self, keyframe_id: int, keypoint_index: int) -> int:
        return self._keyframe_points.get(keyframe_id, {}).get(keypoint_index, -1)

    def observes_point(self, keyframe_id: int, point_id: int) -> bool:
        return keyframe_id in self._point_observers.get(point_id, {})

    def point_tuples(self) -> Iterator[Tuple[int, int, int]]:
        for point_id in sorted(self._point_observers):
            for keyframe_id, keypoint_index in sorted(self._point_observers[point_id].items()):
                yield point_id, keyframe_id, keypoint_index

    def marker_tuples(self) -> Iterator[Tuple[int, int, MarkerObs]]:
        for marker_id in sorted(self._marker_observers):
            for keyframe_id, obs in sorted(self._marker_observers[marker_id].items(), key=lambda item: item[0]):
                yield marker_id, keyframe_id, obs

    def observed_points(self) -> List[int]:
        return sorted(self._point_observers)

    def observed_markers(self) -> List[int]:
        return sorted(self._marker_observers)

    @property
    def point_observation_count(self) -> int:
        return sum(len(observers) for observers in self._point_observers.values())

    @property
    def marker_observation_count(self) -> int:
        return sum(len(observers) for observers in self._marker_observers.values())
