from typing import Dict, Iterable, List, Tuple

import networkx as nx

from markerslam.mapping.registry import ObservationRegistry

POINT_EDGE_WEIGHT: int = 1
MARKER_EDGE_WEIGHT: int = 4


class ConnectionGraph:
    """Weighted keyframe graph: +1 per shared map point, +4 per shared marker."""

    def __init__(self):
        self._graph = nx.Graph()

    def add_keyframe(self, keyframe_id: int) -> None:
        self._graph.add_node(keyframe_id)

    def remove_keyframe(self, keyframe_id: int) -> None:
        if keyframe_id in self._graph:
            self._graph.remove_node(keyframe_id)

    def _bump(self, first: int, second: int, delta: int) -> None:
        if first == second:
            return
        current = self._graph.get_edge_data(first, second, default={}).get('weight', 0)
        updated = current + delta
        if updated <= 0:
            if self._graph.has_edge(first, second):
                self._graph.remove_edge(first, second)
        else:
            self._graph.add_edge(first, second, weight=updated)

    def _spread(self, keyframe_id: int, others: Iterable[int], delta: int) -> None:
        self._graph.add_node(keyframe_id)
        for other in others:
            if other != keyframe_id:
                self._bump(keyframe_id, other, delta)

    def on_point_observation_added(self, point_id: int, keyframe_id: int, registry: ObservationRegistry) -> None:
        self._spread(keyframe_id, registry.point_observers(point_id), POINT_EDGE_WEIGHT)

    def on_point_observation_removed(self, point_id: int, keyframe_id: int, registry: ObservationRegistry) -> None:
        self._spread(keyframe_id, registry.point_observers(point_id), -POINT_EDGE_WEIGHT)

    def on_marker_observation_added(self, marker_id: int, keyframe_id: int, registry: ObservationRegistry) -> None:
        self._spread(keyframe_id, registry.marker_observers(marker_id), MARKER_EDGE_WEIGHT)

    def on_marker_observation_removed(self, marker_id: int, keyframe_id: int, registry: ObservationRegistry) -> None:
        self._spread(keyframe_id, registry.marker_observers(marker_id), -MARKER_EDGE_WEIGHT)

    def weight(self, first: int, second: int) -> int:
        return int(self._graph.get_edge_data(first, second, default={}).get('weight', 0))

    def neighbors(self, keyframe_id: int, min_weight: int = 1) -> List[int]:
        if keyframe_id not in self._graph:
            return []
        ranked = [(data['weight'], other) for other, data in self._graph[keyframe_id].items()
                  if data['weight'] >= min_weight]
        ranked.sort(key=lambda item: (-item[0], item[1]))
        return [other for _, other in ranked]

    def nodes(self) -> List[int]:
        return sorted(self._graph.nodes)

    def edges(self) -> Dict[Tuple[int, int], int]:
        return {(min(a, b), max(a, b)): int(data['weight'])
                for a, b, data in sorted(self._graph.edges(data=True), key=lambda e: (min(e[0], e[1]), max(e[0], e[1])))}

    def shortest_path(self, source: int, target: int) -> List[int]:
        return nx.shortest_path(self._graph, source, target)

    def __contains__(self, keyframe_id: object) -> bool:
        return keyframe_id in self._graph

    def same_as(self, other: 'ConnectionGraph') -> bool:
        return self.nodes() == other.nodes() and self.edges() == other.edges()

    @classmethod
    def from_edges(cls, nodes: Iterable[int], edges: Dict[Tuple[int, int], int]) -> 'ConnectionGraph':
        graph = cls()
        for node in nodes:
            graph.add_keyframe(node)
        for (first, second), weight in edges.items():
            graph._graph.add_edge(first, second, weight=weight)
        return graph


def rebuild_graph(registry: ObservationRegistry, keyframe_ids: Iterable[int] = ()) -> ConnectionGraph:
    graph = ConnectionGraph()
    for keyframe_id in keyframe_ids:
        graph.add_keyframe(keyframe_id)
    for point_id in registry.observed_points():
        observers = sorted(registry.point_observers(point_id))
        for i, first in enumerate(observers):
            graph.add_keyframe(first)
            for second in observers[i + 1:]:
                graph._bump(first, second, POINT_EDGE_WEIGHT)
    for marker_id in registry.observed_markers():
        observers = sorted(registry.marker_observers(marker_id))
        for i, first in enumerate(observers):
            graph.add_keyframe(first)
            for second in observers[i + 1:]:
                graph._bump(first, second, MARKER_EDGE_WEIGHT)
    return graph
