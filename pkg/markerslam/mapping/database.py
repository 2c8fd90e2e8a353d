import logging
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from markerslam.mapping.descriptors import hamming_matrix

logger = logging.getLogger(__name__)


def mutual_matches(query: np.ndarray, stored: np.ndarray, tau_d: int) -> List[Tuple[int, int, int]]:
    """Mutual nearest neighbours (query index, stored index, distance) within ``tau_d`` bits."""
    distances = hamming_matrix(query, stored)
    if distances.size == 0:
        return []
    best_stored = np.argmin(distances, axis=1)
    best_query = np.argmin(distances, axis=0)
    rows = np.arange(distances.shape[0])
    keep = (best_query[best_stored] == rows) & (distances[rows, best_stored] <= tau_d)
    return [(int(i), int(best_stored[i]), int(distances[i, best_stored[i]])) for i in rows[keep]]


def similarity_score(query: np.ndarray, stored: np.ndarray, tau_d: int) -> float:
    largest = max(len(query), len(stored))
    if largest == 0:
        return 0.0
    return len(mutual_matches(query, stored, tau_d)) / largest


class RecognitionDatabase:
    """Exact descriptor index over keyframes, scored in [0, 1]."""

    def __init__(self, tau_d: int = 50):
        self.tau_d = tau_d
        self._entries: Dict[int, np.ndarray] = {}

    def add(self, keyframe_id: int, descriptors: np.ndarray) -> None:
        self._entries[keyframe_id] = np.asarray(descriptors, dtype=np.uint8).copy()

    def remove(self, keyframe_id: int) -> None:
        self._entries.pop(keyframe_id, None)

    def descriptors(self, keyframe_id: int) -> np.ndarray:
        return self._entries[keyframe_id]

    def keyframe_ids(self) -> List[int]:
        return sorted(self._entries)

    def __contains__(self, keyframe_id: object) -> bool:
        return keyframe_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def score(self, query: np.ndarray, keyframe_id: int) -> float:
        return similarity_score(query, self._entries[keyframe_id], self.tau_d)

    def query(self, frame_descriptors: np.ndarray, exclude: Optional[Iterable[int]] = None,
              min_score: float = 0.0) -> List[Tuple[int, float]]:
        excluded = set(exclude or ())
        ranked = []
        for keyframe_id in sorted(self._entries):
            if keyframe_id in excluded:
                continue
            value = self.score(frame_descriptors, keyframe_id)
            if value >= min_score and value > 0.0:
                ranked.append((keyframe_id, value))
        ranked.sort(key=lambda item: (-item[1], item[0]))
        logger.debug("Database query over %d entries returned %d candidates", len(self._entries), len(ranked))
        return ranked


def db_query(db: RecognitionDatabase, frame_descriptors: np.ndarray, exclude: Optional[Iterable[int]] = None,
             min_score: float = 0.0) -> List[Tuple[int, float]]:
    return db.query(frame_descriptors, exclude, min_score)
