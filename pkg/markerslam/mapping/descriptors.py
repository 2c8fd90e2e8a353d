from typing import List, Sequence, Tuple, Union

import numpy as np

from markerslam.errors import DegenerateDirections, EmptyInput
from markerslam.geometry import Pose

DescriptorArray = Union[np.ndarray, Sequence[np.ndarray]]


def _as_bits(descriptors: DescriptorArray) -> np.ndarray:
    packed = np.asarray(descriptors, dtype=np.uint8)
    if packed.ndim == 1:
        packed = packed[None, :]
    return np.unpackbits(packed, axis=1).astype(np.float64)


def hamming_distance(first: np.ndarray, second: np.ndarray) -> int:
    first = np.asarray(first, dtype=np.uint8)
    second = np.asarray(second, dtype=np.uint8)
    return int(np.unpackbits(np.bitwise_xor(first, second)).sum())


def hamming_matrix(rows: DescriptorArray, columns: DescriptorArray) -> np.ndarray:
    """Pairwise Hamming distances between two packed descriptor sets."""
    row_bits = _as_bits(rows)
    column_bits = _as_bits(columns)
    if row_bits.shape[0] == 0 or column_bits.shape[0] == 0:
        return np.zeros((row_bits.shape[0], column_bits.shape[0]), dtype=np.int64)
    agreement = row_bits @ column_bits.T
    counts = row_bits.sum(axis=1)[:, None] + column_bits.sum(axis=1)[None, :] - 2.0 * agreement
    return np.rint(counts).astype(np.int64)


def representative_descriptor(descriptors: DescriptorArray) -> np.ndarray:
    packed = np.asarray(descriptors, dtype=np.uint8)
    if packed.size == 0:
        raise EmptyInput("Cannot pick a representative of no descriptors")
    if packed.ndim == 1:
        packed = packed[None, :]
    totals = hamming_matrix(packed, packed).sum(axis=1)
    return packed[int(np.argmin(totals))].copy()


def viewing_direction(observing_keyframe_poses: List[Pose]) -> np.ndarray:
    if not observing_keyframe_poses:
        raise EmptyInput("Viewing direction needs at least one observer")
    total = np.zeros(3)
    for pose in observing_keyframe_poses:
        total += pose.optical_axis
    norm = float(np.linalg.norm(total))
    if norm < 1e-9:
        raise DegenerateDirections("Observer axes cancel out")
    return total / norm


def two_nearest(query: np.ndarray, candidates: DescriptorArray) -> Tuple[int, int, int, int]:
    """Index and distance of the best and second-best candidate (-1 / large when absent)."""
    distances = hamming_matrix(query, candidates)[0]
    if distances.size == 0:
        return -1, 1 << 30, -1, 1 << 30
    order = np.argsort(distances, kind='stable')
    best = int(order[0])
    if distances.size == 1:
        return best, int(distances[best]), -1, 1 << 30
    second = int(order[1])
    return best, int(distances[best]), second, int(distances[second])
