import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

import numpy as np

from markerslam.errors import InputError, NonMonotonicTimestamps
from markerslam.fileio import write_atomic
from markerslam.geometry import Pose
from markerslam.models import TrackingStatus

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TrajectoryEntry:
    timestamp: float
    pose: Optional[Pose]
    status: TrackingStatus = TrackingStatus.TRACKED
    frame_index: int = -1

    @property
    def tracked(self) -> bool:
        return self.status is TrackingStatus.TRACKED and self.pose is not None

    def __repr__(self) -> str:
        return f'<TrajectoryEntry t={self.timestamp:.6f} {self.status.value}>'


class TrajectoryRecord:
    """Per-frame estimates in strictly increasing timestamp order."""

    def __init__(self, entries: Optional[List[TrajectoryEntry]] = None):
        self._entries: List[TrajectoryEntry] = []
        for entry in entries or []:
            self.append(entry)

    def append(self, entry: TrajectoryEntry) -> None:
        if self._entries and not entry.timestamp > self._entries[-1].timestamp:
            raise NonMonotonicTimestamps(
                f"Timestamp {entry.timestamp} does not follow {self._entries[-1].timestamp}")
        self._entries.append(entry)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[TrajectoryEntry]:
        return iter(self._entries)

    def __getitem__(self, index: int) -> TrajectoryEntry:
        return self._entries[index]

    @property
    def tracked(self) -> List[TrajectoryEntry]:
        return [entry for entry in self._entries if entry.tracked]

    @property
    def tracked_count(self) -> int:
        return len(self.tracked)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([entry.timestamp for entry in self._entries])

    def by_frame_index(self) -> Dict[int, TrajectoryEntry]:
        return {entry.frame_index: entry for entry in self._entries}

    def centers(self) -> np.ndarray:
        return np.array([entry.pose.center for entry in self.tracked]).reshape(-1, 3)

    def __repr__(self) -> str:
        return f'<TrajectoryRecord {len(self)} entries, {self.tracked_count} tracked>'


def format_tum_line(timestamp: float, pose: Pose) -> str:
    """Camera position and orientation in the world, ``timestamp tx ty tz qx qy qz qw``."""
    camera_to_world = pose.inverse()
    values = [timestamp, *camera_to_world.translation, *camera_to_world.rotation]
    return ' '.join(f'{value:.9f}' for value in values)


def parse_tum_line(line: str, line_number: int = 0) -> TrajectoryEntry:
    parts = line.split()
    if len(parts) != 8:
        raise InputError(f"Line {line_number}: expected 8 values, got {len(parts)}")
    try:
        values = [float(part) for part in parts]
    except ValueError:
        raise InputError(f"Line {line_number}: non-numeric value")
    if not np.all(np.isfinite(values)):
        raise InputError(f"Line {line_number}: non-finite value")
    quaternion = np.array(values[4:8])
    norm = np.linalg.norm(quaternion)
    if norm < 1e-12:
        raise InputError(f"Line {line_number}: zero quaternion")
    quaternion /= norm
    camera_to_world = Pose(quaternion, values[1:4])
    return TrajectoryEntry(values[0], camera_to_world.inverse(), TrackingStatus.TRACKED)


def dumps_tum(record: TrajectoryRecord) -> str:
    return ''.join(format_tum_line(entry.timestamp, entry.pose) + '\n' for entry in record.tracked)


def save_tum(record: TrajectoryRecord, path: Union[str, Path]) -> None:
    write_atomic(path, dumps_tum(record))
    logger.info("Trajectory with %d tracked frames saved to %s", record.tracked_count, path)


def load_tum(path: Union[str, Path]) -> TrajectoryRecord:
    target = Path(path)
    if not target.is_file():
        raise InputError(f"Trajectory file {path} does not exist")
    record = TrajectoryRecord()
    for number, line in enumerate(target.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith('#'):
            continue
        record.append(parse_tum_line(stripped, number))
    return record
