"""Sequence files.

Layout, version 1::

    MARKERSLAM-SEQUENCE 1
    key=value            one line per WorldConfig field
    END_HEADER
    LMKS u64 n, n x 3 f8 positions, n x 32 u8 descriptors
    MRKS u64 n, n x (i8 id, f8 side, 7 f8 pose qx qy qz qw tx ty tz)
    FRMS u64 n, n x frame block

A frame block is ``i8 index, f8 timestamp, u4 keypoints, u4 markers, 7 f8 ground-truth pose`` followed by
the keypoint pixels (f8), levels (i4), descriptors (u8), landmark ids (i8) and ``i8 id, 8 f8 corners``
per marker. All numbers are little-endian.
"""
import io
import logging
import struct
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from dotenv import dotenv_values

from markerslam.errors import BadMagic, TruncatedStream, UnsupportedVersion
from markerslam.fileio import write_atomic
from markerslam.geometry import Pose
from markerslam.models import DESCRIPTOR_BYTES, Frame, MarkerObs
from markerslam.simulation.world import ObservationSequence, WorldConfig

logger = logging.getLogger(__name__)

MAGIC = 'MARKERSLAM-SEQUENCE'
FORMAT_VERSION = 1
END_OF_HEADER = b'END_HEADER\n'

_FRAME_HEAD = struct.Struct('<qdII7d')
_MARKER_ENTRY = struct.Struct('<qd7d')
_CORNERS_ENTRY = struct.Struct('<q8d')
_COUNT = struct.Struct('<Q')


def _pose_values(pose: Pose) -> Tuple[float, ...]:
    return tuple(pose.rotation) + tuple(pose.translation)


def _pose_from(values) -> Pose:
    return Pose(np.array(values[:4]), np.array(values[4:7]))


def _section(tag: bytes, count: int) -> bytes:
    return tag + _COUNT.pack(count)


def encode_sequence(sequence: ObservationSequence) -> bytes:
    header = [f'{MAGIC} {FORMAT_VERSION}']
    header += [f'{key}={value}' for key, value in sequence.config.to_mapping().items()]
    out = io.BytesIO()
    out.write(('\n'.join(header) + '\n').encode('utf-8'))
    out.write(END_OF_HEADER)

    positions = np.ascontiguousarray(sequence.landmark_positions, dtype='<f8')
    out.write(_section(b'LMKS', positions.shape[0]))
    out.write(positions.tobytes())
    out.write(np.ascontiguousarray(sequence.landmark_descriptors, dtype=np.uint8).tobytes())

    out.write(_section(b'MRKS', len(sequence.marker_poses)))
    for marker_id in sorted(sequence.marker_poses):
        out.write(_MARKER_ENTRY.pack(marker_id, sequence.marker_sides[marker_id],
                                     *_pose_values(sequence.marker_poses[marker_id])))

    out.write(_section(b'FRMS', len(sequence.frames)))
    for frame, pose, landmarks in zip(sequence.frames, sequence.ground_truth, sequence.keypoint_landmarks):
        out.write(_FRAME_HEAD.pack(frame.index, frame.timestamp, frame.keypoint_count,
                                   len(frame.marker_detections), *_pose_values(pose)))
        out.write(np.ascontiguousarray(frame.pixels, dtype='<f8').tobytes())
        out.write(np.ascontiguousarray(frame.levels, dtype='<i4').tobytes())
        out.write(np.ascontiguousarray(frame.descriptors, dtype=np.uint8).tobytes())
        out.write(np.ascontiguousarray(landmarks, dtype='<i8').tobytes())
        for obs in frame.marker_detections:
            out.write(_CORNERS_ENTRY.pack(obs.marker_id, *obs.corners_px.reshape(-1)))
    return out.getvalue()


class _Cursor:
    def __init__(self, payload: bytes, offset: int):
        self.payload = payload
        self.offset = offset

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise TruncatedStream(f"Sequence ends at byte {len(self.payload)}, needed {end}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, layout: struct.Struct) -> tuple:
        return layout.unpack(self.take(layout.size))

    def array(self, dtype: str, count: int, shape: Tuple[int, ...]) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(width * count), dtype=dtype).reshape(shape).copy()

    def section(self, tag: bytes) -> int:
        found = self.take(4)
        if found != tag:
            raise BadMagic(f"Expected section {tag!r}, found {found!r}")
        return self.unpack(_COUNT)[0]


def _parse_header(payload: bytes) -> Tuple[WorldConfig, int]:
    end = payload.find(END_OF_HEADER)
    if end < 0:
        if not payload.startswith(MAGIC.encode('utf-8')):
            raise BadMagic("Not a sequence file")
        raise TruncatedStream("Sequence header is not terminated")
    text = payload[:end].decode('utf-8', errors='replace')
    first, _, rest = text.partition('\n')
    parts = first.split()
    if len(parts) != 2 or parts[0] != MAGIC:
        raise BadMagic("Not a sequence file")
    if parts[1] != str(FORMAT_VERSION):
        raise UnsupportedVersion(f"Sequence format version {parts[1]} is not supported")
    values = {key: value for key, value in dotenv_values(stream=io.StringIO(rest)).items() if value is not None}
    return WorldConfig().with_overrides(values), end + len(END_OF_HEADER)


def decode_sequence(payload: bytes) -> ObservationSequence:
    config, offset = _parse_header(payload)
    cursor = _Cursor(payload, offset)
    intr = config.intrinsics

    count = cursor.section(b'LMKS')
    positions = cursor.array('<f8', count * 3, (count, 3))
    descriptors = cursor.array('u1', count * DESCRIPTOR_BYTES, (count, DESCRIPTOR_BYTES))

    marker_poses: Dict[int, Pose] = {}
    marker_sides: Dict[int, float] = {}
    for _ in range(cursor.section(b'MRKS')):
        entry = cursor.unpack(_MARKER_ENTRY)
        marker_poses[entry[0]] = _pose_from(entry[2:])
        marker_sides[entry[0]] = entry[1]

    frames: List[Frame] = []
    poses: List[Pose] = []
    landmark_ids: List[np.ndarray] = []
    for _ in range(cursor.section(b'FRMS')):
        head = cursor.unpack(_FRAME_HEAD)
        index, timestamp, keypoints, markers = head[:4]
        pixels = cursor.array('<f8', keypoints * 2, (keypoints, 2))
        levels = cursor.array('<i4', keypoints, (keypoints,)).astype(np.int64)
        frame_descriptors = cursor.array('u1', keypoints * DESCRIPTOR_BYTES, (keypoints, DESCRIPTOR_BYTES))
        landmark_ids.append(cursor.array('<i8', keypoints, (keypoints,)).astype(np.int64))
        detections = []
        for _ in range(markers):
            entry = cursor.unpack(_CORNERS_ENTRY)
            detections.append(MarkerObs(entry[0], np.array(entry[1:]).reshape(4, 2)))
        frames.append(Frame(index, timestamp, intr, pixels, levels, frame_descriptors, detections))
        poses.append(_pose_from(head[4:]))
    if cursor.offset != len(payload):
        raise TruncatedStream(f"{len(payload) - cursor.offset} trailing bytes after the last frame")
    return ObservationSequence(config, frames, poses, positions, descriptors, landmark_ids, marker_poses,
                               marker_sides)


def save_sequence(sequence: ObservationSequence, path: Union[str, Path]) -> None:
    write_atomic(path, encode_sequence(sequence))
    logger.info("Sequence with %d frames saved to %s", len(sequence), path)


def load_sequence(path: Union[str, Path]) -> ObservationSequence:
    sequence = decode_sequence(Path(path).read_bytes())
    logger.info("Sequence with %d frames loaded from %s", len(sequence), path)
    return sequence
