"""Binary map file.

Layout (little-endian)::

    b"UFSM"  u32 version
    repeated: 4-byte tag, u64 payload length, payload

Sections appear in the order META, KFRM, PNTS, MRKS, OBSP, OBSM, GRPH, DBAS.
Every store section starts with its high-water mark so vacant slots (and so the
free list) survive a round trip. Floats are raw float64, ids are written in
ascending order. Every section must be consumed exactly and every
observation, edge and database entry must name a live element.
"""
import logging
import struct
from pathlib import Path
from typing import Callable, Dict, List, Tuple, Union

import numpy as np

from markerslam.errors import BadMagic, DeadId, TruncatedStream, UnsupportedVersion
from markerslam.fileio import write_atomic
from markerslam.geometry import CameraIntrinsics, Pose, PyramidConfig
from markerslam.mapping.graph import ConnectionGraph
from markerslam.mapping.slots import SlotStore
from markerslam.mapping.world import WorldMap
from markerslam.models import KeyFrame, MapPoint, Marker, MarkerObs, PointStability

logger = logging.getLogger(__name__)

MAGIC: bytes = b'UFSM'
FORMAT_VERSION: int = 1
SECTION_ORDER: Tuple[bytes, ...] = (b'META', b'KFRM', b'PNTS', b'MRKS', b'OBSP', b'OBSM', b'GRPH', b'DBAS')

_STABILITY_CODES = {PointStability.PROVISIONAL: 0, PointStability.STABLE: 1}


class _Writer:
    def __init__(self):
        self._chunks: List[bytes] = []

    def pack(self, fmt: str, *values) -> None:
        self._chunks.append(struct.pack('<' + fmt, *values))

    def floats(self, values: np.ndarray) -> None:
        self._chunks.append(np.ascontiguousarray(values, dtype='<f8').tobytes())

    def ints(self, values: np.ndarray) -> None:
        self._chunks.append(np.ascontiguousarray(values, dtype='<i8').tobytes())

    def raw(self, payload: bytes) -> None:
        self._chunks.append(payload)

    def pose(self, pose: Pose) -> None:
        self.floats(pose.rotation)
        self.floats(pose.translation)

    def getvalue(self) -> bytes:
        return b''.join(self._chunks)


class _Reader:
    def __init__(self, payload: bytes):
        self._payload = payload
        self._offset = 0

    def take(self, size: int) -> bytes:
        if size < 0 or self._offset + size > len(self._payload):
            raise TruncatedStream(f"Needed {size} bytes at offset {self._offset}, stream has {len(self._payload)}")
        chunk = self._payload[self._offset:self._offset + size]
        self._offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        fmt = '<' + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def one(self, fmt: str):
        return self.unpack(fmt)[0]

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype='<f8').astype(np.float64)

    def ints(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype='<i8').astype(np.int64)

    def pose(self) -> Pose:
        return Pose(self.floats(4), self.floats(3))

    @property
    def exhausted(self) -> bool:
        return self._offset == len(self._payload)


def _write_intrinsics(writer: _Writer, intr: CameraIntrinsics) -> None:
    writer.floats(np.array([intr.fx, intr.fy, intr.cx, intr.cy]))
    writer.floats(np.array(intr.dist))
    writer.pack('II', intr.width, intr.height)


def _read_intrinsics(reader: _Reader) -> CameraIntrinsics:
    fx, fy, cx, cy = (float(v) for v in reader.floats(4))
    dist = tuple(float(v) for v in reader.floats(5))
    width, height = reader.unpack('II')
    return CameraIntrinsics(fx, fy, cx, cy, dist, width, height)


def _write_marker_obs(writer: _Writer, obs: MarkerObs) -> None:
    writer.pack('q', obs.marker_id)
    writer.floats(obs.corners_px)


def _read_marker_obs(reader: _Reader) -> MarkerObs:
    marker_id = reader.one('q')
    return MarkerObs(marker_id, reader.floats(8).reshape(4, 2))


def _encode_meta(world: WorldMap) -> bytes:
    writer = _Writer()
    writer.pack('dIIIqQ', world.pyramid.eta, world.pyramid.levels, world.database.tau_d, world.block_capacity,
                -1 if world.anchor_keyframe is None else world.anchor_keyframe, world.next_sequence)
    return writer.getvalue()


def _encode_keyframes(world: WorldMap) -> bytes:
    writer = _Writer()
    writer.pack('QQ', world.keyframes.high_water, len(world.keyframes))
    for keyframe_id, keyframe in world.keyframes.items():
        writer.pack('QQqd', keyframe_id, keyframe.sequence, keyframe.frame_index, keyframe.timestamp)
        writer.pose(keyframe.pose)
        _write_intrinsics(writer, keyframe.intrinsics)
        writer.pack('II', keyframe.keypoint_count, keyframe.descriptors.shape[1])
        writer.floats(keyframe.pixels)
        writer.ints(keyframe.levels)
        writer.raw(np.ascontiguousarray(keyframe.descriptors, dtype=np.uint8).tobytes())
        writer.pack('I', len(keyframe.markers))
        for marker_id in sorted(keyframe.markers):
            _write_marker_obs(writer, keyframe.markers[marker_id])
    return writer.getvalue()


def _encode_points(world: WorldMap) -> bytes:
    writer = _Writer()
    writer.pack('QQ', world.points.high_water, len(world.points))
    for point_id, point in world.points.items():
        writer.pack('Q', point_id)
        writer.floats(point.position)
        writer.floats(point.view_dir)
        writer.pack('I', point.rep_descriptor.shape[0])
        writer.raw(np.ascontiguousarray(point.rep_descriptor, dtype=np.uint8).tobytes())
        writer.pack('qqBQQdd', point.ref_keyframe, point.created_sequence, _STABILITY_CODES[point.stability],
                    point.visible_count, point.found_count, point.min_distance, point.max_distance)
    return writer.getvalue()


def _encode_markers(world: WorldMap) -> bytes:
    writer = _Writer()
    writer.pack('QQ', world.markers.high_water, len(world.markers))
    for slot, marker in world.markers.items():
        writer.pack('QqdB', slot, marker.id, marker.side, 1 if marker.is_valid else 0)
        if marker.is_valid:
            writer.pose(marker.pose)
    return writer.getvalue()


def _encode_point_observations(world: WorldMap) -> bytes:
    writer = _Writer()
    rows = list(world.registry.point_tuples())
    writer.pack('Q', len(rows))
    for point_id, keyframe_id, keypoint_index in rows:
        writer.pack('QQI', point_id, keyframe_id, keypoint_index)
    return writer.getvalue()


def _encode_marker_observations(world: WorldMap) -> bytes:
    writer = _Writer()
    rows = list(world.registry.marker_tuples())
    writer.pack('Q', len(rows))
    for marker_id, keyframe_id, obs in rows:
        writer.pack('qQ', marker_id, keyframe_id)
        writer.floats(obs.corners_px)
    return writer.getvalue()


def _encode_graph(world: WorldMap) -> bytes:
    writer = _Writer()
    nodes = world.graph.nodes()
    edges = world.graph.edges()
    writer.pack('Q', len(nodes))
    for node in nodes:
        writer.pack('Q', node)
    writer.pack('Q', len(edges))
    for (first, second), weight in edges.items():
        writer.pack('QQq', first, second, weight)
    return writer.getvalue()


def _encode_database(world: WorldMap) -> bytes:
    writer = _Writer()
    entries = world.database.keyframe_ids()
    writer.pack('Q', len(entries))
    for keyframe_id in entries:
        descriptors = world.database.descriptors(keyframe_id)
        width = descriptors.shape[1] if descriptors.ndim == 2 else 0
        writer.pack('QII', keyframe_id, descriptors.shape[0], width)
        writer.raw(np.ascontiguousarray(descriptors, dtype=np.uint8).tobytes())
    return writer.getvalue()


_ENCODERS: Dict[bytes, Callable[[WorldMap], bytes]] = {
    b'META': _encode_meta,
    b'KFRM': _encode_keyframes,
    b'PNTS': _encode_points,
    b'MRKS': _encode_markers,
    b'OBSP': _encode_point_observations,
    b'OBSM': _encode_marker_observations,
    b'GRPH': _encode_graph,
    b'DBAS': _encode_database,
}


def serialize(world: WorldMap) -> bytes:
    with world.lock:
        writer = _Writer()
        writer.raw(MAGIC)
        writer.pack('I', FORMAT_VERSION)
        for tag in SECTION_ORDER:
            payload = _ENCODERS[tag](world)
            writer.raw(tag)
            writer.pack('Q', len(payload))
            writer.raw(payload)
        return writer.getvalue()


def _decode_keyframes(reader: _Reader) -> Tuple[int, Dict[int, KeyFrame]]:
    high_water, count = reader.unpack('QQ')
    keyframes: Dict[int, KeyFrame] = {}
    for _ in range(count):
        keyframe_id, sequence, frame_index, timestamp = reader.unpack('QQqd')
        pose = reader.pose()
        intrinsics = _read_intrinsics(reader)
        keypoints, width = reader.unpack('II')
        pixels = reader.floats(2 * keypoints).reshape(keypoints, 2)
        levels = reader.ints(keypoints)
        descriptors = np.frombuffer(reader.take(keypoints * width), dtype=np.uint8).reshape(keypoints, width).copy()
        markers = {}
        for _ in range(reader.one('I')):
            obs = _read_marker_obs(reader)
            markers[obs.marker_id] = obs
        keyframes[keyframe_id] = KeyFrame(keyframe_id, sequence, frame_index, timestamp, pose, intrinsics,
                                          pixels, levels, descriptors, markers)
    return high_water, keyframes


def _decode_points(reader: _Reader) -> Tuple[int, Dict[int, MapPoint]]:
    high_water, count = reader.unpack('QQ')
    stability_by_code = {code: stability for stability, code in _STABILITY_CODES.items()}
    points: Dict[int, MapPoint] = {}
    for _ in range(count):
        point_id = reader.one('Q')
        position = reader.floats(3)
        view_dir = reader.floats(3)
        width = reader.one('I')
        descriptor = np.frombuffer(reader.take(width), dtype=np.uint8).copy()
        ref_keyframe, created, code, visible, found, min_distance, max_distance = reader.unpack('qqBQQdd')
        if code not in stability_by_code:
            raise TruncatedStream(f"Unknown stability code {code}")
        points[point_id] = MapPoint(point_id, position, view_dir, descriptor, ref_keyframe, created,
                                    stability_by_code[code], visible, found, min_distance, max_distance)
    return high_water, points


def _decode_markers(reader: _Reader) -> Tuple[int, Dict[int, Marker]]:
    high_water, count = reader.unpack('QQ')
    markers: Dict[int, Marker] = {}
    for _ in range(count):
        slot, marker_id, side, valid = reader.unpack('QqdB')
        pose = reader.pose() if valid else None
        markers[slot] = Marker(marker_id, side, pose)
    return high_water, markers


def _split_sections(payload: bytes) -> Dict[bytes, _Reader]:
    if len(payload) < 4:
        raise TruncatedStream("Stream shorter than the magic")
    if payload[:4] != MAGIC:
        raise BadMagic(f"Expected {MAGIC!r}, found {payload[:4]!r}")
    reader = _Reader(payload[4:])
    version = reader.one('I')
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"Map format version {version} is not supported (expected {FORMAT_VERSION})")
    sections: Dict[bytes, _Reader] = {}
    for expected in SECTION_ORDER:
        tag = reader.take(4)
        if tag != expected:
            raise TruncatedStream(f"Expected section {expected!r}, found {tag!r}")
        sections[tag] = _Reader(reader.take(reader.one('Q')))
    if not reader.exhausted:
        raise TruncatedStream("Trailing bytes after the last section")
    return sections


def _finish(tag: bytes, reader: _Reader) -> None:
    if not reader.exhausted:
        raise TruncatedStream(f"Section {tag.decode()} has unread bytes")


def _require_keyframe(world: WorldMap, keyframe_id: int, where: str) -> KeyFrame:
    if keyframe_id not in world.keyframes:
        raise DeadId(f"{where} refers to missing keyframe {keyframe_id}")
    return world.keyframes.get(keyframe_id)


def deserialize(payload: bytes) -> WorldMap:
    sections = _split_sections(payload)
    meta = sections[b'META']
    eta, levels, tau_d, block_capacity, anchor, next_sequence = meta.unpack('dIIIqQ')
    _finish(b'META', meta)
    world = WorldMap(PyramidConfig(eta, levels), tau_d, block_capacity)
    world.anchor_keyframe = None if anchor < 0 else anchor
    world.next_sequence = next_sequence

    high_water, keyframes = _decode_keyframes(sections[b'KFRM'])
    _finish(b'KFRM', sections[b'KFRM'])
    world.keyframes = SlotStore.restore(keyframes, high_water, block_capacity)
    high_water, points = _decode_points(sections[b'PNTS'])
    _finish(b'PNTS', sections[b'PNTS'])
    world.points = SlotStore.restore(points, high_water, block_capacity)
    high_water, markers = _decode_markers(sections[b'MRKS'])
    _finish(b'MRKS', sections[b'MRKS'])
    world.markers = SlotStore.restore(markers, high_water, block_capacity)
    world.rebuild_marker_index()
    if world.anchor_keyframe is not None:
        _require_keyframe(world, world.anchor_keyframe, "Anchor")

    observations = sections[b'OBSP']
    for _ in range(observations.one('Q')):
        point_id, keyframe_id, keypoint_index = observations.unpack('QQI')
        if point_id not in world.points:
            raise DeadId(f"Point observation refers to missing point {point_id}")
        keyframe = _require_keyframe(world, keyframe_id, f"Observation of point {point_id}")
        if keypoint_index >= keyframe.keypoint_count:
            raise DeadId(f"Keyframe {keyframe_id} has no keypoint {keypoint_index}")
        world.registry.add_point_observation(point_id, keyframe_id, keypoint_index)
    _finish(b'OBSP', observations)
    marker_observations = sections[b'OBSM']
    for _ in range(marker_observations.one('Q')):
        marker_id, keyframe_id = marker_observations.unpack('qQ')
        corners = marker_observations.floats(8).reshape(4, 2)
        if not world.has_marker(marker_id):
            raise DeadId(f"Marker observation refers to missing marker {marker_id}")
        _require_keyframe(world, keyframe_id, f"Observation of marker {marker_id}")
        world.registry.add_marker_observation(marker_id, keyframe_id, MarkerObs(marker_id, corners))
    _finish(b'OBSM', marker_observations)

    graph_section = sections[b'GRPH']
    nodes = [graph_section.one('Q') for _ in range(graph_section.one('Q'))]
    for node in nodes:
        _require_keyframe(world, node, "Connection graph")
    edges = {}
    for _ in range(graph_section.one('Q')):
        first, second, weight = graph_section.unpack('QQq')
        _require_keyframe(world, first, "Connection graph edge")
        _require_keyframe(world, second, "Connection graph edge")
        edges[(first, second)] = weight
    _finish(b'GRPH', graph_section)
    world.graph = ConnectionGraph.from_edges(nodes, edges)

    database_section = sections[b'DBAS']
    for _ in range(database_section.one('Q')):
        keyframe_id, count, width = database_section.unpack('QII')
        descriptors = np.frombuffer(database_section.take(count * width), dtype=np.uint8).reshape(count, width)
        _require_keyframe(world, keyframe_id, "Recognition database")
        world.database.add(keyframe_id, descriptors)
    _finish(b'DBAS', database_section)
    logger.debug("Decoded map: %s", world.statistics())
    return world


def save_map(world: WorldMap, path: Union[str, Path]) -> None:
    write_atomic(path, serialize(world))
    logger.info("Map saved to %s (%s)", path, world.statistics())


def load_map(path: Union[str, Path]) -> WorldMap:
    world = deserialize(Path(path).read_bytes())
    logger.info("Map loaded from %s (%s)", path, world.statistics())
    return world
