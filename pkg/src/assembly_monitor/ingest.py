"""Detection transport: wire codec, ``.detlog`` files, frame synchronization, TCP ingest.

Wire frame (all integers big-endian, floats IEEE-754 binary64)::

    u32 body_length
    body:
      u8  version (1)
      u8  camera_id length, camera_id bytes (UTF-8, <= 32)
      u64 frame_index
      u64 timestamp (microseconds since epoch)
      u32 detection count
      per detection:
        u32 class_id
        f64 x, y, w, h
        f64 confidence
        u32 sample count
        f64 u, v, depth  (per sample)

A ``.detlog`` file is the magic ``b"DETLOG1\\n"`` followed by records, each
``u8 tag length``, the camera tag, then one wire frame.
"""

from __future__ import annotations

import asyncio
import logging
import os
import struct
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Iterator, Sequence

import numpy as np

from .fusion import Detection2D

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_BODY = 16 * 1024 * 1024
MAX_CAMERA_ID = 32
DEFAULT_SYNC_WINDOW_US = 50_000
SYNC_WINDOW_ENV = "ASSEMBLY_MONITOR_SYNC_WINDOW_US"
LOG_MAGIC = b"DETLOG1\n"

_LEN = struct.Struct(">I")
_HEAD = struct.Struct(">QQI")  # frame_index, timestamp, count
_DET = struct.Struct(">I5dI")  # class_id, bbox, confidence, n_samples
_F8 = np.dtype(">f8")


class ProtocolError(Exception):
    pass


class TruncatedFrameError(ProtocolError):
    pass


class VersionMismatchError(ProtocolError):
    pass


class LengthOverflowError(ProtocolError):
    pass


class MalformedFrameError(ProtocolError):
    pass


class LogCorruptError(ProtocolError):
    def __init__(self, offset: int, reason: str):
        self.offset = offset
        super().__init__(f"corrupt record at byte {offset}: {reason}")


@dataclass(frozen=True, eq=False)
class DetectionMessage:
    camera_id: str
    frame_index: int
    timestamp: int
    detections: tuple[Detection2D, ...] = ()
    version: int = PROTOCOL_VERSION

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))

    def __eq__(self, other):
        if not isinstance(other, DetectionMessage):
            return NotImplemented
        return ((self.version, self.camera_id, self.frame_index, self.timestamp)
                == (other.version, other.camera_id, other.frame_index, other.timestamp)
                and self.detections == other.detections)


def encode_body(m: DetectionMessage) -> bytes:
    cam = m.camera_id.encode("utf-8")
    if len(cam) > MAX_CAMERA_ID:
        raise ValueError(f"camera id longer than {MAX_CAMERA_ID} bytes")
    parts = [bytes([m.version, len(cam)]), cam,
             _HEAD.pack(m.frame_index, m.timestamp, len(m.detections))]
    for d in m.detections:
        s = d.depth_samples
        parts.append(_DET.pack(d.class_id, *d.bbox, d.confidence, len(s)))
        parts.append(np.ascontiguousarray(s, dtype=_F8).tobytes())
    body = b"".join(parts)
    if len(body) > MAX_BODY:
        raise LengthOverflowError(f"message body of {len(body)} bytes exceeds {MAX_BODY}")
    return body


def encode_message(m: DetectionMessage) -> bytes:
    body = encode_body(m)
    return _LEN.pack(len(body)) + body


def decode_body(body: bytes) -> DetectionMessage:
    mv = memoryview(body)
    if len(mv) < 2:
        raise TruncatedFrameError("body shorter than its fixed header")
    version, id_len = mv[0], mv[1]
    if version != PROTOCOL_VERSION:
        raise VersionMismatchError(f"protocol version {version}, expected {PROTOCOL_VERSION}")
    if id_len > MAX_CAMERA_ID:
        raise MalformedFrameError(f"camera id length {id_len} exceeds {MAX_CAMERA_ID}")
    pos = 2 + id_len
    if len(mv) < pos + _HEAD.size:
        raise TruncatedFrameError("body shorter than its fixed header")
    cam = bytes(mv[2:pos]).decode("utf-8")
    frame_index, ts, count = _HEAD.unpack_from(mv, pos)
    pos += _HEAD.size
    heads, chunks = [], []
    for _ in range(count):
        if len(mv) < pos + _DET.size:
            raise TruncatedFrameError("detection record cut short")
        cls, x, y, w, h, conf, n = _DET.unpack_from(mv, pos)
        if not 0.0 <= conf <= 1.0:
            raise MalformedFrameError(f"confidence {conf} outside [0, 1]")
        pos += _DET.size
        nbytes = n * 24
        if len(mv) < pos + nbytes:
            raise TruncatedFrameError("depth samples cut short")
        heads.append((cls, (x, y, w, h), conf, n))
        chunks.append(mv[pos:pos + nbytes])
        pos += nbytes
    if pos != len(mv):
        raise MalformedFrameError(f"{len(mv) - pos} trailing bytes after message")
    # One byte-swapping copy for all samples, then per-detection views.
    flat = np.frombuffer(b"".join(chunks), _F8).astype(np.float64).reshape(-1, 3)
    dets, start = [], 0
    for cls, bbox, conf, n in heads:
        dets.append(Detection2D.trusted(cls, bbox, conf, flat[start:start + n]))
        start += n
    return DetectionMessage(cam, frame_index, ts, tuple(dets), version)


def decode_message(data: bytes) -> DetectionMessage:
    """Decode one complete length-prefixed frame."""
    if len(data) < _LEN.size:
        raise TruncatedFrameError("missing length prefix")
    (n,) = _LEN.unpack_from(data)
    if n > MAX_BODY:
        raise LengthOverflowError(f"declared body length {n} exceeds {MAX_BODY}")
    if len(data) - _LEN.size < n:
        raise TruncatedFrameError(f"declared {n} body bytes, got {len(data) - _LEN.size}")
    if len(data) - _LEN.size > n:
        raise MalformedFrameError("bytes beyond the declared frame")
    return decode_body(data[_LEN.size:])


def read_frame(stream: BinaryIO) -> bytes | None:
    """Read one frame body from a blocking stream; ``None`` on clean EOF.

    An oversized frame is skipped to its boundary before
    :class:`LengthOverflowError` is raised, so the stream stays usable.
    """
    head = stream.read(_LEN.size)
    if not head:
        return None
    if len(head) < _LEN.size:
        raise TruncatedFrameError("stream ended inside a length prefix")
    (n,) = _LEN.unpack(head)
    if n > MAX_BODY:
        remaining = n
        while remaining:
            chunk = stream.read(min(remaining, 1 << 20))
            if not chunk:
                break
            remaining -= len(chunk)
        raise LengthOverflowError(f"declared body length {n} exceeds {MAX_BODY}")
    body = stream.read(n)
    if len(body) < n:
        raise TruncatedFrameError(f"stream ended after {len(body)} of {n} body bytes")
    return body


async def read_frame_async(reader: asyncio.StreamReader) -> bytes | None:
    try:
        head = await reader.readexactly(_LEN.size)
    except asyncio.IncompleteReadError as e:
        if not e.partial:
            return None
        raise TruncatedFrameError("stream ended inside a length prefix") from None
    (n,) = _LEN.unpack(head)
    if n > MAX_BODY:
        remaining = n
        while remaining:
            chunk = await reader.read(min(remaining, 1 << 20))
            if not chunk:
                break
            remaining -= len(chunk)
        raise LengthOverflowError(f"declared body length {n} exceeds {MAX_BODY}")
    try:
        return await reader.readexactly(n)
    except asyncio.IncompleteReadError as e:
        raise TruncatedFrameError(f"stream ended after {len(e.partial)} of {n} body bytes") from None


# --------------------------------------------------------------------------
# Log files


class LogWriter:
    def __init__(self, path: str | Path):
        self._fh = open(path, "wb")
        self._fh.write(LOG_MAGIC)

    def write(self, m: DetectionMessage) -> None:
        tag = m.camera_id.encode("utf-8")
        self._fh.write(bytes([len(tag)]) + tag + encode_message(m))

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_log(path: str | Path, messages: Iterable[DetectionMessage]) -> int:
    n = 0
    with LogWriter(path) as w:
        for m in messages:
            w.write(m)
            n += 1
    return n


def read_log(path: str | Path) -> Iterator[DetectionMessage]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data:
        return
    if not data.startswith(LOG_MAGIC):
        raise LogCorruptError(0, "missing DETLOG1 header")
    pos = len(LOG_MAGIC)
    while pos < len(data):
        start = pos
        tag_len = data[pos]
        pos += 1
        tag = data[pos:pos + tag_len]
        pos += tag_len
        if pos + _LEN.size > len(data):
            raise LogCorruptError(start, "record cut short")
        (n,) = _LEN.unpack_from(data, pos)
        if n > MAX_BODY:
            raise LogCorruptError(start, f"body length {n} exceeds {MAX_BODY}")
        end = pos + _LEN.size + n
        if end > len(data):
            raise LogCorruptError(start, "record cut short")
        try:
            m = decode_body(data[pos + _LEN.size:end])
        except ProtocolError as e:
            raise LogCorruptError(start, str(e)) from None
        if m.camera_id.encode("utf-8") != tag:
            raise LogCorruptError(start, f"tag {tag!r} does not match camera {m.camera_id!r}")
        pos = end
        yield m


# --------------------------------------------------------------------------
# Synchronization


@dataclass(frozen=True)
class FrameBundle:
    bundle_time: int
    per_camera: dict[str, DetectionMessage]
    partial: bool = False

    def detections(self) -> dict[str, tuple[Detection2D, ...]]:
        return {c: m.detections for c, m in self.per_camera.items()}


def sync_window_from_env(default: int = DEFAULT_SYNC_WINDOW_US) -> int:
    raw = os.environ.get(SYNC_WINDOW_ENV)
    return int(raw) if raw else default


@dataclass
class Synchronizer:
    """Event-time grouping of per-camera message streams into frame bundles.

    The earliest queued timestamp anchors a bundle; each camera contributes
    its head message if it lies within ``window`` of the anchor. A bundle
    is emitted only once every camera has either a queued message or has
    been closed/stalled, so the output depends on the per-camera sequences
    alone, not on how they interleave.
    """

    cameras: Sequence[str]
    window: int = DEFAULT_SYNC_WINDOW_US
    queues: dict = field(init=False)
    closed: set = field(init=False, default_factory=set)
    stalled: set = field(init=False, default_factory=set)
    last_time: int | None = field(init=False, default=None)
    last_frame: dict = field(init=False, default_factory=dict)
    late_drops: int = field(init=False, default=0)
    unknown_drops: int = field(init=False, default=0)

    def __post_init__(self):
        if self.window <= 0:
            raise ValueError("sync window must be positive")
        self.cameras = list(self.cameras)
        self.queues = {c: deque() for c in self.cameras}

    def push(self, m: DetectionMessage) -> list[FrameBundle]:
        q = self.queues.get(m.camera_id)
        if q is None:
            self.unknown_drops += 1
            return []
        self.stalled.discard(m.camera_id)
        prev = self.last_frame.get(m.camera_id)
        newest = q[-1].timestamp if q else None
        if ((prev is not None and m.frame_index <= prev)
                or (self.last_time is not None and m.timestamp < self.last_time)
                or (newest is not None and m.timestamp < newest)):
            self.late_drops += 1
            return []
        self.last_frame[m.camera_id] = m.frame_index
        q.append(m)
        return self._drain()

    def close(self, camera_id: str) -> list[FrameBundle]:
        self.closed.add(camera_id)
        return self._drain()

    def mark_stalled(self, camera_ids: Iterable[str]) -> list[FrameBundle]:
        self.stalled.update(c for c in camera_ids if not self.queues.get(c))
        return self._drain()

    def flush(self) -> list[FrameBundle]:
        self.closed.update(self.cameras)
        return self._drain()

    def _drain(self) -> list[FrameBundle]:
        out = []
        while True:
            heads = [q[0].timestamp for q in self.queues.values() if q]
            if not heads:
                break
            anchor = min(heads)
            members = {}
            for cam in self.cameras:
                q = self.queues[cam]
                if q:
                    if q[0].timestamp <= anchor + self.window:
                        members[cam] = q[0]
                elif cam not in self.closed and cam not in self.stalled:
                    return out
            for cam in members:
                self.queues[cam].popleft()
            self.last_time = anchor
            out.append(FrameBundle(anchor, members, len(members) < len(self.cameras)))
        return out


def synchronize(streams: dict[str, Sequence[DetectionMessage]],
                window: int = DEFAULT_SYNC_WINDOW_US,
                cameras: Sequence[str] | None = None) -> list[FrameBundle]:
    """Offline grouping of complete per-camera sequences."""
    sync = Synchronizer(cameras if cameras is not None else sorted(streams), window)
    out = []
    for cam in sync.cameras:
        for m in streams.get(cam, ()):
            out += sync.push(m)
    out += sync.flush()
    return out


def replay(log_path: str | Path, cameras: Sequence[str], speed: float = 0.0,
           window: int = DEFAULT_SYNC_WINDOW_US,
           sleep: Callable[[float], None] = time.sleep) -> Iterator[FrameBundle]:
    """Bundles from a ``.detlog`` file, paced at ``speed`` x recorded time (0 = unpaced)."""
    sync = Synchronizer(cameras, window)
    t0_rec = t0_wall = None

    def paced(bundles):
        nonlocal t0_rec, t0_wall
        for b in bundles:
            if speed > 0:
                if t0_rec is None:
                    t0_rec, t0_wall = b.bundle_time, time.monotonic()
                due = t0_wall + (b.bundle_time - t0_rec) / 1e6 / speed
                delay = due - time.monotonic()
                if delay > 0:
                    sleep(delay)
            yield b

    for m in read_log(log_path):
        yield from paced(sync.push(m))
    yield from paced(sync.flush())


# --------------------------------------------------------------------------
# TCP ingest


class IngestServer:
    """Accepts camera connections and feeds a single synchronizer.

    Each connection gets its own receiver task; receivers share one bounded
    queue, so a slow consumer blocks producers instead of dropping messages.
    """

    def __init__(self, cameras: Sequence[str], on_bundle: Callable[[FrameBundle], None],
                 window: int = DEFAULT_SYNC_WINDOW_US, queue_size: int = 1024,
                 stall_timeout: float = 2.0, expected_connections: int | None = None):
        self.sync = Synchronizer(cameras, window)
        self.on_bundle = on_bundle
        self.queue_size = queue_size
        self.stall_timeout = stall_timeout
        self.expected_connections = expected_connections
        self.protocol_errors = 0
        self._closed_connections = 0
        self._server: asyncio.base_events.Server | None = None
        self._queue: asyncio.Queue | None = None
        self.address: tuple[str, int] | None = None

    async def _receive(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        seen: set[str] = set()
        try:
            while True:
                try:
                    body = await read_frame_async(reader)
                except LengthOverflowError as e:
                    self.protocol_errors += 1
                    log.warning("dropped frame: %s", e)
                    continue
                if body is None:
                    break
                try:
                    m = decode_body(body)
                except (VersionMismatchError, MalformedFrameError, TruncatedFrameError) as e:
                    self.protocol_errors += 1
                    log.warning("dropped frame: %s", e)
                    continue
                seen.add(m.camera_id)
                await self._queue.put(("msg", m))
        except (TruncatedFrameError, ConnectionError) as e:
            self.protocol_errors += 1
            log.warning("connection ended abnormally: %s", e)
        finally:
            writer.close()
            await self._queue.put(("closed", seen))

    def _emit(self, bundles):
        for b in bundles:
            self.on_bundle(b)

    async def _consume(self):
        while True:
            try:
                kind, item = await asyncio.wait_for(self._queue.get(), self.stall_timeout)
            except asyncio.TimeoutError:
                self._emit(self.sync.mark_stalled(self.sync.cameras))
                continue
            if kind == "msg":
                self._emit(self.sync.push(item))
            else:
                for cam in item:
                    self._emit(self.sync.close(cam))
                self._closed_connections += 1
                if (self.expected_connections is not None
                        and self._closed_connections >= self.expected_connections):
                    self._emit(self.sync.flush())
                    return

    async def serve(self, host: str = "127.0.0.1", port: int = 0,
                    started: Callable[[tuple[str, int]], None] | None = None):
        self._queue = asyncio.Queue(self.queue_size)
        self._server = await asyncio.start_server(self._receive, host, port)
        self.address = self._server.sockets[0].getsockname()[:2]
        if started is not None:
            started(self.address)
        try:
            await self._consume()
        finally:
            self._server.close()
            await self._server.wait_closed()


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


async def send_messages(host: str, port: int, messages: Iterable[DetectionMessage]) -> None:
    """Client side: stream messages over one connection."""
    reader, writer = await asyncio.open_connection(host, port)
    for m in messages:
        writer.write(encode_message(m))
        await writer.drain()
    writer.close()
    await writer.wait_closed()
