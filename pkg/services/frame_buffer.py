"""
Frame payloads and messages

A Payload owns one numpy uint8 buffer and an allocation identity that is
never reused within the process. Local channels hand the same Payload object
from producer to consumer, so an unchanged alloc_id is the witness that no
payload bytes were copied.
"""

import itertools
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional

import numpy as np

from models import FrameSpec, PixelFormat
from services.errors import InvalidSize


_alloc_ids = itertools.count(1)
_alloc_lock = threading.Lock()

_copy_lock = threading.Lock()
_copy_count = 0


def now_ns() -> int:
    """Monotonic clock in nanoseconds"""
    return time.monotonic_ns()


def _next_alloc_id() -> int:
    with _alloc_lock:
        return next(_alloc_ids)


def _record_copy() -> None:
    global _copy_count
    with _copy_lock:
        _copy_count += 1


def copy_counter() -> int:
    """Number of payload byte copies performed so far in this process"""
    with _copy_lock:
        return _copy_count


@dataclass(eq=False, slots=True)
class Payload:
    """A uniquely identified byte buffer"""

    alloc_id: int
    data: np.ndarray

    @classmethod
    def wrap(cls, data: np.ndarray) -> "Payload":
        """Adopt an existing uint8 buffer under a fresh alloc_id (no copy)."""
        if data.dtype != np.uint8 or data.ndim != 1:
            data = np.ascontiguousarray(data, dtype=np.uint8).reshape(-1)
        return cls(alloc_id=_next_alloc_id(), data=data)

    def __len__(self) -> int:
        return int(self.data.size)

    @property
    def frozen(self) -> bool:
        return not self.data.flags.writeable

    def freeze(self) -> None:
        """Make the contents immutable; called on first send."""
        self.data.flags.writeable = False

    def writable_copy(self) -> "Payload":
        """Copy-on-write: a mutable duplicate under a new alloc_id."""
        _record_copy()
        return Payload(alloc_id=_next_alloc_id(), data=self.data.copy())

    def view(self) -> memoryview:
        return memoryview(self.data)


def payload_alloc(length: int) -> Payload:
    """
    Allocate a zero-initialised payload

    Args:
        length: Size in bytes (must be positive)

    Returns:
        Payload with a fresh alloc_id
    """
    if length <= 0:
        raise InvalidSize(f"payload length must be positive, got {length}")
    return Payload(alloc_id=_next_alloc_id(), data=np.zeros(length, dtype=np.uint8))


@dataclass(eq=False, slots=True)
class Message:
    """A timestamped, sequence-numbered frame"""

    seq: int
    created_ns: int
    frame: FrameSpec
    payload: Payload
    sent_ns: int = 0
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def alloc_id(self) -> int:
        return self.payload.alloc_id

    def derive(self, **changes: Any) -> "Message":
        """New message sharing this one's payload unless one is given."""
        changes.setdefault("sent_ns", 0)
        changes.setdefault("meta", dict(self.meta))
        return replace(self, **changes)


def frame_length(spec: FrameSpec) -> int:
    """Payload size of a frame; OPAQUE frames carry width × height raw bytes."""
    size = spec.payload_size
    return spec.width * spec.height if size is None else size


def make_frame(spec: FrameSpec, seq: int, fill: int, created_ns: Optional[int] = None) -> Message:
    """
    Create a synthetic frame with every byte set to `fill`

    Args:
        spec: Frame geometry and format
        seq: Sequence number
        fill: Byte value 0..255

    Returns:
        Message stamped with the current monotonic time
    """
    if not 0 <= fill <= 255:
        raise ValueError(f"fill must be a byte value, got {fill}")
    payload = Payload(alloc_id=_next_alloc_id(), data=np.full(frame_length(spec), fill, dtype=np.uint8))
    return Message(
        seq=seq,
        created_ns=now_ns() if created_ns is None else created_ns,
        frame=spec,
        payload=payload,
    )


def check_message(message: Message) -> None:
    """Raise ValueError when payload length disagrees with the frame spec."""
    expected = message.frame.payload_size
    if message.frame.format != PixelFormat.OPAQUE and len(message.payload) != expected:
        raise ValueError(
            f"payload of {len(message.payload)} bytes does not match "
            f"{message.frame.width}x{message.frame.height} {message.frame.format.value}"
        )
