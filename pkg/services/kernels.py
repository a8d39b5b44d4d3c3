"""
Built-in kernels registered under the type names used in config files:
SyntheticFrameSource, Passthrough, Grayscale, Combiner and LatencySink.
"""

import hashlib
import threading
import time
from typing import Any, Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config import defaults
from models import FrameSpec, LatencyRecord, PixelFormat, SyncMode
from services.errors import FormatMismatch
from services.frame_buffer import Message, Payload, frame_length, now_ns
from services.kernel_runtime import Kernel, Outputs, in_port, out_port, register_kernel


# ==================== SOURCE PARAMETERS ====================

class FillMode(BaseModel):
    """How a synthetic source fills its frames"""
    model_config = ConfigDict(frozen=True)

    kind: str = Field("constant", pattern="^(constant|gradient|random)$")
    value: int = Field(0, ge=0, description="Byte value (constant) or seed (random)")

    @model_validator(mode="before")
    @classmethod
    def parse_shorthand(cls, raw: Any) -> Any:
        # accepted: 7, "constant:7", "gradient", "random:42", {"random": 42}
        if isinstance(raw, int):
            return {"kind": "constant", "value": raw}
        if isinstance(raw, str):
            kind, _, value = raw.partition(":")
            return {"kind": kind.strip().lower(), "value": int(value) if value else 0}
        if isinstance(raw, dict) and len(raw) == 1 and "kind" not in raw:
            (kind, value), = raw.items()
            return {"kind": str(kind).lower(), "value": int(value or 0)}
        return raw

    @model_validator(mode="after")
    def check_constant_byte(self) -> "FillMode":
        if self.kind == "constant" and self.value > 255:
            raise ValueError(f"constant fill must be a byte value, got {self.value}")
        return self


class SourceParams(BaseModel):
    """Parameters of SyntheticFrameSource"""
    model_config = ConfigDict(extra="forbid")

    resolution: Optional[str] = Field(None, description="'720p'..'2160p' or 'WIDTHxHEIGHT'")
    width: Optional[int] = Field(None, gt=0)
    height: Optional[int] = Field(None, gt=0)
    format: PixelFormat = PixelFormat.RGB8
    fps: float = Field(0.0, ge=0, description="0 = unpaced")
    frame_budget: Optional[int] = Field(None, ge=1, description="None = unbounded")
    fill: FillMode = Field(default_factory=FillMode)

    @field_validator("format", mode="before")
    @classmethod
    def normalize_format(cls, value: Any) -> Any:
        return value.upper() if isinstance(value, str) else value

    @model_validator(mode="after")
    def check_geometry(self) -> "SourceParams":
        if self.resolution is None and (self.width is None or self.height is None):
            raise ValueError("source needs 'resolution' or both 'width' and 'height'")
        self.frame_spec  # raises on unknown resolution names
        return self

    @property
    def frame_spec(self) -> FrameSpec:
        if self.resolution is not None:
            return FrameSpec.from_resolution(self.resolution, self.format)
        return FrameSpec(width=self.width, height=self.height, format=self.format)


# ==================== SOURCE ====================

@register_kernel
class SyntheticFrameSource(Kernel):
    """Emits synthetic frames, optionally paced and budgeted"""

    type_name = "SyntheticFrameSource"
    ports = (out_port("out"),)

    def __init__(self, name: str, **params: Any):
        super().__init__(name, **params)
        self.config = SourceParams(**params)
        self.spec = self.config.frame_spec
        self.emitted = 0
        self._length = frame_length(self.spec)
        self._rng = np.random.default_rng(self.config.fill.value) if self.config.fill.kind == "random" else None
        self._gradient = (
            (np.arange(self._length) % 256).astype(np.uint8) if self.config.fill.kind == "gradient" else None
        )
        self._deadline: Optional[float] = None

    @classmethod
    def validate_params(cls, params: Dict[str, Any]) -> None:
        SourceParams(**params)

    @property
    def finished(self) -> bool:
        budget = self.config.frame_budget
        return budget is not None and self.emitted >= budget

    def set_budget(self, frames: Optional[int]) -> None:
        self.config = self.config.model_copy(update={"frame_budget": frames})

    def pace(self, stop: threading.Event) -> None:
        # sleep until the deadline; a late frame shifts the schedule instead of bursting
        if self.config.fps <= 0:
            return
        period = 1.0 / self.config.fps
        now = time.monotonic()
        if self._deadline is not None and now < self._deadline:
            stop.wait(self._deadline - now)
        self._deadline = max(self._deadline or 0.0, time.monotonic()) + period

    def _fill(self, seq: int) -> np.ndarray:
        fill = self.config.fill
        if fill.kind == "random":
            return self._rng.integers(0, 256, size=self._length, dtype=np.uint8)
        if fill.kind == "gradient":
            return self._gradient + np.uint8(seq % 256)
        return np.full(self._length, fill.value, dtype=np.uint8)

    def next_frame(self) -> Message:
        data = self._fill(self.emitted)
        message = Message(seq=self.emitted, created_ns=now_ns(), frame=self.spec, payload=Payload.wrap(data))
        self.emitted += 1
        return message

    def step(self, inputs: Dict[str, Optional[Message]]) -> Optional[Outputs]:
        if self.finished:
            return None
        return {"out": [self.next_frame()]}


# ==================== TRANSFORMS ====================

@register_kernel
class Passthrough(Kernel):
    """Forwards every message unchanged; local bindings keep the alloc_id"""

    type_name = "Passthrough"
    ports = (in_port("in"), out_port("out"))

    def step(self, inputs: Dict[str, Optional[Message]]) -> Optional[Outputs]:
        return {"out": [inputs["in"].derive()]}


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Per-pixel floor((r + g + b) / 3)"""
    pixels = rgb.reshape(-1, 3)
    return (pixels.sum(axis=1, dtype=np.uint16) // 3).astype(np.uint8)


@register_kernel
class Grayscale(Kernel):
    """RGB8 → GRAY8 by integer mean of the three channels"""

    type_name = "Grayscale"
    ports = (in_port("in"), out_port("out"))

    def step(self, inputs: Dict[str, Optional[Message]]) -> Optional[Outputs]:
        message = inputs["in"]
        if message.frame.format != PixelFormat.RGB8:
            raise FormatMismatch(f"Grayscale needs RGB8 input, got {message.frame.format.value}")
        frame = FrameSpec(width=message.frame.width, height=message.frame.height, format=PixelFormat.GRAY8)
        gray = Payload.wrap(to_grayscale(message.payload.data))
        return {"out": [message.derive(frame=frame, payload=gray)]}


@register_kernel
class Combiner(Kernel):
    """
    Fan-in of a BLOCKING stream `a` and a NON_BLOCKING side stream `b`

    Emits a's payload; meta records whether b was present and its seq.
    """

    type_name = "Combiner"
    ports = (in_port("a"), in_port("b", SyncMode.NON_BLOCKING), out_port("out"))

    def step(self, inputs: Dict[str, Optional[Message]]) -> Optional[Outputs]:
        a, b = inputs["a"], inputs.get("b")
        out = a.derive()
        out.meta["b_present"] = b is not None
        out.meta["b_seq"] = b.seq if b is not None else None
        return {"out": [out]}


# ==================== SINK ====================

@register_kernel
class LatencySink(Kernel):
    """
    Stamps arrival time and records one LatencyRecord per message

    Params:
        record_cap: records kept in memory (running count/mean continue past it)
        keep_seqs: sequence numbers whose messages are retained for inspection
        digest: keep a SHA-256 over all received payload bytes
    """

    type_name = "LatencySink"
    ports = (in_port("in"),)

    def __init__(self, name: str, record_cap: int = defaults.SINK_RECORD_CAP,
                 keep_seqs: Union[List[int], None] = None, digest: bool = False, **params: Any):
        super().__init__(name, **params)
        self.record_cap = record_cap
        self.records: List[LatencyRecord] = []
        self.count = 0
        self.seq_gaps = 0
        self.last_seq: Optional[int] = None
        self._e2e_total = 0
        self._keep = set(keep_seqs or ())
        self.kept: Dict[int, Message] = {}
        self.meta_log: List[Dict[str, Any]] = []
        self._hash = hashlib.sha256() if digest else None

    @classmethod
    def validate_params(cls, params: Dict[str, Any]) -> None:
        unknown = set(params) - {"record_cap", "keep_seqs", "digest"}
        if unknown:
            raise ValueError(f"unknown LatencySink params {sorted(unknown)}")
        if int(params.get("record_cap", 1)) < 0:
            raise ValueError("record_cap must be >= 0")

    @property
    def mean_e2e_ns(self) -> Optional[float]:
        return self._e2e_total / self.count if self.count else None

    @property
    def digest(self) -> Optional[str]:
        return self._hash.hexdigest() if self._hash is not None else None

    def record(self, message: Message, arrival_ns: Optional[int] = None) -> LatencyRecord:
        arrival = now_ns() if arrival_ns is None else arrival_ns
        record = LatencyRecord(
            seq=message.seq,
            created_ns=message.created_ns,
            sent_ns=message.sent_ns or arrival,
            arrival_ns=arrival,
            alloc_id=message.alloc_id,
        )
        if self.last_seq is not None and message.seq != self.last_seq + 1:
            self.seq_gaps += 1
        self.last_seq = message.seq
        self.count += 1
        self._e2e_total += record.e2e_ns
        if len(self.records) < self.record_cap:
            self.records.append(record)
        if message.seq in self._keep:
            self.kept[message.seq] = message
        if message.meta and len(self.meta_log) < self.record_cap:
            self.meta_log.append({"seq": message.seq, **message.meta})
        if self._hash is not None:
            self._hash.update(message.payload.view())
        return record

    def step(self, inputs: Dict[str, Optional[Message]]) -> Optional[Outputs]:
        self.record(inputs["in"])
        return None
