"""
Pydantic models for pipeline configuration, run reports and benchmark tables
"""

import re
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config import defaults


# ==================== ENUMERATIONS ====================

class PixelFormat(str, Enum):
    """Pixel layout of a frame payload"""
    RGB8 = "RGB8"
    GRAY8 = "GRAY8"
    OPAQUE = "OPAQUE"

    @property
    def bytes_per_pixel(self) -> Optional[int]:
        return {"RGB8": 3, "GRAY8": 1}.get(self.value)


class Direction(str, Enum):
    IN = "IN"
    OUT = "OUT"


class SyncMode(str, Enum):
    BLOCKING = "BLOCKING"
    NON_BLOCKING = "NON_BLOCKING"


class OverflowPolicy(str, Enum):
    BLOCK = "BLOCK"
    DROP_OLDEST = "DROP_OLDEST"


class Placement(str, Enum):
    CLIENT = "CLIENT"
    SERVER = "SERVER"


class Role(str, Enum):
    CLIENT = "CLIENT"
    SERVER = "SERVER"
    ALL = "ALL"


class EdgeKind(str, Enum):
    LOCAL = "LOCAL"
    REMOTE = "REMOTE"


class CodecId(str, Enum):
    RAW = "RAW"
    RLE = "RLE"


class ChannelKind(str, Enum):
    ZEROCOPY = "ZEROCOPY"
    COPY = "COPY"


class TableFormat(str, Enum):
    CSV = "CSV"
    MARKDOWN = "MARKDOWN"


def _upper(value: Any) -> Any:
    return value.upper() if isinstance(value, str) else value


# ==================== FRAME MODELS ====================

RESOLUTIONS: Dict[str, tuple] = {
    "720p": (1280, 720),
    "1080p": (1920, 1080),
    "1440p": (2560, 1440),
    "2160p": (3840, 2160),
}

_WXH = re.compile(r"^(\d+)x(\d+)$")


class FrameSpec(BaseModel):
    """Frame geometry and pixel format"""
    model_config = ConfigDict(frozen=True)

    width: int = Field(..., gt=0, le=0xFFFFFFFF, description="Frame width in pixels")
    height: int = Field(..., gt=0, le=0xFFFFFFFF, description="Frame height in pixels")
    format: PixelFormat = Field(PixelFormat.RGB8, description="Pixel format")

    @field_validator("format", mode="before")
    @classmethod
    def normalize_format(cls, value: Any) -> Any:
        return _upper(value)

    @property
    def payload_size(self) -> Optional[int]:
        """width × height × bytes-per-pixel, or None for OPAQUE frames"""
        bpp = self.format.bytes_per_pixel
        return None if bpp is None else self.width * self.height * bpp

    @classmethod
    def from_resolution(cls, resolution: str, format: PixelFormat = PixelFormat.RGB8) -> "FrameSpec":
        """Build a spec from a named resolution ("720p") or "WIDTHxHEIGHT"."""
        if resolution in RESOLUTIONS:
            width, height = RESOLUTIONS[resolution]
        else:
            match = _WXH.match(resolution)
            if not match:
                raise ValueError(f"Unknown resolution: {resolution}")
            width, height = int(match.group(1)), int(match.group(2))
        return cls(width=width, height=height, format=format)


def resolution_sort_key(resolution: str) -> tuple:
    """Ascending pixel count, then name"""
    try:
        spec = FrameSpec.from_resolution(resolution)
        return (spec.width * spec.height, resolution)
    except ValueError:
        return (float("inf"), resolution)


# ==================== PIPELINE CONFIG MODELS ====================

_IDENT = r"[A-Za-z_][A-Za-z0-9_-]*"
_ENDPOINT = re.compile(rf"^({_IDENT})\.({_IDENT})$")


class TransportDecl(BaseModel):
    """Remote edge addresses; the SERVER side listens, the CLIENT side connects"""
    model_config = ConfigDict(extra="forbid")

    listen: Optional[str] = Field(None, description="host:port the SERVER side binds")
    connect: Optional[str] = Field(None, description="host:port the CLIENT side dials")

    @model_validator(mode="after")
    def check_one_address(self) -> "TransportDecl":
        if self.listen is None and self.connect is None:
            raise ValueError("transport needs 'listen' or 'connect'")
        return self

    @property
    def listen_address(self) -> str:
        return self.listen or self.connect

    @property
    def connect_address(self) -> str:
        return self.connect or self.listen


class KernelDecl(BaseModel):
    """One kernel instance in a deployment"""
    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., pattern=rf"^{_IDENT}$", description="Unique kernel name")
    type: str = Field(..., description="Registered kernel type name")
    placement: Placement = Field(Placement.CLIENT, description="Host class the kernel runs on")
    params: Dict[str, Any] = Field(default_factory=dict, description="Kernel parameters")

    @field_validator("placement", mode="before")
    @classmethod
    def normalize_placement(cls, value: Any) -> Any:
        return _upper(value)


class EdgeDecl(BaseModel):
    """A port-to-port connection"""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    src: str = Field(..., alias="from", description="Producing endpoint 'kernel.port'")
    dst: str = Field(..., alias="to", description="Consuming endpoint 'kernel.port'")
    kind: EdgeKind = Field(EdgeKind.LOCAL, description="LOCAL channel or REMOTE link")
    sync_mode: SyncMode = Field(
        SyncMode.BLOCKING, description="Firing semantics of the consuming port; defaults to the port's declared mode"
    )
    codec: CodecId = Field(CodecId.RAW, description="Payload codec (REMOTE only)")
    transport: Optional[TransportDecl] = Field(None, description="Link addresses (REMOTE only)")
    capacity: int = Field(defaults.CHANNEL_CAPACITY, ge=1, description="Channel capacity in messages")
    overflow_policy: OverflowPolicy = Field(
        OverflowPolicy(defaults.OVERFLOW_POLICY), description="Behaviour of a full channel"
    )

    @field_validator("kind", "sync_mode", "codec", "overflow_policy", mode="before")
    @classmethod
    def normalize_enums(cls, value: Any) -> Any:
        return _upper(value)

    @field_validator("src", "dst")
    @classmethod
    def check_endpoint(cls, value: str) -> str:
        if not _ENDPOINT.match(value):
            raise ValueError(f"endpoint must look like 'kernel.port', got '{value}'")
        return value

    @model_validator(mode="after")
    def check_remote_transport(self) -> "EdgeDecl":
        if self.kind == EdgeKind.REMOTE and self.transport is None:
            raise ValueError(f"REMOTE edge {self.src} -> {self.dst} needs a transport")
        return self

    @property
    def src_kernel(self) -> str:
        return self.src.split(".", 1)[0]

    @property
    def src_port(self) -> str:
        return self.src.split(".", 1)[1]

    @property
    def dst_kernel(self) -> str:
        return self.dst.split(".", 1)[0]

    @property
    def dst_port(self) -> str:
        return self.dst.split(".", 1)[1]

    @property
    def label(self) -> str:
        return f"{self.src} -> {self.dst}"


class PipelineConfig(BaseModel):
    """Deployment-time description of kernels, placements and edges"""
    model_config = ConfigDict(extra="forbid")

    name: Optional[str] = Field(None, description="Optional pipeline name")
    kernels: List[KernelDecl] = Field(default_factory=list)
    edges: List[EdgeDecl] = Field(default_factory=list)

    def kernel(self, name: str) -> Optional[KernelDecl]:
        return next((k for k in self.kernels if k.name == name), None)


class ValidationIssue(BaseModel):
    """One violated config invariant"""
    code: str = Field(..., description="Machine-greppable error code")
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


# ==================== LATENCY MODELS ====================

class LatencyRecord(BaseModel):
    """One received frame as seen by a sink"""
    seq: int
    created_ns: int
    sent_ns: int
    arrival_ns: int
    alloc_id: int

    @property
    def e2e_ns(self) -> int:
        return self.arrival_ns - self.created_ns

    @property
    def transfer_ns(self) -> int:
        return self.arrival_ns - self.sent_ns


class LatencySummary(BaseModel):
    """Mean and nearest-rank percentiles in milliseconds"""
    mean_ms: float
    p50_ms: float
    p99_ms: float
    n: int = Field(..., ge=1)


# ==================== RUN REPORT MODELS ====================

class KernelCounters(BaseModel):
    """Per-kernel counters collected during a run"""
    name: str
    type: str
    placement: Placement
    state: str = "CREATED"
    steps_fired: int = Field(0, ge=0)
    messages_in: int = Field(0, ge=0)
    messages_out: int = Field(0, ge=0)
    drops: int = Field(0, ge=0)
    failed: bool = False
    error: Optional[str] = None


class SinkReport(BaseModel):
    """Latency data collected by one sink"""
    name: str
    received: int = Field(0, ge=0)
    seq_gaps: int = Field(0, ge=0)
    summary: Optional[LatencySummary] = None
    records: List[LatencyRecord] = Field(default_factory=list)
    digest: Optional[str] = Field(None, description="SHA-256 over received payload bytes, when enabled")


class LinkCounters(BaseModel):
    """One link endpoint as seen by its pump"""
    edge: str = Field(..., description="Edge label 'src -> dst'")
    direction: Direction = Field(..., description="OUT sends to the peer, IN receives from it")
    frames: int = Field(0, ge=0, description="DATA frames moved")
    bytes: int = Field(0, ge=0, description="Bytes on the wire, headers included")
    discarded: int = Field(0, ge=0, description="Frames received after the local consumer went away")
    error: Optional[str] = None


class RunReport(BaseModel):
    """Outcome of run_for()"""
    role: Role
    duration_s: float = Field(0.0, ge=0)
    kernels: List[KernelCounters] = Field(default_factory=list)
    sinks: List[SinkReport] = Field(default_factory=list)
    links: List[LinkCounters] = Field(default_factory=list)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def counters(self, name: str) -> Optional[KernelCounters]:
        return next((k for k in self.kernels if k.name == name), None)

    def sink(self, name: str) -> Optional[SinkReport]:
        return next((s for s in self.sinks if s.name == name), None)

    def render_text(self) -> str:
        lines = [
            "xrpipe run report",
            f"role: {self.role.value.lower()}",
            f"duration_s: {self.duration_s:.3f}",
            f"status: {'ok' if self.ok else 'failed'}",
        ]
        if self.error:
            lines.append(f"error: {self.error}")
        lines.append("kernels:")
        lines.append("  name type placement state fired in out drops")
        for k in self.kernels:
            lines.append(
                f"  {k.name} {k.type} {k.placement.value.lower()} {k.state.lower()} "
                f"{k.steps_fired} {k.messages_in} {k.messages_out} {k.drops}"
            )
        lines.append("sinks:")
        lines.append("  name received gaps mean_ms p50_ms p99_ms")
        for s in self.sinks:
            if s.summary:
                stats = f"{s.summary.mean_ms:.3f} {s.summary.p50_ms:.3f} {s.summary.p99_ms:.3f}"
            else:
                stats = "- - -"
            lines.append(f"  {s.name} {s.received} {s.seq_gaps} {stats}")
        if self.links:
            lines.append("links:")
            lines.append("  edge direction frames bytes discarded")
            for link in self.links:
                suffix = f" error: {link.error}" if link.error else ""
                lines.append(
                    f"  {link.edge} {link.direction.value.lower()} {link.frames} {link.bytes} {link.discarded}{suffix}"
                )
        digests = [s for s in self.sinks if s.digest]
        if digests:
            lines.append("digests:")
            lines.extend(f"  {s.name} sha256:{s.digest}" for s in digests)
        return "\n".join(lines) + "\n"


# ==================== BENCHMARK MODELS ====================

class BenchCell(BaseModel):
    """One (kind, resolution) measurement"""
    kind: str = Field(..., description="Row label, e.g. 'zerocopy' or 'remote-rle'")
    resolution: str
    mean_ms: float
    p50_ms: float
    p99_ms: float
    n: int = Field(..., ge=1)
    kernels: int = Field(2, description="Kernels in the measured pipeline")
    links: int = Field(1, description="Data links in the measured pipeline")
    bytes_per_frame: Optional[int] = Field(None, description="Bytes on the wire per frame (remote)")
    alloc_id_matches: Optional[int] = Field(None, description="Frames whose alloc_id survived the transfer (local)")
    in_order: bool = True


class BenchTable(BaseModel):
    """Benchmark rows (kinds) × columns (resolutions)"""
    cells: List[BenchCell] = Field(default_factory=list)

    def kinds(self) -> List[str]:
        """Row labels in declaration order"""
        seen: List[str] = []
        for cell in self.cells:
            if cell.kind not in seen:
                seen.append(cell.kind)
        return seen

    def resolutions(self) -> List[str]:
        return sorted({c.resolution for c in self.cells}, key=resolution_sort_key)

    def cell(self, kind: str, resolution: str) -> Optional[BenchCell]:
        return next((c for c in self.cells if c.kind == kind and c.resolution == resolution), None)
