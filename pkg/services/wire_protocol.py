"""
Wire protocol for remote ports

Every frame on a link starts with a fixed 36-byte big-endian header:

    offset size field
    0      4    magic "XRSP"
    4      1    version (1)
    5      1    msg_type   0=DATA 1=HELLO 2=BYE
    6      1    codec      0=RAW  1=RLE
    7      1    pixel fmt  0=RGB8 1=GRAY8 255=OPAQUE
    8      8    seq
    16     8    created_ns
    24     4    width
    28     4    height
    32     4    payload_len (bytes that follow, after compression)

sent_ns is host-local and never transmitted.
"""

import struct
from enum import IntEnum
from typing import Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from config import defaults
from models import CodecId, FrameSpec, PixelFormat
from services.errors import BadMagic, MalformedHeader, SizeMismatch, Truncated, UnsupportedVersion
from services.frame_buffer import Message, Payload
from services.rle_codec import rle_decode, rle_encode

MAGIC = b"XRSP"
VERSION = 1
HEADER = struct.Struct(">4sBBBBQQIII")
HEADER_SIZE = HEADER.size

U32 = 0xFFFFFFFF
U64 = 0xFFFFFFFFFFFFFFFF


class MsgType(IntEnum):
    DATA = 0
    HELLO = 1
    BYE = 2


CODEC_WIRE = {CodecId.RAW: 0, CodecId.RLE: 1}
WIRE_CODEC = {v: k for k, v in CODEC_WIRE.items()}

FORMAT_WIRE = {PixelFormat.RGB8: 0, PixelFormat.GRAY8: 1, PixelFormat.OPAQUE: 255}
WIRE_FORMAT = {v: k for k, v in FORMAT_WIRE.items()}


class WireHeader(BaseModel):
    """Decoded form of the 36-byte frame header"""
    model_config = ConfigDict(frozen=True)

    version: int = Field(VERSION, ge=0, le=255)
    msg_type: MsgType = MsgType.DATA
    codec: CodecId = CodecId.RAW
    pixel_format: PixelFormat = PixelFormat.OPAQUE
    seq: int = Field(0, ge=0, le=U64)
    created_ns: int = Field(0, ge=0, le=U64)
    width: int = Field(0, ge=0, le=U32)
    height: int = Field(0, ge=0, le=U32)
    payload_len: int = Field(0, ge=0, le=U32)


def encode_header(header: WireHeader) -> bytes:
    return HEADER.pack(
        MAGIC,
        header.version,
        int(header.msg_type),
        CODEC_WIRE[header.codec],
        FORMAT_WIRE[header.pixel_format],
        header.seq,
        header.created_ns,
        header.width,
        header.height,
        header.payload_len,
    )


def decode_header(data: Union[bytes, bytearray, memoryview]) -> WireHeader:
    """
    Parse the first 36 bytes of `data`

    Raises:
        Truncated: fewer than 36 bytes
        BadMagic / UnsupportedVersion / MalformedHeader
    """
    if len(data) < HEADER_SIZE:
        raise Truncated(f"header needs {HEADER_SIZE} bytes, got {len(data)}")
    magic, version, msg_type, codec, pixel_format, seq, created_ns, width, height, payload_len = (
        HEADER.unpack_from(data)
    )
    if magic != MAGIC:
        raise BadMagic(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported protocol version {version}")
    try:
        return WireHeader(
            version=version,
            msg_type=MsgType(msg_type),
            codec=WIRE_CODEC[codec],
            pixel_format=WIRE_FORMAT[pixel_format],
            seq=seq,
            created_ns=created_ns,
            width=width,
            height=height,
            payload_len=payload_len,
        )
    except (ValueError, KeyError) as e:
        raise MalformedHeader(
            f"unknown msg_type/codec/pixel_format ({msg_type}, {codec}, {pixel_format})"
        ) from e


def control_header(msg_type: MsgType) -> bytes:
    """HELLO/BYE: all numeric fields zero, OPAQUE format."""
    return encode_header(WireHeader(msg_type=msg_type))


def frame_parts(message: Message, codec: CodecId) -> Tuple[bytes, np.ndarray]:
    """
    Header bytes and body buffer for a DATA frame

    The RAW body is the payload array itself, so callers writing to a socket
    avoid building a concatenated copy.
    """
    codec = CodecId(codec)
    body = message.payload.data if codec == CodecId.RAW else rle_encode(message.payload.data)
    header = WireHeader(
        msg_type=MsgType.DATA,
        codec=codec,
        pixel_format=message.frame.format,
        seq=message.seq,
        created_ns=message.created_ns,
        width=message.frame.width,
        height=message.frame.height,
        payload_len=int(body.size),
    )
    return encode_header(header), body


def check_payload_len(header: WireHeader) -> None:
    """
    Reject a DATA header whose payload_len no frame of its geometry can have

    Runs before the body is read, so a hostile length never sizes a buffer.

    Raises:
        SizeMismatch: RAW length differs from the frame size, RLE length
            exceeds twice the frame size, or any length exceeds the cap
    """
    length = header.payload_len
    if length > defaults.MAX_PAYLOAD_BYTES:
        raise SizeMismatch(f"payload_len {length} exceeds the {defaults.MAX_PAYLOAD_BYTES}-byte cap")
    bpp = header.pixel_format.bytes_per_pixel
    if bpp is None:
        return
    expected = header.width * header.height * bpp
    if header.codec == CodecId.RAW and length != expected:
        raise SizeMismatch(
            f"RAW payload_len {length}, {header.width}x{header.height} {header.pixel_format.value} needs {expected}"
        )
    if header.codec == CodecId.RLE and length > 2 * expected:
        raise SizeMismatch(f"RLE payload_len {length} exceeds 2 x {expected}")


def serialize_message(message: Message, codec: CodecId = CodecId.RAW) -> bytes:
    header, body = frame_parts(message, codec)
    return header + body.tobytes()


def decode_body(header: WireHeader, body: np.ndarray) -> Message:
    """Build a Message from a DATA header and its (possibly compressed) body."""
    if header.msg_type != MsgType.DATA:
        raise MalformedHeader(f"expected DATA frame, got {header.msg_type.name}")
    data = body if header.codec == CodecId.RAW else rle_decode(body)
    try:
        frame = FrameSpec(width=header.width, height=header.height, format=header.pixel_format)
    except ValidationError as e:
        raise MalformedHeader(f"invalid frame geometry {header.width}x{header.height}") from e
    expected = frame.payload_size
    if expected is not None and data.size != expected:
        raise SizeMismatch(
            f"payload decoded to {data.size} bytes, {header.width}x{header.height} "
            f"{header.pixel_format.value} needs {expected}"
        )
    return Message(
        seq=header.seq,
        created_ns=header.created_ns,
        frame=frame,
        payload=Payload.wrap(data),
    )


def deserialize_message(data: Union[bytes, bytearray, memoryview]) -> Message:
    """
    Inverse of serialize_message; the payload gets a fresh alloc_id

    Raises:
        Truncated: fewer payload bytes than payload_len
        SizeMismatch: payload_len or the decoded payload disagrees with the frame spec
    """
    header = decode_header(data)
    if header.msg_type != MsgType.DATA:
        raise MalformedHeader(f"expected DATA frame, got {header.msg_type.name}")
    check_payload_len(header)
    end = HEADER_SIZE + header.payload_len
    if len(data) < end:
        raise Truncated(f"header claims {header.payload_len} payload bytes, got {len(data) - HEADER_SIZE}")
    # copy: the message must not alias the caller's buffer
    body = np.frombuffer(data, dtype=np.uint8, count=header.payload_len, offset=HEADER_SIZE).copy()
    return decode_body(header, body)
