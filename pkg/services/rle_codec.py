"""
Byte-level run-length codec

The encoded stream is a sequence of (count, value) byte pairs with count in
1..255. Runs longer than 255 are split into full 255-byte runs followed by
the remainder, so a constant 720p RGB8 frame (2,764,800 bytes) encodes to
10,843 pairs = 21,686 bytes. Output is never longer than twice the input.
"""

from typing import Union

import numpy as np

from services.errors import MalformedStream

MAX_RUN = 255

BytesLike = Union[bytes, bytearray, memoryview, np.ndarray]


def _as_array(data: BytesLike) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return data.reshape(-1).view(np.uint8)
    return np.frombuffer(data, dtype=np.uint8)


def rle_encode(data: BytesLike) -> np.ndarray:
    """Encode to a uint8 array of (count, value) pairs."""
    arr = _as_array(data)
    n = arr.size
    if n == 0:
        return np.empty(0, dtype=np.uint8)

    starts = np.concatenate(([0], np.flatnonzero(arr[1:] != arr[:-1]) + 1))
    lengths = np.diff(np.append(starts, n))
    values = arr[starts]

    full, rest = np.divmod(lengths, MAX_RUN)
    pairs_per_run = full + (rest > 0)
    total = int(pairs_per_run.sum())

    counts = np.full(total, MAX_RUN, dtype=np.uint8)
    last_pair = np.cumsum(pairs_per_run) - 1
    has_rest = rest > 0
    counts[last_pair[has_rest]] = rest[has_rest]

    out = np.empty(2 * total, dtype=np.uint8)
    out[0::2] = counts
    out[1::2] = np.repeat(values, pairs_per_run)
    return out


def rle_decode(data: BytesLike) -> np.ndarray:
    """
    Decode a (count, value) stream

    Raises:
        MalformedStream: odd length or a zero count byte
    """
    arr = _as_array(data)
    if arr.size % 2:
        raise MalformedStream(f"RLE stream has odd length {arr.size}")
    counts = arr[0::2]
    if counts.size and not counts.all():
        raise MalformedStream("RLE stream contains a zero count")
    return np.repeat(arr[1::2], counts)


def rle_compress(data: BytesLike) -> bytes:
    return rle_encode(data).tobytes()


def rle_decompress(data: BytesLike) -> bytes:
    return rle_decode(data).tobytes()
