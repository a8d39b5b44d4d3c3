"""Shared fixtures for the xrpipe test suite"""

import os
import socket
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from models import FrameSpec, PixelFormat  # noqa: E402
from services.frame_buffer import Message, Payload, now_ns  # noqa: E402


def free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def loopback_address() -> str:
    return f"127.0.0.1:{free_port()}"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec() -> FrameSpec:
    return FrameSpec(width=16, height=8, format=PixelFormat.RGB8)


@pytest.fixture
def make_message(small_spec):
    def _make(seq: int = 0, fill: int = 0, spec: FrameSpec = small_spec) -> Message:
        data = np.full(spec.payload_size or spec.width * spec.height, fill, dtype=np.uint8)
        return Message(seq=seq, created_ns=now_ns(), frame=spec, payload=Payload.wrap(data))
    return _make
