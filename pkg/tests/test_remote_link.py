"""Tests for TCP links: handshake, ordering, close and connect failures"""

import socket
import threading

import numpy as np
import pytest

from models import CodecId, FrameSpec
from services.errors import ConnectRefused, InvalidArgument, LinkClosed, LinkLost, ProtocolViolation, SizeMismatch
from services.frame_buffer import Message, Payload, now_ns
from services.remote_link import (
    LinkConfig,
    LinkListener,
    LinkRole,
    LinkState,
    connect_link,
    link_establish,
    link_recv,
    link_send,
    loopback_pair,
    parse_address,
)
from services.wire_protocol import HEADER_SIZE, MsgType, WireHeader, control_header, encode_header, serialize_message
from tests.conftest import free_port

pytestmark = pytest.mark.network


def _frame(seq: int, fill: int = 0) -> Message:
    spec = FrameSpec(width=32, height=16)
    return Message(seq=seq, created_ns=now_ns(), frame=spec,
                   payload=Payload.wrap(np.full(spec.payload_size, fill, np.uint8)))


class TestParseAddress:

    def test_host_port(self):
        assert parse_address("127.0.0.1:7100") == ("127.0.0.1", 7100)

    @pytest.mark.parametrize("bad", ["localhost", ":80", "host:", "host:99999", "host:http"])
    def test_rejects_malformed(self, bad):
        with pytest.raises(InvalidArgument):
            parse_address(bad)


class TestLoopback:

    @pytest.mark.parametrize("codec", [CodecId.RAW, CodecId.RLE])
    def test_messages_arrive_in_order(self, codec, loopback_address):
        sender, receiver = loopback_pair(loopback_address, codec)
        try:
            sent = [_frame(seq, fill=seq % 3) for seq in range(50)]
            thread = threading.Thread(target=lambda: [sender.send(m) for m in sent], daemon=True)
            thread.start()
            received = [receiver.recv() for _ in range(50)]
            thread.join(5.0)
            assert [m.seq for m in received] == list(range(50))
            for original, copy in zip(sent, received):
                assert np.array_equal(original.payload.data, copy.payload.data)
                assert copy.meta["arrival_ns"] >= original.created_ns
        finally:
            sender.close()
            receiver.abort()

    def test_bye_closes_after_drain(self, loopback_address):
        sender, receiver = loopback_pair(loopback_address)
        sender.send(_frame(0))
        sender.close()
        assert receiver.recv().seq == 0
        with pytest.raises(LinkClosed):
            receiver.recv()
        receiver.abort()

    def test_link_send_and_recv(self, loopback_address):
        sender, receiver = loopback_pair(loopback_address)
        try:
            link_send(sender, _frame(7, fill=9))
            message = link_recv(receiver)
            assert message.seq == 7
            assert int(message.payload.data[0]) == 9
            assert receiver.frames_received == 1
            assert receiver.bytes_received > message.frame.payload_size
        finally:
            sender.close()
            receiver.abort()

    def test_rle_reduces_bytes_on_wire(self, loopback_address):
        sender, receiver = loopback_pair(loopback_address, CodecId.RLE)
        try:
            sender.send(_frame(0))
            receiver.recv()
            assert sender.bytes_per_frame < _frame(0).frame.payload_size
        finally:
            sender.close()
            receiver.abort()

    def test_link_establish_both_roles(self):
        address = f"127.0.0.1:{free_port()}"
        result = {}
        listener = threading.Thread(
            target=lambda: result.setdefault("server", link_establish(LinkConfig(role=LinkRole.LISTEN, address=address))),
            daemon=True,
        )
        listener.start()
        client = link_establish(LinkConfig(role=LinkRole.CONNECT, address=address))
        listener.join(5.0)
        client.send(_frame(3))
        assert result["server"].recv().seq == 3
        client.close()
        result["server"].abort()


class TestConnectFailures:

    def test_refused_after_retries(self):
        address = f"127.0.0.1:{free_port()}"
        with pytest.raises(ConnectRefused):
            connect_link(address, attempts=3, retry_seconds=0.01)

    def test_listener_bind_conflict(self):
        listener = LinkListener("127.0.0.1:0")
        try:
            with pytest.raises(ConnectRefused):
                LinkListener(listener.address)
        finally:
            listener.close()


class TestProtocolViolation:

    def test_data_before_hello(self):
        listener = LinkListener("127.0.0.1:0")
        host, port = listener.address.split(":")
        errors = []

        def accept():
            try:
                listener.accept(timeout=5.0, handshake_timeout=5.0)
            except ProtocolViolation as e:
                errors.append(e)

        thread = threading.Thread(target=accept, daemon=True)
        thread.start()
        with socket.create_connection((host, int(port))) as raw:
            raw.sendall(serialize_message(_frame(0)))
            thread.join(5.0)
        assert len(errors) == 1

    def test_hello_after_handshake(self, loopback_address):
        sender, receiver = loopback_pair(loopback_address)
        try:
            sender.sock.sendall(control_header(MsgType.HELLO))
            with pytest.raises(ProtocolViolation):
                receiver.recv()
        finally:
            sender.abort()
            receiver.abort()


class TestLinkLoss:

    def test_drop_without_bye_is_not_a_clean_close(self, loopback_address):
        sender, receiver = loopback_pair(loopback_address)
        sender.send(_frame(0))
        sender.abort()
        assert receiver.recv().seq == 0
        with pytest.raises(LinkLost):
            receiver.recv()
        assert receiver.state == LinkState.CLOSED

    def test_oversized_payload_len_aborts_link(self, loopback_address):
        sender, receiver = loopback_pair(loopback_address)
        try:
            header = WireHeader(msg_type=MsgType.DATA, width=1, height=1, payload_len=2**32 - 1)
            sender.sock.sendall(encode_header(header))
            with pytest.raises(SizeMismatch):
                receiver.recv()
            assert receiver.state == LinkState.CLOSED
            # HELLO plus the rejected header; no body bytes were read
            assert receiver.bytes_received == 2 * HEADER_SIZE
        finally:
            sender.abort()
