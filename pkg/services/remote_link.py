"""
Reliable, ordered remote links carrying framed messages over TCP
"""

import logging
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from config import defaults
from models import CodecId
from services.errors import (
    ConnectRefused,
    ConnectTimeout,
    InvalidArgument,
    LinkClosed,
    LinkLost,
    ProtocolViolation,
    UnsupportedVersion,
    XRPipeError,
)
from services.frame_buffer import Message, now_ns
from services.wire_protocol import (
    HEADER_SIZE,
    MsgType,
    check_payload_len,
    control_header,
    decode_body,
    decode_header,
    frame_parts,
)


class LinkRole(str, Enum):
    LISTEN = "LISTEN"
    CONNECT = "CONNECT"


class LinkState(str, Enum):
    CONNECTED = "CONNECTED"
    CLOSED = "CLOSED"


class LinkConfig(BaseModel):
    """Parameters for link_establish"""
    role: LinkRole
    address: str = Field(..., description="host:port")
    codec: CodecId = CodecId.RAW
    connect_attempts: int = Field(defaults.CONNECT_ATTEMPTS, ge=1)
    retry_seconds: float = Field(defaults.CONNECT_RETRY_SECONDS, ge=0)
    accept_timeout: float = Field(defaults.ACCEPT_TIMEOUT_SECONDS, gt=0)
    handshake_timeout: float = Field(defaults.HANDSHAKE_TIMEOUT_SECONDS, gt=0)


def parse_address(address: str) -> Tuple[str, int]:
    """Split "host:port"; the port must be decimal 0..65535."""
    host, sep, port = address.rpartition(":")
    if not sep or not host or not port.isdigit() or int(port) > 65535:
        raise InvalidArgument(f"address must look like host:port, got '{address}'")
    return host, int(port)


class RemoteLink:
    """One established, handshaken link serving exactly one edge"""

    def __init__(self, sock: socket.socket, role: LinkRole, address: str, codec: CodecId = CodecId.RAW):
        self.sock = sock
        self.role = role
        self.address = address
        self.codec = CodecId(codec)
        self.state = LinkState.CONNECTED
        self.bytes_sent = 0
        self.bytes_received = 0
        self.frames_sent = 0
        self.frames_received = 0
        self.data_bytes_sent = 0
        self._send_lock = threading.Lock()
        self._header_buf = bytearray(HEADER_SIZE)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    # ------------------------------------------------------------------ #
    # Handshake
    # ------------------------------------------------------------------ #

    def handshake(self, timeout: float) -> None:
        """Exchange one HELLO each way before any DATA."""
        self.sock.settimeout(timeout)
        try:
            self._write(control_header(MsgType.HELLO))
            header = decode_header(self._read_exact(HEADER_SIZE))
            if header.msg_type != MsgType.HELLO:
                raise ProtocolViolation(f"expected HELLO, peer sent {header.msg_type.name}")
        except (ProtocolViolation, UnsupportedVersion):
            self.abort()
            raise
        except (OSError, XRPipeError) as e:
            self.abort()
            raise ConnectTimeout(f"handshake with {self.address} failed: {e}") from e
        finally:
            if self.state == LinkState.CONNECTED:
                self.sock.settimeout(None)

    # ------------------------------------------------------------------ #
    # I/O
    # ------------------------------------------------------------------ #

    def _write(self, *buffers) -> None:
        with self._send_lock:
            for buf in buffers:
                self.sock.sendall(buf)
                self.bytes_sent += memoryview(buf).nbytes

    def _read_into(self, view: memoryview) -> None:
        got = 0
        while got < len(view):
            n = self.sock.recv_into(view[got:])
            if n == 0:
                raise LinkLost(f"peer at {self.address} closed the connection without BYE")
            got += n
        self.bytes_received += got

    def _read_exact(self, size: int) -> bytearray:
        buf = self._header_buf if size == HEADER_SIZE else bytearray(size)
        self._read_into(memoryview(buf))
        return buf

    def send(self, message: Message) -> None:
        if self.state != LinkState.CONNECTED:
            raise LinkClosed(f"link to {self.address} is closed")
        header, body = frame_parts(message, self.codec)
        try:
            self._write(header, memoryview(body))
            self.data_bytes_sent += len(header) + body.nbytes
        except OSError as e:
            self.state = LinkState.CLOSED
            raise LinkLost(f"send to {self.address} failed: {e}") from e
        self.frames_sent += 1

    def recv(self) -> Message:
        """
        Next DATA message in send order

        Raises:
            LinkClosed: peer sent BYE
            LinkLost: the connection dropped without BYE
            ProtocolViolation: HELLO after the handshake
            SizeMismatch / BadMagic / MalformedHeader: undecodable frame; the link is aborted
        """
        if self.state != LinkState.CONNECTED:
            raise LinkClosed(f"link to {self.address} is closed")
        try:
            header = decode_header(self._read_exact(HEADER_SIZE))
            if header.msg_type == MsgType.BYE:
                self.state = LinkState.CLOSED
                raise LinkClosed(f"peer at {self.address} said BYE")
            if header.msg_type != MsgType.DATA:
                raise ProtocolViolation(f"unexpected {header.msg_type.name} after handshake")
            check_payload_len(header)
            body = np.empty(header.payload_len, dtype=np.uint8)
            self._read_into(memoryview(body))
            message = decode_body(header, body)
        except OSError as e:
            self.state = LinkState.CLOSED
            raise LinkLost(f"receive from {self.address} failed: {e}") from e
        except LinkLost:
            self.state = LinkState.CLOSED
            raise
        except LinkClosed:
            raise
        except XRPipeError:
            # the byte stream cannot be resynchronised
            self.abort()
            raise
        message.meta["arrival_ns"] = now_ns()
        self.frames_received += 1
        return message

    @property
    def bytes_per_frame(self) -> Optional[float]:
        if not self.frames_sent:
            return None
        return self.data_bytes_sent / self.frames_sent

    def close(self) -> None:
        """Send BYE (best effort) and release the socket."""
        if self.state == LinkState.CONNECTED:
            try:
                self._write(control_header(MsgType.BYE))
            except OSError:
                pass
        self.abort()

    def abort(self) -> None:
        self.state = LinkState.CLOSED
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class LinkListener:
    """Bound listening socket; accept() yields one handshaken RemoteLink"""

    def __init__(self, address: str, codec: CodecId = CodecId.RAW):
        host, port = parse_address(address)
        self.codec = CodecId(codec)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self.sock.bind((host, port))
            self.sock.listen(1)
        except OSError as e:
            self.sock.close()
            raise ConnectRefused(f"cannot listen on {address}: {e}") from e
        bound_host, bound_port = self.sock.getsockname()[:2]
        self.address = f"{bound_host}:{bound_port}"

    def accept(self, timeout: float = defaults.ACCEPT_TIMEOUT_SECONDS,
               handshake_timeout: float = defaults.HANDSHAKE_TIMEOUT_SECONDS) -> RemoteLink:
        self.sock.settimeout(timeout)
        try:
            conn, peer = self.sock.accept()
        except socket.timeout as e:
            raise ConnectTimeout(f"no peer connected to {self.address} within {timeout}s") from e
        except OSError as e:
            raise ConnectRefused(f"accept on {self.address} failed: {e}") from e
        finally:
            self.close()
        conn.settimeout(None)
        link = RemoteLink(conn, LinkRole.LISTEN, f"{peer[0]}:{peer[1]}", self.codec)
        link.handshake(handshake_timeout)
        logging.info(f"✅ Link accepted on {self.address} from {link.address}")
        return link

    def close(self) -> None:
        # shutdown wakes a thread blocked in accept()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def connect_link(
    address: str,
    codec: CodecId = CodecId.RAW,
    attempts: int = defaults.CONNECT_ATTEMPTS,
    retry_seconds: float = defaults.CONNECT_RETRY_SECONDS,
    handshake_timeout: float = defaults.HANDSHAKE_TIMEOUT_SECONDS,
) -> RemoteLink:
    """
    Dial `address`, retrying with a fixed delay

    Raises:
        ConnectRefused: every attempt was refused
        ConnectTimeout: the retry budget ran out otherwise
    """
    host, port = parse_address(address)
    last_error: Optional[OSError] = None
    for attempt in range(1, attempts + 1):
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.settimeout(max(retry_seconds, 0.1) * 10)
        try:
            sock.connect((host, port))
        except OSError as e:
            sock.close()
            last_error = e
            logging.debug(f"connect to {address} attempt {attempt}/{attempts} failed: {e}")
            if attempt < attempts:
                time.sleep(retry_seconds)
            continue
        sock.settimeout(None)
        link = RemoteLink(sock, LinkRole.CONNECT, address, codec)
        link.handshake(handshake_timeout)
        logging.info(f"✅ Link connected to {address}")
        return link

    if isinstance(last_error, ConnectionRefusedError):
        raise ConnectRefused(f"{address} refused {attempts} connection attempts") from last_error
    raise ConnectTimeout(f"could not reach {address} after {attempts} attempts") from last_error


def link_establish(cfg: LinkConfig) -> RemoteLink:
    """LISTEN accepts one peer, CONNECT dials with bounded retries; both then handshake."""
    if cfg.role == LinkRole.LISTEN:
        listener = LinkListener(cfg.address, cfg.codec)
        return listener.accept(cfg.accept_timeout, cfg.handshake_timeout)
    return connect_link(cfg.address, cfg.codec, cfg.connect_attempts, cfg.retry_seconds, cfg.handshake_timeout)


def loopback_pair(address: str, codec: CodecId = CodecId.RAW) -> Tuple[RemoteLink, RemoteLink]:
    """Open both ends of one link in this process: (connecting end, listening end)."""
    listener = LinkListener(address, codec)
    with ThreadPoolExecutor(max_workers=2) as pool:
        accepted = pool.submit(listener.accept)
        connected = pool.submit(connect_link, listener.address, codec)
        return connected.result(), accepted.result()


def link_send(link: RemoteLink, message: Message) -> None:
    link.send(message)


def link_recv(link: RemoteLink) -> Message:
    return link.recv()
