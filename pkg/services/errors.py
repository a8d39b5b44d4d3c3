"""
Error types raised by the xrpipe services
"""

import re
from typing import Optional


class XRPipeError(Exception):
    """Base class for all runtime errors"""

    @property
    def code(self) -> str:
        """Class name as UPPER_SNAKE, e.g. ConnectRefused -> CONNECT_REFUSED"""
        return re.sub(r"(?<!^)(?=[A-Z])", "_", type(self).__name__).upper()


# ==================== CORE ====================

class InvalidSize(XRPipeError):
    """Payload allocation with a non-positive length"""


class InvalidCapacity(XRPipeError):
    """Channel created with capacity < 1"""


class ChannelClosed(XRPipeError):
    """The other side of a local channel has been closed"""


class SubscriptionClosed(XRPipeError):
    """Fan-out subscription attempted after the channel started delivering"""


class KernelError(XRPipeError):
    """A kernel's step function failed"""

    def __init__(self, name: str, cause: BaseException):
        self.name = name
        self.cause = cause
        super().__init__(f"kernel '{name}' failed: {cause!r}")


class FormatMismatch(XRPipeError):
    """A kernel received a frame in a pixel format it cannot process"""


# ==================== REMOTE ====================

class BadMagic(XRPipeError):
    """Wire header does not start with the protocol magic"""


class UnsupportedVersion(XRPipeError):
    """Wire header carries an unknown protocol version"""


class MalformedHeader(XRPipeError):
    """Wire header carries an unknown msg_type, codec or pixel format"""


class MalformedStream(XRPipeError):
    """RLE stream with odd length or a zero count byte"""


class Truncated(XRPipeError):
    """Serialized message is shorter than its header claims"""


class SizeMismatch(XRPipeError):
    """Decoded payload length disagrees with the frame spec"""


class ConnectTimeout(XRPipeError):
    """Link could not be established within the retry budget"""


class ConnectRefused(XRPipeError):
    """Peer actively refused every connection attempt"""


class ProtocolViolation(XRPipeError):
    """Peer broke the link handshake rules"""


class LinkClosed(XRPipeError):
    """Peer closed the link; all in-flight messages have been drained"""


class LinkLost(XRPipeError):
    """Connection dropped without a BYE; in-flight messages may be lost"""


# ==================== PIPELINE ====================

class ParseError(XRPipeError):
    """Configuration document could not be parsed"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class DuplicateName(ParseError):
    """Two kernels share one name"""


class ConfigInvalid(XRPipeError):
    """instantiate() was handed a config that fails validation"""

    def __init__(self, issues: list):
        self.issues = issues
        super().__init__("; ".join(f"{i.code}: {i.message}" for i in issues))


# ==================== BENCH ====================

class InvalidArgument(XRPipeError):
    """Bad argument to a benchmark or address parser"""


class EmptyInput(XRPipeError):
    """Statistics requested over zero records"""
