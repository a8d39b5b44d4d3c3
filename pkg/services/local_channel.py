"""
Bounded in-process channels with zero-copy handoff and fan-out

One producer sends into a channel; every subscriber owns a FIFO queue that
receives the same Message object. The payload is frozen on first send, so
subscribers share it without copying. A COPY channel deep-copies the payload
for every subscriber and exists only as a benchmark baseline.
"""

import logging
import threading
import time
from collections import deque
from enum import Enum
from typing import Deque, List, Optional, Tuple

from models import ChannelKind, OverflowPolicy, SyncMode
from services.errors import ChannelClosed, InvalidCapacity, SubscriptionClosed
from services.frame_buffer import Message, now_ns


class SendResult(str, Enum):
    ACCEPTED = "Accepted"
    ACCEPTED_WITH_DROP = "AcceptedWithDrop"


class _Subscription:
    __slots__ = ("queue", "capacity", "policy", "closed", "dropped", "discarded")

    def __init__(self, capacity: int, policy: OverflowPolicy):
        self.queue: Deque[Message] = deque()
        self.capacity = capacity
        self.policy = policy
        self.closed = False
        self.dropped = 0
        self.discarded = 0

    @property
    def full(self) -> bool:
        return len(self.queue) >= self.capacity


class LocalChannel:
    """Shared state behind a SendEndpoint and its RecvEndpoints"""

    def __init__(self, capacity: int, policy: OverflowPolicy, kind: ChannelKind = ChannelKind.ZEROCOPY):
        if capacity < 1:
            raise InvalidCapacity(f"channel capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.policy = OverflowPolicy(policy)
        self.kind = ChannelKind(kind)
        self._cond = threading.Condition()
        self._subs: List[_Subscription] = []
        self._sealed = False
        self._sender_closed = False

    # ------------------------------------------------------------------ #
    # Counters (safe from a monitoring thread)
    # ------------------------------------------------------------------ #

    @property
    def dropped_count(self) -> int:
        with self._cond:
            return sum(s.dropped for s in self._subs)

    def queue_lengths(self) -> List[int]:
        """Current depth of every subscriber queue, in subscription order"""
        with self._cond:
            return [len(s.queue) for s in self._subs]

    # ------------------------------------------------------------------ #
    # Producer side
    # ------------------------------------------------------------------ #

    def subscribe(self, capacity: Optional[int] = None, policy: Optional[OverflowPolicy] = None) -> "RecvEndpoint":
        capacity = self.capacity if capacity is None else capacity
        if capacity < 1:
            raise InvalidCapacity(f"channel capacity must be >= 1, got {capacity}")
        with self._cond:
            if self._sealed:
                raise SubscriptionClosed("channel already started delivering")
            sub = _Subscription(capacity, OverflowPolicy(policy or self.policy))
            self._subs.append(sub)
        return RecvEndpoint(self, sub)

    def seal(self) -> None:
        """Fix the subscriber set; later subscriptions fail."""
        with self._cond:
            self._sealed = True

    def send(self, message: Message, timeout: Optional[float] = None) -> SendResult:
        with self._cond:
            self._sealed = True
            if self._sender_closed:
                raise ChannelClosed("send endpoint already closed")
            targets = [s for s in self._subs if not s.closed]
            if not targets:
                raise ChannelClosed("every receiver has been closed")

        message.payload.freeze()
        message.sent_ns = now_ns()
        if self.kind == ChannelKind.COPY:
            deliveries = [
                (sub, message.derive(payload=message.payload.writable_copy(), sent_ns=message.sent_ns))
                for sub in targets
            ]
        else:
            deliveries = [(sub, message) for sub in targets]

        deadline = None if timeout is None else time.monotonic() + timeout
        result = SendResult.ACCEPTED
        with self._cond:
            while True:
                live = [(s, m) for s, m in deliveries if not s.closed]
                if not live:
                    raise ChannelClosed("every receiver has been closed")
                blocked = [s for s, _ in live if s.policy == OverflowPolicy.BLOCK and s.full]
                if not blocked:
                    break
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TimeoutError("channel full")
                self._cond.wait(remaining)
            for sub, delivered in live:
                if sub.full:
                    sub.queue.popleft()
                    sub.dropped += 1
                    result = SendResult.ACCEPTED_WITH_DROP
                sub.queue.append(delivered)
            self._cond.notify_all()
        if result == SendResult.ACCEPTED_WITH_DROP:
            logging.debug(f"channel dropped oldest message before seq {message.seq}")
        return result

    def close_sender(self) -> None:
        with self._cond:
            self._sender_closed = True
            self._sealed = True
            self._cond.notify_all()

    # ------------------------------------------------------------------ #
    # Consumer side
    # ------------------------------------------------------------------ #

    def _take(self, sub: _Subscription, mode: SyncMode, timeout: Optional[float], latest: bool) -> Optional[Message]:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not sub.queue:
                if sub.closed:
                    raise ChannelClosed("receive endpoint closed")
                if self._sender_closed:
                    raise ChannelClosed("sender closed and queue drained")
                if mode == SyncMode.NON_BLOCKING:
                    return None
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(remaining)
            if latest:
                message = sub.queue.pop()
                sub.discarded += len(sub.queue)
                sub.queue.clear()
            else:
                message = sub.queue.popleft()
            self._cond.notify_all()
            return message

    def _wait(self, sub: _Subscription, timeout: Optional[float]) -> bool:
        with self._cond:
            return self._cond.wait_for(
                lambda: bool(sub.queue) or sub.closed or self._sender_closed, timeout
            )

    def _close_receiver(self, sub: _Subscription) -> None:
        with self._cond:
            sub.closed = True
            sub.queue.clear()
            self._cond.notify_all()


class SendEndpoint:
    """Producer handle of a LocalChannel"""

    def __init__(self, channel: LocalChannel):
        self.channel = channel

    def send(self, message: Message, timeout: Optional[float] = None) -> SendResult:
        return self.channel.send(message, timeout)

    def subscribe(self, capacity: Optional[int] = None, policy: Optional[OverflowPolicy] = None) -> "RecvEndpoint":
        return self.channel.subscribe(capacity, policy)

    def seal(self) -> None:
        self.channel.seal()

    def close(self) -> None:
        self.channel.close_sender()

    @property
    def dropped_count(self) -> int:
        return self.channel.dropped_count


class RecvEndpoint:
    """Consumer handle; one per subscriber"""

    def __init__(self, channel: LocalChannel, sub: _Subscription):
        self.channel = channel
        self._sub = sub

    def recv(self, mode: SyncMode = SyncMode.BLOCKING, timeout: Optional[float] = None) -> Optional[Message]:
        """
        Take the oldest queued message

        Returns None when NON_BLOCKING finds the queue empty, or when a
        BLOCKING wait exceeds `timeout`.
        """
        return self.channel._take(self._sub, SyncMode(mode), timeout, latest=False)

    def recv_latest(self) -> Optional[Message]:
        """Take the newest queued message and discard the older ones."""
        return self.channel._take(self._sub, SyncMode.NON_BLOCKING, None, latest=True)

    def wait(self, timeout: Optional[float] = None) -> bool:
        """True once a message is queued or the channel is closed."""
        return self.channel._wait(self._sub, timeout)

    def pending(self) -> int:
        with self.channel._cond:
            return len(self._sub.queue)

    @property
    def exhausted(self) -> bool:
        """No message queued and none will ever arrive."""
        with self.channel._cond:
            return not self._sub.queue and (self._sub.closed or self.channel._sender_closed)

    @property
    def dropped_count(self) -> int:
        with self.channel._cond:
            return self._sub.dropped

    @property
    def discarded_count(self) -> int:
        with self.channel._cond:
            return self._sub.discarded

    def close(self) -> None:
        self.channel._close_receiver(self._sub)


def channel_create(
    capacity: int,
    policy: OverflowPolicy = OverflowPolicy.BLOCK,
    kind: ChannelKind = ChannelKind.ZEROCOPY,
) -> Tuple[SendEndpoint, RecvEndpoint]:
    """
    Create a bounded channel with one subscriber

    Args:
        capacity: Per-subscriber queue bound (>= 1)
        policy: BLOCK waits for space, DROP_OLDEST evicts
        kind: ZEROCOPY (default) or the COPY benchmark baseline

    Returns:
        (send endpoint, receive endpoint)
    """
    channel = LocalChannel(capacity, policy, kind)
    return SendEndpoint(channel), channel.subscribe()


def channel_send(endpoint: SendEndpoint, message: Message) -> SendResult:
    return endpoint.send(message)


def channel_recv(endpoint: RecvEndpoint, mode: SyncMode = SyncMode.BLOCKING) -> Optional[Message]:
    return endpoint.recv(mode)


def fan_out_subscribe(
    endpoint: SendEndpoint,
    capacity: Optional[int] = None,
    policy: Optional[OverflowPolicy] = None,
) -> RecvEndpoint:
    """Add a consumer; every later send reaches all subscribers."""
    return endpoint.subscribe(capacity, policy)
