"""
Kernel lifecycle, port bindings and the relaxed per-port firing rule
"""

import logging
import threading
import traceback
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, ClassVar, Dict, List, Optional, Tuple, Type

from models import Direction, Placement, SyncMode
from services.errors import ChannelClosed, KernelError
from services.frame_buffer import Message, check_message
from services.local_channel import RecvEndpoint, SendEndpoint, SendResult


class Lifecycle(str, Enum):
    CREATED = "CREATED"
    RUNNING = "RUNNING"
    STOPPED = "STOPPED"


@dataclass(frozen=True)
class PortSpec:
    """A named, directional kernel port"""
    name: str
    direction: Direction
    sync_mode: SyncMode = SyncMode.BLOCKING


def in_port(name: str, sync_mode: SyncMode = SyncMode.BLOCKING) -> PortSpec:
    return PortSpec(name, Direction.IN, sync_mode)


def out_port(name: str) -> PortSpec:
    return PortSpec(name, Direction.OUT)


@dataclass
class StepOutcome:
    """Result of one kernel_step call"""
    fired: bool
    emitted: Dict[str, int] = field(default_factory=dict)
    done: bool = False

    @classmethod
    def starved(cls, done: bool = False) -> "StepOutcome":
        return cls(fired=False, done=done)


Outputs = Dict[str, List[Message]]


class Kernel(ABC):
    """
    Base class for compute kernels

    Subclasses declare their ports in `ports` and implement `step`, which
    receives one entry per IN port (None for an absent NON_BLOCKING input)
    and returns the messages to emit per OUT port.
    """

    type_name: ClassVar[str] = ""
    ports: ClassVar[Tuple[PortSpec, ...]] = ()

    def __init__(self, name: str, **params: Any):
        self.name = name
        self.params = params

    @classmethod
    def in_ports(cls) -> List[PortSpec]:
        return [p for p in cls.ports if p.direction == Direction.IN]

    @classmethod
    def out_ports(cls) -> List[PortSpec]:
        return [p for p in cls.ports if p.direction == Direction.OUT]

    @classmethod
    def find_in_port(cls, name: str) -> Optional[PortSpec]:
        return next((p for p in cls.in_ports() if p.name == name), None)

    @classmethod
    def is_source(cls) -> bool:
        return not cls.in_ports()

    @classmethod
    def is_sink(cls) -> bool:
        return not cls.out_ports()

    @classmethod
    def validate_params(cls, params: Dict[str, Any]) -> None:
        """Raise ValueError (or a pydantic ValidationError) for unusable params."""

    @property
    def finished(self) -> bool:
        """True once a source has nothing more to emit."""
        return False

    def pace(self, stop: threading.Event) -> None:
        """Called before each source step; sources that pace override this."""

    @abstractmethod
    def step(self, inputs: Dict[str, Optional[Message]]) -> Optional[Outputs]:
        ...


KERNEL_REGISTRY: Dict[str, Type[Kernel]] = {}


def register_kernel(cls: Type[Kernel]) -> Type[Kernel]:
    """Class decorator adding a kernel type to the registry under its type_name."""
    type_name = cls.type_name or cls.__name__
    cls.type_name = type_name
    KERNEL_REGISTRY[type_name] = cls
    return cls


def create_kernel(type_name: str, name: str, params: Optional[Dict[str, Any]] = None) -> Kernel:
    if type_name not in KERNEL_REGISTRY:
        raise KeyError(f"Unknown kernel type: {type_name}")
    return KERNEL_REGISTRY[type_name](name, **(params or {}))


class KernelRunner:
    """Drives one kernel: binds its ports, applies the firing rule, keeps counters"""

    def __init__(self, kernel: Kernel, placement: Placement = Placement.CLIENT, poll_interval: float = 0.05):
        self.kernel = kernel
        self.placement = placement
        self.poll_interval = poll_interval
        self.lifecycle = Lifecycle.CREATED
        self.inputs: Dict[str, Tuple[RecvEndpoint, SyncMode]] = {}
        self.outputs: Dict[str, SendEndpoint] = {}
        self._seq: Dict[str, int] = {p.name: 0 for p in kernel.out_ports()}
        self.steps_fired = 0
        self.messages_in = 0
        self.messages_out = 0
        self.drops_signalled = 0
        self.error: Optional[KernelError] = None

    @property
    def name(self) -> str:
        return self.kernel.name

    @property
    def drops(self) -> int:
        return sum(endpoint.dropped_count for endpoint in self.outputs.values())

    def bind_input(self, port: str, endpoint: RecvEndpoint, sync_mode: SyncMode = SyncMode.BLOCKING) -> None:
        self.inputs[port] = (endpoint, SyncMode(sync_mode))

    def bind_output(self, port: str, endpoint: SendEndpoint) -> None:
        self.outputs[port] = endpoint

    def start(self) -> None:
        self.lifecycle = Lifecycle.RUNNING

    # ------------------------------------------------------------------ #
    # Firing rule
    # ------------------------------------------------------------------ #

    def _blocking(self) -> List[RecvEndpoint]:
        return [ep for ep, mode in self.inputs.values() if mode == SyncMode.BLOCKING]

    def _ready(self) -> Tuple[bool, bool]:
        """(can fire now, can never fire again)"""
        blocking = self._blocking()
        if blocking:
            if any(ep.exhausted for ep in blocking):
                return False, True
            return all(ep.pending() > 0 for ep in blocking), False
        if self.inputs:
            # only NON_BLOCKING inputs: fire on any arrival
            endpoints = [ep for ep, _ in self.inputs.values()]
            if all(ep.exhausted for ep in endpoints):
                return False, True
            return any(ep.pending() > 0 for ep in endpoints), False
        return not self.kernel.finished, self.kernel.finished

    def step(self) -> StepOutcome:
        """
        Fire the kernel once if its BLOCKING inputs are all satisfied

        Returns:
            StepOutcome with fired=False when starved

        Raises:
            KernelError: the step function failed; the kernel is STOPPED
        """
        if self.lifecycle != Lifecycle.RUNNING:
            raise RuntimeError(f"kernel '{self.name}' is {self.lifecycle.value}, not RUNNING")

        ready, done = self._ready()
        if not ready:
            return StepOutcome.starved(done)

        inputs: Dict[str, Optional[Message]] = {}
        for port, (endpoint, mode) in self.inputs.items():
            try:
                if mode == SyncMode.BLOCKING:
                    message = endpoint.recv(SyncMode.NON_BLOCKING)
                else:
                    message = endpoint.recv_latest()
            except ChannelClosed:
                message = None
            if message is not None:
                self.messages_in += 1
            inputs[port] = message

        try:
            produced = self.kernel.step(inputs) or {}
            declared = set(self._seq)
            unknown = set(produced) - declared
            if unknown:
                raise ValueError(f"emitted on undeclared ports {sorted(unknown)}")
            for messages in produced.values():
                for message in messages:
                    check_message(message)
        except Exception as e:
            self.lifecycle = Lifecycle.STOPPED
            self.error = KernelError(self.name, e)
            raise self.error from e

        self.steps_fired += 1
        emitted: Dict[str, int] = {}
        for port, messages in produced.items():
            endpoint = self.outputs.get(port)
            for message in messages:
                # each OUT port numbers its messages from 0; drops upstream
                # show in the drop counters, not as gaps further down
                out = message.derive(seq=self._seq[port])
                self._seq[port] += 1
                if endpoint is not None:
                    if endpoint.send(out) == SendResult.ACCEPTED_WITH_DROP:
                        self.drops_signalled += 1
                self.messages_out += 1
                emitted[port] = emitted.get(port, 0) + 1
        return StepOutcome(fired=True, emitted=emitted)

    # ------------------------------------------------------------------ #
    # Execution context
    # ------------------------------------------------------------------ #

    def _await_inputs(self) -> None:
        pending = [ep for ep in self._blocking() if ep.pending() == 0]
        if pending:
            pending[0].wait(self.poll_interval)
        elif self.inputs:
            next(iter(self.inputs.values()))[0].wait(self.poll_interval)

    def close_ports(self) -> None:
        for endpoint in self.outputs.values():
            endpoint.close()
        for endpoint, _ in self.inputs.values():
            endpoint.close()

    def run(
        self,
        stop: threading.Event,
        sources_stop: threading.Event,
        on_error: Optional[Callable[["KernelRunner", KernelError], None]] = None,
    ) -> None:
        """Loop until the kernel is done or `stop` is set; always closes its ports."""
        self.start()
        is_source = self.kernel.is_source()
        try:
            while not stop.is_set():
                if is_source:
                    if sources_stop.is_set() or self.kernel.finished:
                        break
                    self.kernel.pace(sources_stop)
                    if sources_stop.is_set():
                        break
                outcome = self.step()
                if outcome.done:
                    break
                if not outcome.fired:
                    self._await_inputs()
        except KernelError as e:
            logging.error(f"❌ Kernel '{self.name}' failed: {e.cause!r}")
            logging.debug(traceback.format_exc())
            if on_error is not None:
                on_error(self, e)
        except ChannelClosed:
            logging.info(f"Kernel '{self.name}' stopping: downstream closed")
        finally:
            self.lifecycle = Lifecycle.STOPPED
            self.close_ports()
            logging.debug(f"Kernel '{self.name}' stopped after {self.steps_fired} steps")
