"""
Pipeline service: parse, validate, instantiate and run deployment configs

One config describes the whole distributed pipeline. Each process
instantiates only the kernels whose placement matches its role; LOCAL edges
become in-process channels and REMOTE edges become links (the SERVER side
listens, the CLIENT side connects). Role ALL builds everything in one
process and still routes REMOTE edges through loopback links.
"""

import logging
import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Set, Tuple

import yaml
from pydantic import ValidationError

from config import defaults
from models import (
    Direction,
    EdgeDecl,
    EdgeKind,
    KernelCounters,
    LinkCounters,
    PipelineConfig,
    Placement,
    Role,
    RunReport,
    SinkReport,
    SyncMode,
    ValidationIssue,
)
from services.bench_service import summarize
from services.errors import ChannelClosed, ConfigInvalid, DuplicateName, KernelError, LinkClosed, ParseError
from services.kernel_runtime import KERNEL_REGISTRY, KernelRunner, create_kernel
from services.kernels import LatencySink
from services.local_channel import LocalChannel, RecvEndpoint, SendEndpoint, channel_create
from services.remote_link import LinkListener, RemoteLink, connect_link

PLACEMENT_VIOLATION = "PLACEMENT_VIOLATION"
EDGE_KIND_MISMATCH = "EDGE_KIND_MISMATCH"
NOT_A_DAG = "NOT_A_DAG"
UNKNOWN_KERNEL_TYPE = "UNKNOWN_KERNEL_TYPE"
DANGLING_PORT = "DANGLING_PORT"
PORT_MULTIPLY_DRIVEN = "PORT_MULTIPLY_DRIVEN"
INVALID_PARAMS = "INVALID_PARAMS"
SYNC_MODE_MISMATCH = "SYNC_MODE_MISMATCH"


# ==================== PARSING ====================

def _line_of(node: Optional[yaml.Node], loc: Tuple) -> Optional[int]:
    """1-based line of the YAML node addressed by a pydantic error location."""
    line = None
    for key in loc:
        if node is None:
            break
        line = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            match = next(((k, v) for k, v in node.value if k.value == key), None)
            if match is None:
                break
            line = match[0].start_mark.line + 1
            node = match[1]
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
    return line


def parse_config(text: str) -> PipelineConfig:
    """
    Parse a YAML pipeline document and apply defaults

    Raises:
        ParseError: YAML syntax error, unknown field or bad value
        DuplicateName: two kernels share a name
    """
    try:
        document = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark or e.context_mark
        raise ParseError(f"syntax error: {e.problem}", line=mark.line + 1 if mark else None) from e
    except yaml.YAMLError as e:
        raise ParseError(f"syntax error: {e}") from e

    if document is None:
        document = {}
    if not isinstance(document, dict):
        raise ParseError("top level must be a mapping with 'kernels' and 'edges'", line=1)

    try:
        cfg = PipelineConfig.model_validate(document)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise ParseError(f"{where}: {first['msg']}", line=_line_of(root, first["loc"])) from e

    seen: Set[str] = set()
    for index, kernel in enumerate(cfg.kernels):
        if kernel.name in seen:
            raise DuplicateName(
                f"duplicate kernel name '{kernel.name}'", line=_line_of(root, ("kernels", index, "name"))
            )
        seen.add(kernel.name)

    return resolve_sync_modes(cfg)


def load_config(path: str) -> PipelineConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e.strerror}") from e
    return parse_config(text)


def resolve_sync_modes(cfg: PipelineConfig) -> PipelineConfig:
    """Edges without an explicit sync_mode take the mode their consuming port declares."""
    for edge in cfg.edges:
        if "sync_mode" in edge.model_fields_set:
            continue
        decl = cfg.kernel(edge.dst_kernel)
        kernel_type = KERNEL_REGISTRY.get(decl.type) if decl is not None else None
        port = kernel_type.find_in_port(edge.dst_port) if kernel_type is not None else None
        if port is not None:
            edge.sync_mode = port.sync_mode
    return cfg


# ==================== VALIDATION ====================

def _topological_order(names: List[str], edges: List[Tuple[str, str]]) -> Tuple[List[str], Set[str]]:
    """Kahn's algorithm; returns (sorted names, names left on a cycle)."""
    downstream: Dict[str, List[str]] = {n: [] for n in names}
    indegree: Dict[str, int] = {n: 0 for n in names}
    for src, dst in edges:
        downstream[src].append(dst)
        indegree[dst] += 1
    ready = [n for n in names if indegree[n] == 0]
    ordered: List[str] = []
    while ready:
        name = ready.pop(0)
        ordered.append(name)
        for nxt in downstream[name]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                ready.append(nxt)
    return ordered, {n for n in names if indegree[n] > 0}


def validate_config(cfg: PipelineConfig) -> List[ValidationIssue]:
    """
    Check every PipelineConfig invariant

    Returns:
        All violations found (empty list when the config is valid)
    """
    issues: List[ValidationIssue] = []

    def report(code: str, message: str) -> None:
        issues.append(ValidationIssue(code=code, message=message))

    kernels = {k.name: k for k in cfg.kernels}
    types = {}
    for decl in cfg.kernels:
        kernel_type = KERNEL_REGISTRY.get(decl.type)
        if kernel_type is None:
            report(UNKNOWN_KERNEL_TYPE, f"kernel '{decl.name}' has unregistered type '{decl.type}'")
            continue
        types[decl.name] = kernel_type
        if (kernel_type.is_source() or kernel_type.is_sink()) and decl.placement != Placement.CLIENT:
            role = "source" if kernel_type.is_source() else "sink"
            report(PLACEMENT_VIOLATION, f"{role} kernel '{decl.name}' must be placed on CLIENT, not {decl.placement.value}")
        try:
            kernel_type.validate_params(decl.params)
        except (ValidationError, ValueError, TypeError) as e:
            report(INVALID_PARAMS, f"kernel '{decl.name}': {str(e).splitlines()[0]}")

    def port_exists(kernel: str, port: str, direction: Direction) -> bool:
        kernel_type = types.get(kernel)
        return kernel_type is not None and any(
            p.name == port and p.direction == direction for p in kernel_type.ports
        )

    in_edges: Dict[Tuple[str, str], int] = {}
    out_edges: Dict[Tuple[str, str], int] = {}
    graph: List[Tuple[str, str]] = []
    for edge in cfg.edges:
        src_known, dst_known = edge.src_kernel in kernels, edge.dst_kernel in kernels
        if not src_known or not dst_known:
            missing = edge.src_kernel if not src_known else edge.dst_kernel
            report(DANGLING_PORT, f"edge {edge.label} references unknown kernel '{missing}'")
        else:
            graph.append((edge.src_kernel, edge.dst_kernel))
            placements_differ = kernels[edge.src_kernel].placement != kernels[edge.dst_kernel].placement
            if placements_differ != (edge.kind == EdgeKind.REMOTE):
                report(
                    EDGE_KIND_MISMATCH,
                    f"edge {edge.label} is {edge.kind.value} but connects "
                    f"{kernels[edge.src_kernel].placement.value} to {kernels[edge.dst_kernel].placement.value}",
                )
        if edge.src_kernel in types and not port_exists(edge.src_kernel, edge.src_port, Direction.OUT):
            report(DANGLING_PORT, f"edge {edge.label}: '{edge.src}' is not an OUT port")
        if edge.dst_kernel in types and not port_exists(edge.dst_kernel, edge.dst_port, Direction.IN):
            report(DANGLING_PORT, f"edge {edge.label}: '{edge.dst}' is not an IN port")
        elif edge.dst_kernel in types and "sync_mode" in edge.model_fields_set:
            declared = types[edge.dst_kernel].find_in_port(edge.dst_port).sync_mode
            if edge.sync_mode != declared:
                report(
                    SYNC_MODE_MISMATCH,
                    f"edge {edge.label} is {edge.sync_mode.value} but '{edge.dst}' is declared {declared.value}",
                )
        out_edges[(edge.src_kernel, edge.src_port)] = out_edges.get((edge.src_kernel, edge.src_port), 0) + 1
        in_edges[(edge.dst_kernel, edge.dst_port)] = in_edges.get((edge.dst_kernel, edge.dst_port), 0) + 1

    for name, kernel_type in types.items():
        for port in kernel_type.ports:
            if port.direction == Direction.IN:
                count = in_edges.get((name, port.name), 0)
                if count == 0:
                    report(DANGLING_PORT, f"IN port '{name}.{port.name}' has no incoming edge")
                elif count > 1:
                    report(PORT_MULTIPLY_DRIVEN, f"IN port '{name}.{port.name}' has {count} incoming edges")
            elif out_edges.get((name, port.name), 0) == 0:
                report(DANGLING_PORT, f"OUT port '{name}.{port.name}' has no outgoing edge")

    _, cyclic = _topological_order(list(kernels), graph)
    if cyclic:
        report(NOT_A_DAG, f"edges form a cycle through {sorted(cyclic)}")

    return issues


def kernels_for_role(cfg: PipelineConfig, role: Role) -> List[str]:
    role = Role(role)
    return [k.name for k in cfg.kernels if role == Role.ALL or k.placement.value == role.value]


# ==================== LINK PUMPS ====================

class LinkPump:
    """
    One execution context moving messages between a local channel and a link

    A sending pump forwards its channel until the channel ends, then says BYE.
    A receiving pump forwards the link until BYE; once its local consumer has
    gone away it keeps reading and discards, so the peer still sees a clean end.
    Any other failure is handed to `on_error` unless `stopping` is already set.
    """

    def __init__(self, edge: EdgeDecl, link: RemoteLink, outbound: bool, stopping: threading.Event,
                 on_error: Optional[Callable[["LinkPump", Exception], None]] = None,
                 rx: Optional[RecvEndpoint] = None, tx: Optional[SendEndpoint] = None):
        self.edge = edge
        self.link = link
        self.outbound = outbound
        self.rx = rx
        self.tx = tx
        self.discarded = 0
        self.error: Optional[Exception] = None
        self.thread = threading.Thread(target=self._run, name=f"link:{edge.label}", daemon=True)
        self._stopping = stopping
        self._on_error = on_error

    def start(self) -> None:
        self.thread.start()

    def stop(self) -> None:
        self._stopping.set()
        self.link.abort()
        if self.rx is not None:
            self.rx.close()
        if self.tx is not None:
            self.tx.close()

    def counters(self) -> LinkCounters:
        return LinkCounters(
            edge=self.edge.label,
            direction=Direction.OUT if self.outbound else Direction.IN,
            frames=self.link.frames_sent if self.outbound else self.link.frames_received,
            bytes=self.link.bytes_sent if self.outbound else self.link.bytes_received,
            discarded=self.discarded,
            error=str(self.error) if self.error is not None else None,
        )

    def _run(self) -> None:
        try:
            if self.outbound:
                self._send_loop()
            else:
                self._recv_loop()
        except (ChannelClosed, LinkClosed) as e:
            logging.debug(f"link pump {self.edge.label} finished: {e}")
        except Exception as e:
            if self._stopping.is_set():
                logging.debug(f"link pump {self.edge.label} stopped: {e}")
                return
            self.error = e
            logging.error(f"❌ Link pump {self.edge.label} failed: {str(e)}")
            logging.debug(traceback.format_exc())
            if self._on_error is not None:
                self._on_error(self, e)

    def _send_loop(self) -> None:
        try:
            while not self._stopping.is_set():
                message = self.rx.recv(SyncMode.BLOCKING, timeout=defaults.POLL_INTERVAL_SECONDS)
                if message is None:
                    continue
                self.link.send(message)
        finally:
            self.rx.close()
            self.link.close()

    def _recv_loop(self) -> None:
        consumer_gone = False
        try:
            while not self._stopping.is_set():
                message = self.link.recv()
                if consumer_gone:
                    self.discarded += 1
                    continue
                try:
                    self.tx.send(message)
                except ChannelClosed:
                    consumer_gone = True
                    self.discarded += 1
        finally:
            self.tx.close()
            self.link.abort()


# ==================== RUNNING PIPELINE ====================

class RunningPipeline:
    """Kernels, channels and links instantiated for one role"""

    def __init__(self, cfg: PipelineConfig, role: Role):
        self.cfg = cfg
        self.role = Role(role)
        self.runners: Dict[str, KernelRunner] = {}
        self.channels: List[LocalChannel] = []
        self.links: List[RemoteLink] = []
        self.pumps: List[LinkPump] = []
        self._threads: Dict[str, threading.Thread] = {}
        self._errors: List[str] = []
        self._aborted = threading.Event()
        self._stop = threading.Event()
        self._sources_stop = threading.Event()
        self._ran = False

    def runner(self, name: str) -> KernelRunner:
        return self.runners[name]

    def kernel(self, name: str):
        return self.runners[name].kernel

    def _on_error(self, runner: KernelRunner, error: KernelError) -> None:
        self._errors.append(str(error))
        self._aborted.set()

    def _on_link_error(self, pump: LinkPump, error: Exception) -> None:
        self._errors.append(f"link {pump.edge.label} failed: {error}")
        self._aborted.set()

    @staticmethod
    def _slice(deadline: Optional[float]) -> Optional[float]:
        """Next poll interval, or None once the deadline has passed."""
        if deadline is None:
            return defaults.POLL_INTERVAL_SECONDS
        remaining = deadline - time.monotonic()
        return min(defaults.POLL_INTERVAL_SECONDS, remaining) if remaining > 0 else None

    def _wait_any(self, groups: List[List[threading.Thread]], deadline: Optional[float]) -> bool:
        """Block until every thread of some group has exited, a kernel or link failed, or the deadline passed."""
        while groups:
            if any(all(not t.is_alive() for t in group) for group in groups):
                return True
            wait = self._slice(deadline)
            if wait is None:
                return False
            if self._aborted.wait(wait):
                return False
        return True

    def _wait_all(self, threads: List[threading.Thread], deadline: Optional[float]) -> bool:
        for thread in threads:
            while thread.is_alive():
                wait = self._slice(deadline)
                if wait is None:
                    return False
                thread.join(wait)
        return True

    def run_for(self, duration: Optional[float] = None, frames: Optional[int] = None) -> RunReport:
        """
        Run until `duration` seconds elapse or the sources exhaust their budget

        Args:
            duration: Wall-clock limit in seconds (None = no limit)
            frames: Frame budget applied to every local source (overrides params)

        Returns:
            RunReport; the first kernel or link failure is surfaced in report.error
        """
        if self._ran:
            raise RuntimeError("a RunningPipeline can only be run once")
        self._ran = True

        if frames is not None:
            for runner in self.runners.values():
                if hasattr(runner.kernel, "set_budget"):
                    runner.kernel.set_budget(frames)
        if duration is not None and duration <= 0:
            self._sources_stop.set()
        for channel in self.channels:
            channel.seal()

        started = time.monotonic()
        deadline = None if duration is None else started + duration
        logging.info(f"▶️  Running {len(self.runners)} kernels, {len(self.pumps)} link pumps as {self.role.value}")

        for pump in self.pumps:
            pump.start()
        for name, runner in self.runners.items():
            thread = threading.Thread(
                target=runner.run,
                args=(self._stop, self._sources_stop, self._on_error),
                name=f"kernel:{name}",
                daemon=True,
            )
            self._threads[name] = thread
            thread.start()

        source_threads = [self._threads[n] for n, r in self.runners.items() if r.kernel.is_source()]
        downstream_threads = [self._threads[n] for n, r in self.runners.items() if not r.kernel.is_source()]
        kernel_threads = list(self._threads.values())
        pump_threads = [p.thread for p in self.pumps]

        try:
            self._wait_any([g for g in (source_threads, downstream_threads) if g], deadline)
        except KeyboardInterrupt:
            logging.warning("Interrupted; draining")
        self._sources_stop.set()

        drain_deadline = time.monotonic() + defaults.DRAIN_WINDOW_SECONDS
        drained = self._wait_all(kernel_threads + pump_threads, drain_deadline)
        if not drained:
            backlog = sum(sum(channel.queue_lengths()) for channel in self.channels)
            logging.warning(
                f"⚠️  Drain window of {defaults.DRAIN_WINDOW_SECONDS}s elapsed with {backlog} queued messages; forcing stop"
            )
        self.shutdown()
        elapsed = time.monotonic() - started
        report = self.report(elapsed)
        logging.info(f"⏹️  Run finished in {elapsed:.3f}s ({'ok' if report.ok else 'failed'})")
        return report

    def shutdown(self) -> None:
        """Stop every context and release channels and links."""
        self._stop.set()
        self._sources_stop.set()
        for runner in self.runners.values():
            runner.close_ports()
        for pump in self.pumps:
            pump.stop()
        for link in self.links:
            link.abort()
        for thread in list(self._threads.values()) + [p.thread for p in self.pumps]:
            if thread.is_alive():
                thread.join(1.0)

    close = shutdown

    def __enter__(self) -> "RunningPipeline":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()

    def report(self, elapsed: float = 0.0) -> RunReport:
        kernels = []
        sinks = []
        for decl in self.cfg.kernels:
            runner = self.runners.get(decl.name)
            if runner is None:
                continue
            kernels.append(KernelCounters(
                name=decl.name,
                type=decl.type,
                placement=decl.placement,
                state=runner.lifecycle.value,
                steps_fired=runner.steps_fired,
                messages_in=runner.messages_in,
                messages_out=runner.messages_out,
                drops=runner.drops,
                failed=runner.error is not None,
                error=str(runner.error) if runner.error else None,
            ))
            sink = runner.kernel
            if isinstance(sink, LatencySink):
                sinks.append(SinkReport(
                    name=decl.name,
                    received=sink.count,
                    seq_gaps=sink.seq_gaps,
                    summary=summarize(sink.records) if sink.records else None,
                    records=sink.records,
                    digest=sink.digest,
                ))
        return RunReport(
            role=self.role,
            duration_s=round(elapsed, 6),
            kernels=kernels,
            sinks=sinks,
            links=[pump.counters() for pump in self.pumps],
            error=self._errors[0] if self._errors else None,
        )


# ==================== INSTANTIATION ====================

def _establish_links(plans: List[Tuple[EdgeDecl, bool, bool]]) -> Dict[Tuple[int, str], RemoteLink]:
    """
    Open link endpoints in parallel

    Args:
        plans: (edge, open listening end, open connecting end) per REMOTE edge

    Returns:
        {(edge index, "listen"|"connect"): link}
    """
    listeners: Dict[int, LinkListener] = {}
    links: Dict[Tuple[int, str], RemoteLink] = {}
    try:
        for index, (edge, listen, _) in enumerate(plans):
            if listen:
                listeners[index] = LinkListener(edge.transport.listen_address, edge.codec)
                logging.info(f"   👂 Listening on {listeners[index].address} for {edge.label}")
        workers = max(1, sum(int(listen) + int(connect) for _, listen, connect in plans))
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="link-setup") as pool:
            futures = {}
            for index, (edge, listen, connect) in enumerate(plans):
                if listen:
                    futures[(index, "listen")] = pool.submit(listeners[index].accept)
                if connect:
                    futures[(index, "connect")] = pool.submit(connect_link, edge.transport.connect_address, edge.codec)
            errors = []
            for key, future in futures.items():
                try:
                    links[key] = future.result()
                except Exception as e:
                    errors.append(e)
                    for listener in listeners.values():
                        listener.close()
            if errors:
                raise errors[0]
        return links
    except Exception:
        for link in links.values():
            link.abort()
        for listener in listeners.values():
            listener.close()
        raise


def instantiate(cfg: PipelineConfig, role: Role = Role.ALL) -> RunningPipeline:
    """
    Build the kernels, channels and links this role is responsible for

    Raises:
        ConfigInvalid: the config fails validate_config
        ConnectTimeout / ConnectRefused / ProtocolViolation: link setup failed
    """
    issues = validate_config(resolve_sync_modes(cfg))
    if issues:
        raise ConfigInvalid(issues)

    role = Role(role)
    local = set(kernels_for_role(cfg, role))
    pipeline = RunningPipeline(cfg, role)
    logging.info(f"🏗️  Instantiating {len(local)}/{len(cfg.kernels)} kernels for role {role.value}")

    # Step 1: kernels
    for decl in cfg.kernels:
        if decl.name in local:
            kernel = create_kernel(decl.type, decl.name, decl.params)
            pipeline.runners[decl.name] = KernelRunner(kernel, decl.placement, defaults.POLL_INTERVAL_SECONDS)

    # Step 2: one fan-out channel per local OUT port
    out_channels: Dict[Tuple[str, str], SendEndpoint] = {}
    for edge in cfg.edges:
        key = (edge.src_kernel, edge.src_port)
        if edge.src_kernel in local and key not in out_channels:
            channel = LocalChannel(edge.capacity, edge.overflow_policy)
            pipeline.channels.append(channel)
            out_channels[key] = SendEndpoint(channel)
            pipeline.runners[edge.src_kernel].bind_output(edge.src_port, out_channels[key])

    # Step 3: LOCAL edges subscribe directly
    remote: List[EdgeDecl] = []
    for edge in cfg.edges:
        if edge.kind == EdgeKind.REMOTE:
            remote.append(edge)
            continue
        if edge.src_kernel in local and edge.dst_kernel in local:
            rx = out_channels[(edge.src_kernel, edge.src_port)].subscribe(edge.capacity, edge.overflow_policy)
            pipeline.runners[edge.dst_kernel].bind_input(edge.dst_port, rx, edge.sync_mode)

    # Step 4: REMOTE edges (SERVER end listens, CLIENT end connects)
    plans = []
    for edge in remote:
        src_server = cfg.kernel(edge.src_kernel).placement == Placement.SERVER
        server_end = edge.src_kernel if src_server else edge.dst_kernel
        client_end = edge.dst_kernel if src_server else edge.src_kernel
        plans.append((edge, server_end in local, client_end in local))
    if plans:
        logging.info(f"🔗 Establishing {len(plans)} remote link(s)")
    links = _establish_links(plans) if plans else {}
    pipeline.links.extend(links.values())

    for index, (edge, _, _) in enumerate(plans):
        src_server = cfg.kernel(edge.src_kernel).placement == Placement.SERVER
        sender_key = (index, "listen" if src_server else "connect")
        receiver_key = (index, "connect" if src_server else "listen")
        if edge.src_kernel in local:
            rx = out_channels[(edge.src_kernel, edge.src_port)].subscribe(edge.capacity, edge.overflow_policy)
            pipeline.pumps.append(LinkPump(edge, links[sender_key], outbound=True, stopping=pipeline._stop,
                                           on_error=pipeline._on_link_error, rx=rx))
        if edge.dst_kernel in local:
            tx, rx = channel_create(edge.capacity, edge.overflow_policy)
            pipeline.channels.append(tx.channel)
            pipeline.runners[edge.dst_kernel].bind_input(edge.dst_port, rx, edge.sync_mode)
            pipeline.pumps.append(LinkPump(edge, links[receiver_key], outbound=False, stopping=pipeline._stop,
                                           on_error=pipeline._on_link_error, tx=tx))

    logging.info(f"✅ Pipeline ready: {len(pipeline.runners)} kernels, {len(pipeline.links)} link endpoints")
    return pipeline


def run_for(pipeline: RunningPipeline, duration: Optional[float] = None, frames: Optional[int] = None) -> RunReport:
    return pipeline.run_for(duration=duration, frames=frames)
