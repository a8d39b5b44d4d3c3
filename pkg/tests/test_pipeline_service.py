"""Tests for parsing, validating, instantiating and running pipeline configs"""

import os
import queue
import random
import subprocess
import sys
import threading
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
import pytest

from models import Direction, EdgeKind, OverflowPolicy, PixelFormat, Placement, Role, SyncMode
from services.errors import ConfigInvalid, DuplicateName, ParseError, XRPipeError
from services.kernel_runtime import Kernel, in_port, out_port, register_kernel
from services.kernels import SyntheticFrameSource, to_grayscale
from services.pipeline_service import (
    DANGLING_PORT,
    EDGE_KIND_MISMATCH,
    NOT_A_DAG,
    PLACEMENT_VIOLATION,
    PORT_MULTIPLY_DRIVEN,
    SYNC_MODE_MISMATCH,
    UNKNOWN_KERNEL_TYPE,
    instantiate,
    kernels_for_role,
    load_config,
    parse_config,
    run_for,
    validate_config,
)
from services.remote_link import LinkListener, RemoteLink
from services.wire_protocol import MsgType, WireHeader, encode_header
from tests.conftest import free_port

ROOT = Path(__file__).resolve().parents[1]
SAMPLE_CONFIGS = sorted((ROOT / "configs").glob("*.yaml"))

TWO_KERNEL = """
kernels:
  - {name: cam, type: SyntheticFrameSource, params: {width: 16, height: 8}}
  - {name: sink, type: LatencySink}
edges:
  - {from: cam.out, to: sink.in}
"""

OFFLOAD = """
name: offload
kernels:
  - {{name: cam, type: SyntheticFrameSource, placement: CLIENT, params: {{resolution: {resolution}, fill: "random:11"}}}}
  - {{name: gray, type: Grayscale, placement: SERVER}}
  - {{name: sink, type: LatencySink, placement: CLIENT, params: {{digest: true, keep_seqs: {keep}}}}}
edges:
  - {{from: cam.out, to: gray.in, kind: REMOTE, transport: {{listen: "127.0.0.1:{p1}", connect: "127.0.0.1:{p1}"}}}}
  - {{from: gray.out, to: sink.in, kind: REMOTE, codec: RLE, transport: {{listen: "127.0.0.1:{p2}"}}}}
"""


COMBINER = """
kernels:
  - {{name: main, type: SyntheticFrameSource, params: {{width: 32, height: 32}}}}
  - {{name: side, type: SyntheticFrameSource, params: {{width: 4, height: 4, format: GRAY8, fps: 2}}}}
  - {{name: mix, type: Combiner}}
  - {{name: sink, type: LatencySink}}
edges:
  - {{from: main.out, to: mix.a}}
  - {{from: side.out, to: mix.b, capacity: 1, overflow_policy: DROP_OLDEST{b_extra}}}
  - {{from: mix.out, to: sink.in}}
"""


def offload_config(resolution: str = "64x48", keep=()):
    return OFFLOAD.format(resolution=resolution, keep=list(keep), p1=free_port(), p2=free_port())


def codes(text: str) -> List[str]:
    return [issue.code for issue in validate_config(parse_config(text))]


@register_kernel
class ExplodeAtThree(Kernel):
    """Forwards frames until seq 3, then fails"""

    type_name = "ExplodeAtThree"
    ports = (in_port("in"), out_port("out"))

    def step(self, inputs):
        if inputs["in"].seq == 3:
            raise RuntimeError("exploded at seq 3")
        return {"out": [inputs["in"].derive()]}


# ==================== PARSING ====================

class TestParseConfig:

    def test_defaults_applied(self):
        cfg = parse_config(TWO_KERNEL)
        edge = cfg.edges[0]
        assert cfg.kernel("cam").placement == Placement.CLIENT
        assert edge.kind == EdgeKind.LOCAL
        assert edge.sync_mode == SyncMode.BLOCKING
        assert edge.capacity == 8
        assert edge.overflow_policy == OverflowPolicy.BLOCK

    def test_enum_values_case_insensitive(self):
        cfg = parse_config(TWO_KERNEL.replace("{from: cam.out, to: sink.in}",
                                              "{from: cam.out, to: sink.in, overflow_policy: drop_oldest}"))
        assert cfg.edges[0].overflow_policy == OverflowPolicy.DROP_OLDEST

    def test_duplicate_name(self):
        text = TWO_KERNEL.replace("name: sink", "name: cam")
        with pytest.raises(DuplicateName) as info:
            parse_config(text)
        assert info.value.line == 4

    def test_unknown_field_reports_line(self):
        text = "kernels:\n  - name: cam\n    type: Passthrough\n    colour: red\nedges: []\n"
        with pytest.raises(ParseError) as info:
            parse_config(text)
        assert info.value.line == 4

    def test_syntax_error_reports_line(self):
        with pytest.raises(ParseError) as info:
            parse_config("kernels:\n  - name: [cam\n")
        assert info.value.line is not None

    def test_remote_edge_needs_transport(self):
        text = TWO_KERNEL.replace("{from: cam.out, to: sink.in}", "{from: cam.out, to: sink.in, kind: REMOTE}")
        with pytest.raises(ParseError):
            parse_config(text)

    def test_bad_endpoint(self):
        with pytest.raises(ParseError):
            parse_config(TWO_KERNEL.replace("from: cam.out", "from: cam"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_config(str(tmp_path / "absent.yaml"))

    def test_kernels_not_a_list(self):
        with pytest.raises(ParseError) as info:
            parse_config("kernels: 5\nedges: []\n")
        assert info.value.line == 1

    def test_kernel_name_not_a_string(self):
        text = "kernels:\n  - name: [a]\n    type: Passthrough\nedges: []\n"
        with pytest.raises(ParseError) as info:
            parse_config(text)
        assert not isinstance(info.value, DuplicateName)
        assert info.value.line == 2

    def test_omitted_sync_mode_follows_port(self):
        cfg = parse_config(COMBINER.format(b_extra=""))
        by_dst = {edge.dst: edge.sync_mode for edge in cfg.edges}
        assert by_dst["mix.a"] == SyncMode.BLOCKING
        assert by_dst["mix.b"] == SyncMode.NON_BLOCKING
        assert by_dst["sink.in"] == SyncMode.BLOCKING


# ==================== VALIDATION ====================

class TestValidateConfig:

    @pytest.mark.parametrize("path", SAMPLE_CONFIGS, ids=lambda p: p.name)
    def test_sample_configs_are_valid(self, path):
        assert validate_config(load_config(str(path))) == []

    def test_source_on_server(self):
        text = TWO_KERNEL.replace("type: SyntheticFrameSource,", "type: SyntheticFrameSource, placement: SERVER,")
        assert PLACEMENT_VIOLATION in codes(text)

    def test_local_edge_across_placements(self):
        text = """
kernels:
  - {name: cam, type: SyntheticFrameSource, params: {width: 4, height: 4}}
  - {name: p, type: Passthrough, placement: SERVER}
  - {name: sink, type: LatencySink}
edges:
  - {from: cam.out, to: p.in}
  - {from: p.out, to: sink.in, kind: REMOTE, transport: {listen: "127.0.0.1:1"}}
"""
        assert codes(text) == [EDGE_KIND_MISMATCH]

    def test_remote_edge_within_one_host(self):
        text = TWO_KERNEL.replace("{from: cam.out, to: sink.in}",
                                  "{from: cam.out, to: sink.in, kind: REMOTE, transport: {listen: '127.0.0.1:1'}}")
        assert codes(text) == [EDGE_KIND_MISMATCH]

    def test_cycle(self):
        text = """
kernels:
  - {name: a, type: Passthrough}
  - {name: b, type: Passthrough}
edges:
  - {from: a.out, to: b.in}
  - {from: b.out, to: a.in}
"""
        assert codes(text) == [NOT_A_DAG]

    def test_unknown_type(self):
        assert UNKNOWN_KERNEL_TYPE in codes(TWO_KERNEL.replace("LatencySink", "Nonexistent"))

    def test_unconnected_in_port(self):
        text = """
kernels:
  - {name: cam, type: SyntheticFrameSource, params: {width: 4, height: 4}}
  - {name: mix, type: Combiner}
  - {name: sink, type: LatencySink}
edges:
  - {from: cam.out, to: mix.a}
  - {from: mix.out, to: sink.in}
"""
        assert codes(text) == [DANGLING_PORT]

    def test_edge_to_missing_port(self):
        assert DANGLING_PORT in codes(TWO_KERNEL.replace("to: sink.in", "to: sink.input"))

    def test_multiply_driven(self):
        text = """
kernels:
  - {name: a, type: SyntheticFrameSource, params: {width: 4, height: 4}}
  - {name: b, type: SyntheticFrameSource, params: {width: 4, height: 4}}
  - {name: sink, type: LatencySink}
edges:
  - {from: a.out, to: sink.in}
  - {from: b.out, to: sink.in}
"""
        assert codes(text) == [PORT_MULTIPLY_DRIVEN]

    def test_sync_mode_contradicting_port(self):
        assert codes(COMBINER.format(b_extra=", sync_mode: BLOCKING")) == [SYNC_MODE_MISMATCH]

    def test_sync_mode_matching_port(self):
        assert codes(COMBINER.format(b_extra=", sync_mode: NON_BLOCKING")) == []
        text = TWO_KERNEL.replace("{from: cam.out, to: sink.in}", "{from: cam.out, to: sink.in, sync_mode: NON_BLOCKING}")
        assert codes(text) == [SYNC_MODE_MISMATCH]

    def test_reports_every_violation(self):
        text = """
kernels:
  - {name: cam, type: SyntheticFrameSource, placement: SERVER, params: {width: 4, height: 4}}
  - {name: x, type: Nonexistent}
  - {name: sink, type: LatencySink}
edges:
  - {from: cam.out, to: sink.in}
"""
        found = codes(text)
        assert PLACEMENT_VIOLATION in found
        assert UNKNOWN_KERNEL_TYPE in found
        assert EDGE_KIND_MISMATCH in found


# ==================== ROLES ====================

class TestRolePartition:

    @pytest.mark.parametrize("path", SAMPLE_CONFIGS, ids=lambda p: p.name)
    def test_client_and_server_partition_all(self, path):
        cfg = load_config(str(path))
        client = set(kernels_for_role(cfg, Role.CLIENT))
        server = set(kernels_for_role(cfg, Role.SERVER))
        assert client.isdisjoint(server)
        assert client | server == set(kernels_for_role(cfg, Role.ALL))

    def test_offload_split(self):
        cfg = parse_config(offload_config())
        assert kernels_for_role(cfg, Role.CLIENT) == ["cam", "sink"]
        assert kernels_for_role(cfg, Role.SERVER) == ["gray"]

    def test_instantiate_rejects_invalid(self):
        with pytest.raises(ConfigInvalid) as info:
            instantiate(parse_config(TWO_KERNEL.replace("LatencySink", "Nonexistent")), Role.ALL)
        assert info.value.issues[0].code == UNKNOWN_KERNEL_TYPE


@pytest.mark.network
class TestInstantiate:

    def test_all_role_uses_loopback_links(self):
        with instantiate(parse_config(offload_config()), Role.ALL) as pipeline:
            assert set(pipeline.runners) == {"cam", "gray", "sink"}
            assert len(pipeline.links) == 4

    def test_client_and_server_in_one_process(self):
        cfg = parse_config(offload_config())
        server = {}
        thread = threading.Thread(target=lambda: server.setdefault("p", instantiate(cfg, Role.SERVER)), daemon=True)
        thread.start()
        client = instantiate(cfg, Role.CLIENT)
        thread.join(10.0)
        assert set(client.runners) == {"cam", "sink"}
        assert len(client.links) == 2
        assert set(server["p"].runners) == {"gray"}

        server_report = {}
        runner = threading.Thread(target=lambda: server_report.setdefault("r", server["p"].run_for(duration=20)),
                                  daemon=True)
        runner.start()
        report = client.run_for(frames=25)
        runner.join(20.0)
        assert report.ok
        assert report.sink("sink").received == 25
        assert server_report["r"].counters("gray").steps_fired == 25


# ==================== RUNNING ====================

class TestRunFor:

    def test_frames_budget(self):
        pipeline = instantiate(parse_config(TWO_KERNEL), Role.ALL)
        report = run_for(pipeline, frames=40)
        assert report.ok
        sink = report.sink("sink")
        assert sink.received == 40
        assert sink.seq_gaps == 0
        assert sink.summary.n == 40
        assert report.counters("cam").messages_out == 40

    def test_zero_duration_gives_zero_counters(self):
        report = instantiate(parse_config(TWO_KERNEL), Role.ALL).run_for(duration=0)
        assert report.ok
        assert report.sink("sink").received == 0
        assert all(k.steps_fired == 0 for k in report.kernels)

    def test_bounded_shutdown_when_saturated(self):
        text = """
kernels:
  - {name: cam, type: SyntheticFrameSource, params: {width: 64, height: 64}}
  - {name: p, type: Passthrough}
  - {name: sink, type: LatencySink, params: {record_cap: 1000}}
edges:
  - {from: cam.out, to: p.in, capacity: 1, overflow_policy: DROP_OLDEST}
  - {from: p.out, to: sink.in}
"""
        started = time.monotonic()
        report = instantiate(parse_config(text), Role.ALL).run_for(duration=0.5)
        assert time.monotonic() - started < 0.5 + 2.0 + 1.5
        assert report.ok
        cam, p = report.counters("cam"), report.counters("p")
        sink = report.sink("sink")
        assert p.messages_in == cam.messages_out - cam.drops
        assert sink.received == p.messages_out
        # p renumbers from 0, so the drops before it leave no gaps at the sink
        assert sink.seq_gaps == 0

    def test_failing_kernel_aborts_run(self):
        text = """
kernels:
  - {name: cam, type: SyntheticFrameSource, params: {width: 4, height: 4}}
  - {name: bomb, type: ExplodeAtThree}
  - {name: sink, type: LatencySink}
edges:
  - {from: cam.out, to: bomb.in}
  - {from: bomb.out, to: sink.in}
"""
        started = time.monotonic()
        report = instantiate(parse_config(text), Role.ALL).run_for(duration=30)
        assert time.monotonic() - started < 10
        assert not report.ok
        assert "bomb" in report.error
        assert report.counters("bomb").failed
        assert report.sink("sink").received == 3
        assert "status: failed" in report.render_text()

    @pytest.mark.parametrize("b_extra", ["", ", sync_mode: NON_BLOCKING"], ids=["port-default", "explicit"])
    def test_combiner_with_slow_side_input(self, b_extra):
        started = time.monotonic()
        pipeline = instantiate(parse_config(COMBINER.format(b_extra=b_extra)), Role.ALL)
        report = pipeline.run_for(frames=100)
        assert time.monotonic() - started < 10
        assert report.sink("sink").received == 100
        assert report.counters("mix").steps_fired == 100
        b_seqs = [m["b_seq"] for m in pipeline.kernel("sink").meta_log if m["b_present"]]
        assert b_seqs == sorted(b_seqs)


# ==================== LINK FAILURES ====================

class ScriptedServer:
    """Stands in for the SERVER half of the offload config; tests script what reaches the client"""

    def __init__(self, text: str):
        cfg = parse_config(text)
        self.listeners = [LinkListener(edge.transport.listen_address, edge.codec) for edge in cfg.edges]
        self.upstream: Optional[RemoteLink] = None
        self.downstream: Optional[RemoteLink] = None
        self.ready = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self) -> None:
        self.upstream = self.listeners[0].accept()
        self.downstream = self.listeners[1].accept()
        self.ready.set()
        try:
            while True:
                self.upstream.recv()
        except XRPipeError:
            pass
        finally:
            self.upstream.abort()

    def join(self) -> None:
        self._thread.join(10.0)
        if self.downstream is not None:
            self.downstream.abort()


@pytest.mark.network
class TestLinkFailures:

    def _client(self):
        text = offload_config()
        server = ScriptedServer(text)
        client = instantiate(parse_config(text), Role.CLIENT)
        assert server.ready.wait(10.0)
        return server, client

    def _run(self, server: ScriptedServer, client):
        started = time.monotonic()
        report = client.run_for(duration=20)
        assert time.monotonic() - started < 10
        server.join()
        return report, next(link for link in report.links if link.direction == Direction.IN)

    def test_undecodable_frame_fails_run(self):
        server, client = self._client()
        header = WireHeader(msg_type=MsgType.DATA, pixel_format=PixelFormat.RGB8, width=2, height=2, payload_len=3)
        server.downstream.sock.sendall(encode_header(header) + b"abc")

        report, inbound = self._run(server, client)
        assert not report.ok
        assert "gray.out -> sink.in" in report.error
        assert "payload_len" in report.error
        assert inbound.edge == "gray.out -> sink.in"
        assert inbound.frames == 0
        assert inbound.error is not None
        assert report.sink("sink").received == 0
        assert "error:" in report.render_text()

    def test_connection_dropped_without_bye_fails_run(self):
        server, client = self._client()
        server.downstream.abort()

        report, inbound = self._run(server, client)
        assert not report.ok
        assert "gray.out -> sink.in" in report.error
        assert inbound.error is not None

    def test_bye_ends_run_cleanly(self, make_message):
        server, client = self._client()
        for seq in range(2):
            server.downstream.send(make_message(seq=seq))
        server.downstream.close()

        report, inbound = self._run(server, client)
        assert report.ok, report.error
        assert inbound.frames == 2
        assert inbound.error is None
        assert all(link.error is None for link in report.links)
        assert report.sink("sink").received == 2


# ==================== CONSERVATION ====================

def random_dag(seed: int) -> str:
    """Sources, Passthrough/Combiner stages and one sink per unconsumed output."""
    rng = random.Random(seed)
    kernels, edges = [], []
    consumed = {}
    producers = []
    for i in range(rng.randint(1, 2)):
        name = f"src{i}"
        kernels.append(f"  - {{name: {name}, type: SyntheticFrameSource, params: {{width: 8, height: 8, fill: 'random:{seed}'}}}}")
        producers.append(name)
        consumed[name] = False
    for i in range(rng.randint(0, 2)):
        name = f"k{i}"
        placement = rng.choice(["CLIENT", "SERVER"])
        main = rng.choice(producers)
        if rng.random() < 0.5:
            kernels.append(f"  - {{name: {name}, type: Combiner, placement: {placement}}}")
            edges.append((main, f"{name}.a", "", placement))
            side = rng.choice(producers)
            edges.append((side, f"{name}.b", ", sync_mode: NON_BLOCKING, capacity: 1, overflow_policy: DROP_OLDEST", placement))
            consumed[side] = True
        else:
            kernels.append(f"  - {{name: {name}, type: Passthrough, placement: {placement}}}")
            edges.append((main, f"{name}.in", "", placement))
        consumed[main] = True
        producers.append(name)
        consumed[name] = False
    for i, name in enumerate([p for p in producers if not consumed[p]]):
        sink = f"sink{i}"
        kernels.append(f"  - {{name: {sink}, type: LatencySink}}")
        edges.append((name, f"{sink}.in", "", "CLIENT"))

    placements = {line.split("name: ")[1].split(",")[0]: ("SERVER" if "placement: SERVER" in line else "CLIENT")
                  for line in kernels}
    lines = ["kernels:", *kernels, "edges:"]
    for src, dst, extra, dst_placement in edges:
        if placements[src] != dst_placement:
            port = free_port()
            extra += f", kind: REMOTE, transport: {{listen: '127.0.0.1:{port}'}}"
        lines.append(f"  - {{from: {src}.out, to: {dst}{extra}}}")
    return "\n".join(lines) + "\n"


@pytest.mark.network
class TestLosslessConservation:

    @pytest.mark.parametrize("seed", range(20))
    def test_every_sink_gets_every_frame(self, seed):
        cfg = parse_config(random_dag(seed))
        assert validate_config(cfg) == []
        report = instantiate(cfg, Role.ALL).run_for(frames=30, duration=30)
        assert report.ok, report.error
        assert report.sinks
        for sink in report.sinks:
            assert sink.received == 30, sink.name
            assert sink.seq_gaps == 0


# ==================== DISTRIBUTED RUN ====================

def _start_server(config_path: Path) -> subprocess.Popen:
    env = dict(os.environ, XRPIPE_LOG="info", PYTHONIOENCODING="utf-8")
    return subprocess.Popen(
        [sys.executable, str(ROOT / "xrpipe_app.py"), "run", str(config_path), "--role", "server", "--duration", "60"],
        cwd=str(ROOT), env=env, stdout=subprocess.PIPE, stderr=subprocess.PIPE, encoding="utf-8", errors="replace",
    )


def _wait_for_listeners(proc: subprocess.Popen, count: int, timeout: float = 30.0) -> None:
    lines: "queue.Queue[str]" = queue.Queue()
    threading.Thread(target=lambda: [lines.put(line) for line in proc.stderr], daemon=True).start()
    deadline = time.monotonic() + timeout
    seen = 0
    while seen < count:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise AssertionError("server never started listening")
        try:
            if "Listening on" in lines.get(timeout=remaining):
                seen += 1
        except queue.Empty:
            continue


@pytest.mark.slow
@pytest.mark.network
class TestDistributedRun:

    def test_client_server_processes_match_single_process(self, tmp_path):
        frames = 1000
        keep = sorted(random.Random(5).sample(range(frames), 3))
        text = offload_config("160x120", keep)
        config_path = tmp_path / "offload.yaml"
        config_path.write_text(text)

        server = _start_server(config_path)
        try:
            _wait_for_listeners(server, 2)
            client = instantiate(parse_config(text), Role.CLIENT)
            report = client.run_for(frames=frames)
            assert server.wait(timeout=60) == 0
        finally:
            if server.poll() is None:
                server.kill()

        assert report.ok, report.error
        sink = report.sink("sink")
        assert sink.received == frames
        assert [r.seq for r in sink.records] == list(range(frames))

        source = SyntheticFrameSource("cam", resolution="160x120", fill="random:11")
        expected = {}
        for seq in range(frames):
            frame = source.next_frame()
            if seq in keep:
                expected[seq] = to_grayscale(frame.payload.data)
        kept = client.kernel("sink").kept
        for seq in keep:
            assert np.array_equal(kept[seq].payload.data, expected[seq])

        single = instantiate(parse_config(offload_config("160x120", keep)), Role.ALL).run_for(frames=frames)
        assert single.sink("sink").digest == sink.digest
