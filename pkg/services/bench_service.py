"""
Transfer-latency benchmarks over a two-kernel, one-link pipeline

Each cell runs SyntheticFrameSource -> LatencySink over one data link for
warmup + N frames and reports statistics over the last N. The producer runs
in lockstep with the consumer (the next frame is built only after the
previous one was recorded), so frame construction never overlaps a
measured interval.
"""

import csv
import io
import logging
import statistics
import threading
from typing import Callable, Iterable, List, Optional, Sequence

from config import defaults
from models import BenchCell, BenchTable, ChannelKind, CodecId, LatencyRecord, LatencySummary, TableFormat
from services.errors import ChannelClosed, EmptyInput, InvalidArgument, LinkClosed
from services.kernels import LatencySink, SyntheticFrameSource
from services.local_channel import channel_create
from services.remote_link import loopback_pair

NS_PER_MS = 1_000_000


# ==================== STATISTICS ====================

def nearest_rank(sorted_values: Sequence[float], percent: int) -> float:
    """Smallest value with at least `percent`% of samples at or below it."""
    n = len(sorted_values)
    rank = max(1, -(-percent * n // 100))
    return sorted_values[rank - 1]


def summarize_ns(values_ns: Iterable[int]) -> LatencySummary:
    values = sorted(values_ns)
    if not values:
        raise EmptyInput("cannot summarize zero latency records")
    return LatencySummary(
        mean_ms=round(statistics.fmean(values) / NS_PER_MS, 3),
        p50_ms=round(nearest_rank(values, 50) / NS_PER_MS, 3),
        p99_ms=round(nearest_rank(values, 99) / NS_PER_MS, 3),
        n=len(values),
    )


def summarize(records: Sequence[LatencyRecord], metric: str = "e2e") -> LatencySummary:
    """
    Mean and nearest-rank p50/p99 in milliseconds (3 decimals)

    Args:
        records: Latency records
        metric: "e2e" (created -> arrival) or "transfer" (sent -> arrival)
    """
    if metric not in ("e2e", "transfer"):
        raise InvalidArgument(f"unknown metric '{metric}'")
    attr = "e2e_ns" if metric == "e2e" else "transfer_ns"
    return summarize_ns(getattr(r, attr) for r in records)


def _in_order(records: Sequence[LatencyRecord]) -> bool:
    return all(b.seq == a.seq + 1 for a, b in zip(records, records[1:]))


def _check_args(resolutions: Sequence[str], frames: int) -> None:
    if frames < 1:
        raise InvalidArgument(f"frames must be >= 1, got {frames}")
    if not resolutions:
        raise InvalidArgument("at least one resolution is required")


def _lockstep(produce: Callable[[threading.Semaphore], None],
              consume: Callable[[threading.Semaphore], None]) -> None:
    """Run producer and consumer contexts to completion, re-raising the first failure."""
    turn = threading.Semaphore(1)
    errors: List[BaseException] = []

    def guarded(fn: Callable[[threading.Semaphore], None]) -> None:
        try:
            fn(turn)
        except BaseException as e:
            errors.append(e)
            turn.release()

    threads = [
        threading.Thread(target=guarded, args=(produce,), name="bench-producer", daemon=True),
        threading.Thread(target=guarded, args=(consume,), name="bench-consumer", daemon=True),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]


# ==================== LOCAL ====================

def _bench_local_cell(resolution: str, frames: int, kind: ChannelKind, warmup: int) -> BenchCell:
    total = warmup + frames
    source = SyntheticFrameSource("source", resolution=resolution, frame_budget=total, fill="constant:0")
    sink = LatencySink("sink", record_cap=total)
    send, recv = channel_create(defaults.CHANNEL_CAPACITY, kind=kind)
    sent_ids: List[int] = []

    def produce(turn: threading.Semaphore) -> None:
        try:
            while not source.finished:
                turn.acquire()
                message = source.next_frame()
                sent_ids.append(message.alloc_id)
                send.send(message)
        finally:
            send.close()

    def consume(turn: threading.Semaphore) -> None:
        try:
            while True:
                try:
                    message = recv.recv()
                except ChannelClosed:
                    return
                sink.record(message)
                turn.release()
        finally:
            recv.close()

    _lockstep(produce, consume)

    measured = sink.records[warmup:]
    summary = summarize(measured, metric="transfer")
    matches = sum(1 for sid, rec in zip(sent_ids[warmup:], measured) if sid == rec.alloc_id)
    return BenchCell(
        kind=kind.value.lower(),
        resolution=resolution,
        mean_ms=summary.mean_ms,
        p50_ms=summary.p50_ms,
        p99_ms=summary.p99_ms,
        n=summary.n,
        alloc_id_matches=matches,
        in_order=_in_order(sink.records),
    )


def bench_local(
    resolutions: Sequence[str],
    frames: int = defaults.BENCH_DEFAULT_FRAMES,
    kind: ChannelKind = ChannelKind.ZEROCOPY,
    warmup: int = defaults.BENCH_WARMUP_FRAMES,
) -> BenchTable:
    """
    Measure sent -> arrival latency over one local channel per resolution

    Returns:
        BenchTable with one cell per resolution for this channel kind
    """
    _check_args(resolutions, frames)
    kind = ChannelKind(kind)
    table = BenchTable()
    for resolution in resolutions:
        logging.info(f"⏱️  bench-local {kind.value.lower()} {resolution}: {warmup} warmup + {frames} frames")
        cell = _bench_local_cell(resolution, frames, kind, warmup)
        logging.info(f"   mean={cell.mean_ms:.3f}ms p99={cell.p99_ms:.3f}ms n={cell.n}")
        table.cells.append(cell)
    return table


# ==================== REMOTE ====================

def _bench_remote_cell(resolution: str, frames: int, codec: CodecId, address: str,
                       warmup: int, fill: str) -> BenchCell:
    total = warmup + frames
    source = SyntheticFrameSource("source", resolution=resolution, frame_budget=total, fill=fill)
    sink = LatencySink("sink", record_cap=total)
    sender, receiver = loopback_pair(address, codec)

    def produce(turn: threading.Semaphore) -> None:
        try:
            while not source.finished:
                turn.acquire()
                sender.send(source.next_frame())
        finally:
            sender.close()

    def consume(turn: threading.Semaphore) -> None:
        try:
            while True:
                try:
                    message = receiver.recv()
                except LinkClosed:
                    return
                sink.record(message, arrival_ns=message.meta.get("arrival_ns"))
                turn.release()
        finally:
            receiver.abort()

    _lockstep(produce, consume)

    measured = sink.records[warmup:]
    summary = summarize(measured, metric="e2e")
    return BenchCell(
        kind=f"remote-{codec.value.lower()}",
        resolution=resolution,
        mean_ms=summary.mean_ms,
        p50_ms=summary.p50_ms,
        p99_ms=summary.p99_ms,
        n=summary.n,
        bytes_per_frame=round(sender.bytes_per_frame or 0),
        in_order=_in_order(sink.records),
    )


def bench_remote(
    resolutions: Sequence[str],
    frames: int = defaults.BENCH_DEFAULT_FRAMES,
    codec: CodecId = CodecId.RAW,
    address: str = defaults.BENCH_DEFAULT_ADDRESS,
    warmup: int = defaults.BENCH_WARMUP_FRAMES,
    fill: str = "constant:0",
) -> BenchTable:
    """
    Measure created -> arrival latency over a loopback link per resolution

    Both ends run in this process so the monotonic clocks agree.
    """
    _check_args(resolutions, frames)
    codec = CodecId(codec)
    table = BenchTable()
    for resolution in resolutions:
        logging.info(f"⏱️  bench-remote {codec.value} {resolution} via {address}: {warmup} warmup + {frames} frames")
        cell = _bench_remote_cell(resolution, frames, codec, address, warmup, fill)
        logging.info(f"   mean={cell.mean_ms:.3f}ms bytes/frame={cell.bytes_per_frame} n={cell.n}")
        table.cells.append(cell)
    return table


# ==================== RENDERING ====================

CSV_COLUMNS = ["kind", "resolution", "mean_ms", "p50_ms", "p99_ms", "n"]


def _ordered_cells(table: BenchTable) -> List[BenchCell]:
    cells = []
    for kind in table.kinds():
        for resolution in table.resolutions():
            cell = table.cell(kind, resolution)
            if cell is not None:
                cells.append(cell)
    return cells


def render_table(table: BenchTable, fmt: TableFormat = TableFormat.MARKDOWN) -> str:
    """
    Render as CSV (one row per cell) or a Markdown grid (kinds × resolutions)

    Kinds keep declaration order; resolutions ascend by pixel count.
    """
    fmt = TableFormat(fmt)
    if fmt == TableFormat.CSV:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for c in _ordered_cells(table):
            writer.writerow([c.kind, c.resolution, f"{c.mean_ms:.3f}", f"{c.p50_ms:.3f}", f"{c.p99_ms:.3f}", c.n])
        return out.getvalue()

    resolutions = table.resolutions()
    lines = [
        "| kind \\ resolution |" + "".join(f" {r} |" for r in resolutions),
        "|---|" + "---|" * len(resolutions),
    ]
    for kind in table.kinds():
        row = f"| {kind} |"
        for resolution in resolutions:
            cell: Optional[BenchCell] = table.cell(kind, resolution)
            row += f" {cell.mean_ms:.3f} |" if cell else " - |"
        lines.append(row)
    return "\n".join(lines) + "\n"
