#!/usr/bin/env python3
"""
Prover Engine for ScaRR

Replays execution traces: edges are collected per thread, every checkpoint
crossing closes an online measurement, and measurements are batched into
partial reports authenticated with a keyed MAC over payload, nonce and index.
"""

import hmac
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Tuple, Union

from .cfg_model import BblId, CheckpointKind, Edge, EdgeKind, MeasurementKey
from .errors import ConfigError, EmptyBatchError, ParseError, ProtocolError
from .measurement_db import (
    DEFAULT_ALGORITHM, DIGEST_SIZE, ByteReader, hash_constructor, hash_loa, pack_label,
)

logger = logging.getLogger(__name__)

NONCE_SIZE = 16

OnlineMeasurement = MeasurementKey


@dataclass(frozen=True)
class EdgeTraversal:
    thread_id: int
    edge: Edge


@dataclass(frozen=True)
class CheckpointCross:
    thread_id: int
    node: BblId


TraceEvent = Union[EdgeTraversal, CheckpointCross]


@dataclass(frozen=True)
class PartialReport:
    """Authenticated batch of one thread's online measurements."""
    index: int
    thread_id: int
    measurements: Tuple[OnlineMeasurement, ...]
    fingerprint: bytes
    # serialized R as sealed or received
    encoded_body: Optional[bytes] = field(default=None, compare=False, repr=False)

    def body(self) -> bytes:
        if self.encoded_body is not None:
            return self.encoded_body
        return encode_report_body(self.thread_id, self.measurements)

    def to_bytes(self) -> bytes:
        return encode_report(self)


# ---------------------------------------------------------------------------
# Report encoding and MAC
# ---------------------------------------------------------------------------

def encode_report_body(thread_id: int, measurements: Iterable[OnlineMeasurement]) -> bytes:
    """Canonical serialization of R: thread id, count, then each triplet."""
    measurements = list(measurements)
    out = bytearray(struct.pack("<II", thread_id, len(measurements)))
    for m in measurements:
        out += pack_label(m.cp_a)
        out += pack_label(m.cp_b)
        out += m.loa_hash
    return bytes(out)


def encode_report(report: PartialReport) -> bytes:
    """index | R | fingerprint."""
    return struct.pack("<Q", report.index) + report.body() + report.fingerprint


def decode_report(payload: bytes) -> PartialReport:
    """Parse a report payload.

    Raises:
        FormatError: Truncated or trailing data
    """
    reader = ByteReader(payload)
    index = reader.u64()
    body_start = reader.offset
    thread_id = reader.u32()
    measurements = []
    for _ in range(reader.u32()):
        cp_a, cp_b = reader.label(), reader.label()
        measurements.append(MeasurementKey(cp_a, cp_b, reader.read(DIGEST_SIZE)))
    body = bytes(payload[body_start:reader.offset])
    fingerprint = reader.read(DIGEST_SIZE)
    reader.expect_end()
    return PartialReport(index, thread_id, tuple(measurements), fingerprint, body)


def compute_fingerprint(key: bytes, body: bytes, nonce: bytes, index: int,
                        algorithm: str = DEFAULT_ALGORITHM) -> bytes:
    """F_K(R || N || i) as HMAC over the configured digest."""
    message = body + nonce + struct.pack("<Q", index)
    return hmac.new(key, message, digestmod=hash_constructor(algorithm)).digest()


def verify_fingerprint(key: bytes, nonce: bytes, report: PartialReport,
                       algorithm: str = DEFAULT_ALGORITHM) -> bool:
    expected = compute_fingerprint(key, report.body(), nonce, report.index, algorithm)
    return hmac.compare_digest(expected, report.fingerprint)


# ---------------------------------------------------------------------------
# Session
# ---------------------------------------------------------------------------

@dataclass
class ThreadState:
    current_cp: Optional[BblId] = None
    pending_edges: List[Edge] = field(default_factory=list)
    pending_measurements: List[OnlineMeasurement] = field(default_factory=list)
    next_index: int = 0
    measurement_count: int = 0


@dataclass
class ReplaySummary:
    event_count: int = 0
    measurement_count: int = 0
    report_count: int = 0


class ProverSession:
    """Prover state for one challenge.

    Owned by a single caller; no internal locking.
    """

    def __init__(self, key: bytes, nonce: bytes, batch_limit: int,
                 checkpoints: Optional[Mapping[BblId, CheckpointKind]] = None,
                 algorithm: str = DEFAULT_ALGORITHM):
        """Initialize a prover session.

        Args:
            key: Shared secret K
            nonce: 16-byte challenge nonce N
            batch_limit: Measurements per partial report
            checkpoints: Known checkpoint annotations. Without them crossings
                are taken at face value: any node may be crossed and a thread
                may start anywhere.
            algorithm: Hash algorithm for LoAs and the MAC
        """
        if batch_limit < 1:
            raise ConfigError(f"batch limit must be >= 1, got {batch_limit}")
        if len(nonce) != NONCE_SIZE:
            raise ConfigError(f"nonce must be {NONCE_SIZE} bytes, got {len(nonce)}")
        hash_constructor(algorithm)
        self.key = key
        self.nonce = bytes(nonce)
        self.batch_limit = batch_limit
        self.checkpoints = dict(checkpoints) if checkpoints is not None else None
        if self.checkpoints is None:
            logger.debug("No checkpoint table given; crossings are not validated")
        self.algorithm = algorithm
        self.threads: Dict[int, ThreadState] = {}

    def _check_checkpoint(self, node: BblId, position: Optional[int]) -> Optional[CheckpointKind]:
        if self.checkpoints is None:
            return None
        kind = self.checkpoints.get(node)
        if kind is None:
            raise ProtocolError(f"crossing names non-checkpoint node {node!r}", position)
        return kind

    def record_event(self, event: TraceEvent, position: Optional[int] = None) -> List[PartialReport]:
        """Feed one trace event.

        Args:
            event: EdgeTraversal or CheckpointCross
            position: Event position, used in error messages

        Returns:
            Reports sealed because a batch filled up (usually empty)

        Raises:
            ProtocolError: Edge before the first checkpoint or bad crossing
        """
        if isinstance(event, EdgeTraversal):
            state = self.threads.get(event.thread_id)
            if state is None or state.current_cp is None:
                raise ProtocolError(
                    f"thread {event.thread_id} traversed {event.edge} before any checkpoint", position)
            if event.edge.kind.is_significant:
                state.pending_edges.append(event.edge)
            return []

        kind = self._check_checkpoint(event.node, position)
        state = self.threads.get(event.thread_id)
        if state is None:
            state = self.threads[event.thread_id] = ThreadState()
        if state.current_cp is None:
            if kind is not None and kind is not CheckpointKind.THREAD_BEGIN:
                raise ProtocolError(
                    f"thread {event.thread_id} starts at {event.node!r}, which is not thread_begin",
                    position)
            state.current_cp = event.node
            return []

        measurement = MeasurementKey(state.current_cp, event.node,
                                     hash_loa(state.pending_edges, self.algorithm))
        state.pending_measurements.append(measurement)
        state.measurement_count += 1
        state.current_cp = event.node
        state.pending_edges.clear()
        logger.debug("Thread %d measurement %s", event.thread_id, measurement)

        if len(state.pending_measurements) >= self.batch_limit:
            return [self.seal_report(event.thread_id)]
        return []

    def seal_report(self, thread_id: int) -> PartialReport:
        """Seal the pending measurements of a thread into a PartialReport.

        Raises:
            EmptyBatchError: Nothing pending for thread_id
        """
        state = self.threads.get(thread_id)
        if state is None or not state.pending_measurements:
            raise EmptyBatchError(f"thread {thread_id} has no pending measurements")
        measurements = tuple(state.pending_measurements)
        body = encode_report_body(thread_id, measurements)
        index = state.next_index
        report = PartialReport(index, thread_id, measurements,
                               compute_fingerprint(self.key, body, self.nonce, index, self.algorithm),
                               body)
        state.next_index += 1
        state.pending_measurements.clear()
        return report

    def flush(self) -> List[PartialReport]:
        """Seal every thread's non-empty batch, in thread first-seen order."""
        return [self.seal_report(tid) for tid, state in self.threads.items()
                if state.pending_measurements]


def start_session(key: bytes, nonce: bytes, batch_limit: int,
                  checkpoints: Optional[Mapping[BblId, CheckpointKind]] = None,
                  algorithm: str = DEFAULT_ALGORITHM) -> ProverSession:
    return ProverSession(key, nonce, batch_limit, checkpoints, algorithm)


def record_event(session: ProverSession, event: TraceEvent) -> List[PartialReport]:
    return session.record_event(event)


def seal_report(session: ProverSession, thread_id: int) -> PartialReport:
    return session.seal_report(thread_id)


def replay_trace(session: ProverSession, trace: Iterable[TraceEvent],
                 sink: Callable[[PartialReport], None]) -> ReplaySummary:
    """Drive a whole trace through a session.

    Args:
        session: Fresh ProverSession
        trace: Events in order
        sink: Called with every sealed report, including the final flush

    Returns:
        ReplaySummary with event, measurement and report counts
    """
    summary = ReplaySummary()
    before = sum(s.measurement_count for s in session.threads.values())
    for position, event in enumerate(trace, start=1):
        summary.event_count += 1
        for report in session.record_event(event, position):
            summary.report_count += 1
            sink(report)
    for report in session.flush():
        summary.report_count += 1
        sink(report)
    summary.measurement_count = sum(s.measurement_count for s in session.threads.values()) - before
    logger.debug("Replayed %d events into %d measurements, %d reports",
                 summary.event_count, summary.measurement_count, summary.report_count)
    return summary


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------

def format_event(event: TraceEvent) -> str:
    if isinstance(event, EdgeTraversal):
        e = event.edge
        return f"T {event.thread_id} E {e.src} {e.dst} {e.kind.value}"
    return f"T {event.thread_id} C {event.node}"


def parse_trace_line(line: str, line_number: Optional[int] = None) -> TraceEvent:
    fields = line.split()
    if len(fields) < 4 or fields[0] != "T":
        raise ParseError(f"expected 'T <tid> E|C ...', got {line.strip()!r}", line_number)
    try:
        thread_id = int(fields[1])
    except ValueError:
        raise ParseError(f"thread id {fields[1]!r} is not an integer", line_number) from None
    if thread_id < 0 or thread_id > 0xFFFFFFFF:
        raise ParseError(f"thread id {thread_id} out of range", line_number)

    if fields[2] == "C" and len(fields) == 4:
        return CheckpointCross(thread_id, fields[3])
    if fields[2] == "E" and len(fields) == 6:
        try:
            kind = EdgeKind(fields[5])
        except ValueError:
            raise ParseError(f"unknown edge kind {fields[5]!r}", line_number) from None
        return EdgeTraversal(thread_id, Edge(fields[3], fields[4], kind))
    raise ParseError(f"malformed event {line.strip()!r}", line_number)


def parse_trace(text: str) -> List[TraceEvent]:
    events = []
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        events.append(parse_trace_line(stripped, number))
    return events


def load_trace(path: Union[str, Path]) -> List[TraceEvent]:
    """Read a trace file.

    Raises:
        ParseError: Unreadable file or malformed line (with line number)
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ParseError(f"cannot read trace {path}: {e}") from e
    return parse_trace(text)


def dump_trace(events: Iterable[TraceEvent], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for event in events:
            f.write(format_event(event) + "\n")
