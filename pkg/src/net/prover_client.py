#!/usr/bin/env python3
"""
Prover Client for ScaRR

Connects to a verifier, answers its challenge by replaying a trace and
streams the sealed partial reports in lockstep with the verifier's acks.
"""

import logging
import socket
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

from core.errors import FrameError
from core.measurement_db import MeasurementsDb
from core.prover_engine import PartialReport, ProverSession, TraceEvent, replay_trace
from core.verifier_engine import Challenge

from .wire_protocol import (
    Ack, Alarm, CodecMode, MessageType, Output, decode_payload, read_frame, write_frame,
)

logger = logging.getLogger(__name__)


@dataclass
class ClientSummary:
    """Outcome of one prover session."""
    reports: int = 0
    acks: int = 0
    alarms: int = 0
    violation: Optional[str] = None
    events: int = 0
    measurements: int = 0
    bytes_raw: int = 0
    bytes_wire: int = 0


class _AlarmRaised(Exception):
    pass


class ProverClient:
    """One prover connection."""

    def __init__(self, db: MeasurementsDb, key: bytes, mode: CodecMode,
                 nonce_override: Optional[bytes] = None, timeout: Optional[float] = 30.0):
        self.db = db
        self.key = key
        self.mode = mode
        self.nonce_override = nonce_override
        self.timeout = timeout

    def _expect(self, sock: socket.socket, msg_type: MessageType):
        frame = read_frame(sock)
        if frame is None:
            raise FrameError("verifier closed the connection")
        if frame.msg_type is MessageType.ALARM:
            return decode_payload(frame.msg_type, frame.payload)
        if frame.msg_type is not msg_type:
            raise FrameError(f"expected {msg_type.name}, got {frame.msg_type.name}")
        return decode_payload(frame.msg_type, frame.payload)

    def run(self, address: Tuple[str, int], trace: Iterable[TraceEvent],
            output: bytes = b"") -> ClientSummary:
        """Connect, attest the trace and send the output.

        Args:
            address: Verifier (host, port)
            trace: Trace events to replay
            output: Program output sent at the end

        Returns:
            ClientSummary; violation is set when the verifier raised an alarm

        Raises:
            FrameError: Connection lost or protocol out of step
        """
        summary = ClientSummary()
        with socket.create_connection(address, timeout=self.timeout) as sock:
            challenge = self._expect(sock, MessageType.CHALLENGE)
            if not isinstance(challenge, Challenge):
                raise FrameError(f"verifier refused the session: {challenge}")
            nonce = self.nonce_override or challenge.nonce
            session = ProverSession(self.key, nonce, self.mode.batch, self.db.checkpoints, self.db.algorithm)

            def send(report: PartialReport) -> None:
                raw, wire = write_frame(sock, report, self.mode.codec)
                summary.reports += 1
                summary.bytes_raw += raw
                summary.bytes_wire += wire
                reply = self._expect(sock, MessageType.ACK)
                if isinstance(reply, Alarm):
                    summary.alarms += 1
                    summary.violation = reply.line
                    raise _AlarmRaised(reply.line)
                if not isinstance(reply, Ack) or (reply.thread_id, reply.index) != (report.thread_id, report.index):
                    raise FrameError(f"ack {reply} does not match report {report.thread_id}/{report.index}")
                summary.acks += 1

            try:
                replayed = replay_trace(session, trace, send)
                summary.events = replayed.event_count
                summary.measurements = replayed.measurement_count
            except _AlarmRaised:
                logger.warning("Verifier raised an alarm: %s", summary.violation)
                summary.measurements = sum(s.measurement_count for s in session.threads.values())
                return summary
            except OSError as e:
                raise FrameError(f"connection lost: {e}") from e

            raw, wire = write_frame(sock, Output(output), self.mode.codec)
            summary.bytes_raw += raw
            summary.bytes_wire += wire
        logger.info("Attested %d measurements in %d reports (%d bytes on wire)",
                    summary.measurements, summary.reports, summary.bytes_wire)
        return summary


def run_prover_client(address: Tuple[str, int], db: MeasurementsDb, trace: Iterable[TraceEvent],
                      mode: CodecMode, key: bytes, nonce_override: Optional[bytes] = None,
                      timeout: Optional[float] = 30.0) -> ClientSummary:
    return ProverClient(db, key, mode, nonce_override, timeout).run(address, trace)
