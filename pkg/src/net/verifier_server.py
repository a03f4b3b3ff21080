#!/usr/bin/env python3
"""
Verifier Server for ScaRR

Accepts prover connections, issues one challenge per connection and verifies
the partial reports that come back, acknowledging each accepted report and
raising an alarm on the first violation.
"""

import logging
import socket
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

from core.errors import CodecError, FrameError
from core.measurement_db import MeasurementsDb
from core.prover_engine import decode_report
from core.verifier_engine import Violation, ViolationKind, issue_challenge
from core.settings_manager import DEFAULT_PORT

from .wire_protocol import Ack, Alarm, Codec, MessageType, read_frame, write_frame

logger = logging.getLogger(__name__)


@dataclass
class SessionResult:
    """What happened on one prover connection."""
    peer: str
    reports_accepted: int = 0
    measurements_verified: int = 0
    violation: Optional[Violation] = None
    completed: bool = False
    error: Optional[str] = None


class VerifierServer:
    """Threaded TCP verifier; one worker per connection."""

    def __init__(self, db: MeasurementsDb, key: bytes, host: str = "127.0.0.1",
                 port: int = DEFAULT_PORT, max_workers: int = 4,
                 challenge_input: bytes = b"", socket_timeout: Optional[float] = 30.0,
                 nonce: Optional[bytes] = None):
        """Initialize the server.

        Args:
            db: Loaded measurements DB
            key: Shared secret
            host: Bind host
            port: Bind port, 0 for an ephemeral port
            max_workers: Concurrent sessions
            challenge_input: Opaque input sent with every challenge
            socket_timeout: Per-connection socket timeout in seconds
            nonce: Fixed nonce for every session, tests only
        """
        self.db = db
        self.key = key
        self.host = host
        self.port = port
        self.max_workers = max_workers
        self.challenge_input = challenge_input
        self.socket_timeout = socket_timeout
        self.fixed_nonce = nonce
        self.results: List[SessionResult] = []
        self._results_lock = threading.Lock()
        self._listener: Optional[socket.socket] = None
        self._executor: Optional[ThreadPoolExecutor] = None
        self._accept_thread: Optional[threading.Thread] = None
        self._stopping = threading.Event()

    @property
    def address(self) -> Tuple[str, int]:
        if self._listener is None:
            return self.host, self.port
        return self._listener.getsockname()[:2]

    def start(self) -> Tuple[str, int]:
        """Bind, listen and accept in a background thread.

        Returns:
            The bound (host, port)
        """
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, self.port))
        listener.listen()
        listener.settimeout(0.5)
        self._listener = listener
        self._executor = ThreadPoolExecutor(max_workers=self.max_workers)
        self._accept_thread = threading.Thread(target=self._accept_loop, name="scarr-accept", daemon=True)
        self._accept_thread.start()
        logger.info("Verifier listening on %s:%d", *self.address)
        return self.address

    def serve_forever(self) -> None:
        """Start and block until shutdown() or KeyboardInterrupt."""
        if self._listener is None:
            self.start()
        try:
            while not self._stopping.wait(0.5):
                pass
        except KeyboardInterrupt:
            logger.info("Interrupted, shutting down")
        finally:
            self.shutdown()

    def shutdown(self) -> None:
        self._stopping.set()
        if self._accept_thread is not None:
            self._accept_thread.join()
            self._accept_thread = None
        if self._listener is not None:
            self._listener.close()
            self._listener = None
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self) -> "VerifierServer":
        self.start()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.shutdown()

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                if not self._stopping.is_set():
                    logger.exception("Accept failed")
                break
            self._executor.submit(self._serve_connection, conn, addr)

    def _serve_connection(self, conn: socket.socket, addr) -> SessionResult:
        peer = f"{addr[0]}:{addr[1]}"
        conn.settimeout(self.socket_timeout)
        with conn:
            try:
                result = self.handle_session(conn, peer)
            except Exception as e:
                logger.exception("Session with %s failed", peer)
                result = SessionResult(peer, error=str(e))
        with self._results_lock:
            self.results.append(result)
        return result

    def handle_session(self, conn: socket.socket, peer: str) -> SessionResult:
        """Run one challenge/report exchange on a connected socket."""
        challenge, session = issue_challenge(self.challenge_input, self.db, self.key, self.fixed_nonce)
        result = SessionResult(peer)
        write_frame(conn, challenge)
        logger.info("Session with %s started", peer)

        while True:
            try:
                frame = read_frame(conn)
            except CodecError as e:
                violation = Violation(ViolationKind.INTEGRITY, detail=f"undecodable frame: {e}")
                self._raise_alarm(conn, Codec.NONE, violation, result)
                return result
            except (FrameError, OSError) as e:
                logger.warning("Session with %s aborted: %s", peer, e)
                result.error = str(e)
                return result
            if frame is None:
                logger.warning("Session with %s closed before output", peer)
                result.error = "connection closed before output"
                return result

            if frame.msg_type is MessageType.PARTIAL_REPORT:
                violation = session.verify_serialized(frame.payload)
                if violation is not None:
                    self._raise_alarm(conn, frame.codec, violation, result)
                    return result
                report = decode_report(frame.payload)
                write_frame(conn, Ack(report.thread_id, report.index), frame.codec)
                result.reports_accepted = session.reports_accepted
                result.measurements_verified = session.measurements_verified
            elif frame.msg_type is MessageType.OUTPUT:
                result.completed = True
                logger.info("Session with %s complete: %d reports, %d measurements verified",
                            peer, result.reports_accepted, result.measurements_verified)
                return result
            else:
                logger.warning("Session with %s sent unexpected %s frame", peer, frame.msg_type.name)
                result.error = f"unexpected {frame.msg_type.name} frame"
                return result

    def _raise_alarm(self, conn: socket.socket, codec: Codec, violation: Violation,
                     result: SessionResult) -> None:
        result.violation = violation
        try:
            write_frame(conn, Alarm(violation.render()), codec)
        except OSError as e:
            logger.warning("Could not deliver alarm to %s: %s", result.peer, e)


def run_verifier_server(db: MeasurementsDb, key: bytes, host: str = "127.0.0.1",
                        port: int = DEFAULT_PORT, **options) -> VerifierServer:
    """Serve until interrupted; returns the stopped server."""
    server = VerifierServer(db, key, host, port, **options)
    server.serve_forever()
    return server
