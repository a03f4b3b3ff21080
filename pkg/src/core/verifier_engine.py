#!/usr/bin/env python3
"""
Verifier Engine for ScaRR

Issues challenges and validates partial reports: fingerprint and freshness,
measurement lookup (C1), checkpoint chaining (C2) and shadow-stack coherence
through ret_to (C3). Outcomes are values: None for Ok, or a Violation.
"""

import logging
import secrets
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Collection, Dict, Iterable, List, Mapping, Optional, Tuple, Union

from .cfg_model import BblId, CheckpointKind, Edge, EdgeKind, RetToRelation
from .errors import ConfigError, FormatError
from .measurement_db import MeasurementsDb
from .prover_engine import NONCE_SIZE, PartialReport, decode_report, verify_fingerprint

logger = logging.getLogger(__name__)


class ViolationKind(Enum):
    INTEGRITY = "integrity"
    REPLAY = "replay"
    UNKNOWN_MEASUREMENT = "unknown_measurement"
    CHAIN_BREAK = "chain_break"
    SHADOW_STACK_MISMATCH = "shadow_stack_mismatch"
    UNDERFLOW = "underflow"


@dataclass(frozen=True)
class Violation:
    """First anomaly found while verifying a report."""
    kind: ViolationKind
    thread_id: Optional[int] = None
    report_index: Optional[int] = None
    measurement_ordinal: Optional[int] = None
    detail: str = ""

    def render(self) -> str:
        def show(value):
            return "-" if value is None else str(value)
        return (f"VIOLATION kind={self.kind.value} thread={show(self.thread_id)} "
                f"report={show(self.report_index)} measurement={show(self.measurement_ordinal)} "
                f"detail={self.detail or '-'}")

    def __str__(self) -> str:
        return self.render()


@dataclass
class ShadowStackState:
    stack: List[Edge] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.stack)


@dataclass(frozen=True)
class Challenge:
    input: bytes
    nonce: bytes


@dataclass
class ThreadVerifierState:
    expected_index: int = 0
    last_cp_b: Optional[BblId] = None
    shadow: ShadowStackState = field(default_factory=ShadowStackState)


RetToSource = Union[MeasurementsDb, Mapping[Edge, Collection[Edge]], Iterable[RetToRelation]]


def _ret_to_map(ret_to: RetToSource) -> Mapping[Edge, Collection[Edge]]:
    if isinstance(ret_to, MeasurementsDb):
        return ret_to.ret_to
    if isinstance(ret_to, Mapping):
        return ret_to
    relations: Dict[Edge, set] = {}
    for relation in ret_to:
        relations.setdefault(relation.return_edge, set()).add(relation.call_edge)
    return relations


def apply_loa(shadow: ShadowStackState, subset: Iterable[Edge],
              ret_to: RetToSource) -> Optional[Violation]:
    """Replay a call/return subset on the shadow stack.

    The stack is only mutated when the whole subset applies cleanly.

    Args:
        shadow: Thread shadow stack
        subset: Call and Return edges, in order
        ret_to: Relations keyed by return edge

    Returns:
        None on success, else an Underflow or ShadowStackMismatch Violation
        (thread/report/ordinal left for the caller to fill in)
    """
    stack = list(shadow.stack)
    violation = _replay_subset(stack, subset, _ret_to_map(ret_to))
    if violation is None:
        shadow.stack[:] = stack
    return violation


def _replay_subset(stack: List[Edge], subset: Iterable[Edge],
                   relations: Mapping[Edge, Collection[Edge]]) -> Optional[Violation]:
    """apply_loa on a bare list, mutating it even on failure."""
    for edge in subset:
        if edge.kind is EdgeKind.CALL:
            stack.append(edge)
        elif edge.kind is EdgeKind.RETURN:
            if not stack:
                return Violation(ViolationKind.UNDERFLOW, detail=f"return {edge} on empty shadow stack")
            top = stack[-1]
            if top not in relations.get(edge, ()):
                return Violation(ViolationKind.SHADOW_STACK_MISMATCH,
                                 detail=f"return {edge} does not match call {top}")
            stack.pop()
    return None


class VerifierSession:
    """Verification state for one challenge.

    Reports of one thread must arrive in index order; different threads may
    be verified concurrently, each under its own lock.
    """

    def __init__(self, key: bytes, nonce: bytes, db: MeasurementsDb):
        if len(nonce) != NONCE_SIZE:
            raise ConfigError(f"nonce must be {NONCE_SIZE} bytes, got {len(nonce)}")
        self.key = key
        self.nonce = bytes(nonce)
        self.db = db
        self.per_thread: Dict[int, ThreadVerifierState] = {}
        self.reports_accepted = 0
        self.measurements_verified = 0
        self._locks: Dict[int, threading.Lock] = {}
        self._guard = threading.Lock()

    def _lock_for(self, thread_id: int) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(thread_id, threading.Lock())

    def verify_report(self, report: PartialReport) -> Optional[Violation]:
        """Verify one partial report.

        Args:
            report: Decoded PartialReport

        Returns:
            None when accepted, else the first Violation; state is only
            advanced for accepted reports
        """
        with self._lock_for(report.thread_id):
            violation = self._verify_locked(report)
        if violation is not None:
            logger.warning("%s", violation.render())
        return violation

    def _verify_locked(self, report: PartialReport) -> Optional[Violation]:
        tid, index = report.thread_id, report.index
        if not verify_fingerprint(self.key, self.nonce, report, self.db.algorithm):
            return Violation(ViolationKind.INTEGRITY, tid, index, None, "fingerprint mismatch")

        state = self.per_thread.get(tid) or ThreadVerifierState()
        if index != state.expected_index:
            return Violation(ViolationKind.REPLAY, tid, index, None,
                             f"index {index}, expected {state.expected_index}")

        db = self.db
        last_cp_b = state.last_cp_b
        stack = list(state.shadow.stack)
        for ordinal, measurement in enumerate(report.measurements):
            offline = db.entries.get(measurement)
            if offline is None:
                return Violation(ViolationKind.UNKNOWN_MEASUREMENT, tid, index, ordinal,
                                 f"{measurement} not in measurements DB")

            if last_cp_b is None:
                if db.checkpoints and db.kind_of(measurement.cp_a) is not CheckpointKind.THREAD_BEGIN:
                    return Violation(ViolationKind.CHAIN_BREAK, tid, index, ordinal,
                                     f"thread starts at {measurement.cp_a}, which is not thread_begin")
            elif measurement.cp_a != last_cp_b:
                return Violation(ViolationKind.CHAIN_BREAK, tid, index, ordinal,
                                 f"{measurement.cp_a} does not follow {last_cp_b}")

            if offline.call_ret_subset:
                outcome = _replay_subset(stack, offline.call_ret_subset, db.ret_to)
                if outcome is not None:
                    return replace(outcome, thread_id=tid, report_index=index, measurement_ordinal=ordinal)

            if stack and db.kind_of(measurement.cp_b) is CheckpointKind.THREAD_END:
                return Violation(ViolationKind.SHADOW_STACK_MISMATCH, tid, index, ordinal,
                                 f"thread ended at {measurement.cp_b} with {len(stack)} pending calls")
            last_cp_b = measurement.cp_b

        state.last_cp_b = last_cp_b
        state.shadow = ShadowStackState(stack)
        state.expected_index += 1
        self.per_thread[tid] = state
        with self._guard:
            self.reports_accepted += 1
            self.measurements_verified += len(report.measurements)
        return None

    def verify_serialized(self, payload: bytes) -> Optional[Violation]:
        """Decode and verify a report payload; undecodable payloads are Integrity."""
        try:
            report = decode_report(payload)
        except FormatError as e:
            violation = Violation(ViolationKind.INTEGRITY, detail=f"undecodable report: {e}")
            logger.warning("%s", violation.render())
            return violation
        return self.verify_report(report)

    def thread_depths(self) -> Dict[int, int]:
        return {tid: state.shadow.depth for tid, state in self.per_thread.items()}


def issue_challenge(input_data: bytes, db: MeasurementsDb, key: bytes,
                    nonce: Optional[bytes] = None) -> Tuple[Challenge, VerifierSession]:
    """Create a challenge with a fresh nonce and its verification session.

    Args:
        input_data: Opaque program input sent to the prover
        db: Loaded MeasurementsDb
        key: Shared secret
        nonce: Fixed nonce, for tests only

    Returns:
        Tuple of (Challenge, VerifierSession)
    """
    if nonce is None:
        nonce = secrets.token_bytes(NONCE_SIZE)
    session = VerifierSession(key, nonce, db)
    logger.info("Issued challenge with nonce %s", nonce.hex())
    return Challenge(bytes(input_data), bytes(nonce)), session


def verify_report(session: VerifierSession, report: PartialReport) -> Optional[Violation]:
    return session.verify_report(report)


def verify_serialized(session: VerifierSession, payload: bytes) -> Optional[Violation]:
    return session.verify_serialized(payload)
