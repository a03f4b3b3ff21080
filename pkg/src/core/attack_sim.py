#!/usr/bin/env python3
"""
Attack Simulator for ScaRR

Mutates honest traces and report streams to emulate control-flow attacks
(code injection, ROP, JOP, function reuse) and report-level tampering, and
records which violation the verifier is expected to raise for each.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

from .cfg_model import Cfg, Edge, EdgeKind
from .errors import ParseError, SpecError
from .measurement_db import MeasurementsDb
from .prover_engine import (
    CheckpointCross, EdgeTraversal, PartialReport, ProverSession, TraceEvent,
    compute_fingerprint, decode_report, encode_report, replay_trace,
)
from .verifier_engine import ShadowStackState, Violation, ViolationKind, apply_loa, issue_challenge

logger = logging.getLogger(__name__)


class AttackKind(Enum):
    CODE_INJECTION = "code_injection"
    ROP_CHAIN = "rop_chain"
    JOP_BRANCH = "jop_branch"
    FUNCTION_REUSE = "function_reuse"
    MEASUREMENT_DROP = "measurement_drop"
    REPORT_REPLAY = "report_replay"
    REPORT_TAMPER = "report_tamper"
    DATA_ONLY = "data_only"


@dataclass
class AttackSpec:
    kind: AttackKind
    parameters: Dict[str, Any] = field(default_factory=dict)


@dataclass
class AttackOutcome:
    """A mutated trace or report stream and the violation it must trigger.

    expected is None for attacks the scheme does not detect.
    """
    kind: AttackKind
    expected: Optional[ViolationKind]
    trace: Optional[List[TraceEvent]] = None
    reports: Optional[List[bytes]] = None
    note: str = ""


@dataclass
class AttackContext:
    """Everything needed to run both sides of a session locally."""
    cfg: Cfg
    db: MeasurementsDb
    key: bytes
    nonce: bytes
    batch_limit: int = 50000


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _measure(trace: Sequence[TraceEvent], ctx: AttackContext) -> List[PartialReport]:
    session = ProverSession(ctx.key, ctx.nonce, ctx.batch_limit, ctx.db.checkpoints, ctx.db.algorithm)
    reports: List[PartialReport] = []
    replay_trace(session, trace, reports.append)
    return reports


def honest_reports(trace: Sequence[TraceEvent], ctx: AttackContext) -> List[bytes]:
    """Serialized reports of an unmodified prover run."""
    return [encode_report(report) for report in _measure(trace, ctx)]


def _thread_at(trace: Sequence[TraceEvent], position: int) -> int:
    event = trace[position] if position < len(trace) else trace[position - 1]
    return event.thread_id


def _check_open_segment(trace: Sequence[TraceEvent], position: int, thread_id: int) -> None:
    """position must fall between two crossings of thread_id."""
    if not 0 <= position <= len(trace):
        raise SpecError(f"position {position} outside trace of {len(trace)} events")
    before = any(isinstance(e, CheckpointCross) and e.thread_id == thread_id for e in trace[:position])
    after = any(isinstance(e, CheckpointCross) and e.thread_id == thread_id for e in trace[position:])
    if not (before and after):
        raise SpecError(f"position {position} is not inside a measured segment of thread {thread_id}")


def _insert(trace: Sequence[TraceEvent], position: int, thread_id: int,
            edges: Sequence[Edge]) -> List[TraceEvent]:
    injected = [EdgeTraversal(thread_id, edge) for edge in edges]
    return list(trace[:position]) + injected + list(trace[position:])


def _leaves_db(trace: Sequence[TraceEvent], ctx: AttackContext) -> bool:
    return any(ctx.db.lookup(m) is None for report in _measure(trace, ctx) for m in report.measurements)


# ---------------------------------------------------------------------------
# Trace mutations
# ---------------------------------------------------------------------------

def inject_new_edge(trace: Sequence[TraceEvent], position: int, edge: Edge, cfg: Cfg,
                    thread_id: Optional[int] = None) -> AttackOutcome:
    """Insert a traversal of an edge the CFG does not have.

    Raises:
        SpecError: Edge exists in the CFG, is a fallthrough, or falls outside a segment
    """
    if (edge.src, edge.dst) in cfg.edge_pairs:
        raise SpecError(f"edge {edge} exists in the CFG; injection needs a new edge")
    if not edge.kind.is_significant:
        raise SpecError(f"fallthrough edge {edge} is not measured")
    if not trace:
        raise SpecError("cannot inject into an empty trace")
    tid = _thread_at(trace, position) if thread_id is None else thread_id
    _check_open_segment(trace, position, tid)
    return AttackOutcome(AttackKind.CODE_INJECTION, ViolationKind.UNKNOWN_MEASUREMENT,
                         trace=_insert(trace, position, tid, [edge]),
                         note=f"injected {edge} at event {position}")


def inject_rop_chain(trace: Sequence[TraceEvent], position: int, gadgets: Sequence[Edge],
                     ctx: AttackContext, thread_id: Optional[int] = None) -> AttackOutcome:
    """Insert a chain of return edges concatenating gadgets.

    Raises:
        SpecError: Fewer than two return gadgets, unknown nodes, or a chain the DB accepts
    """
    if len(gadgets) < 2:
        raise SpecError("a ROP chain needs at least two gadgets")
    known = set(ctx.cfg.nodes)
    for gadget in gadgets:
        if gadget.kind is not EdgeKind.RETURN:
            raise SpecError(f"gadget {gadget} is not a return edge")
        if gadget.src not in known or gadget.dst not in known:
            raise SpecError(f"gadget {gadget} references an unknown node")
    if not trace:
        raise SpecError("cannot inject into an empty trace")
    tid = _thread_at(trace, position) if thread_id is None else thread_id
    _check_open_segment(trace, position, tid)
    mutated = _insert(trace, position, tid, gadgets)
    if not _leaves_db(mutated, ctx):
        raise SpecError("gadget chain produces only measured triplets")
    return AttackOutcome(AttackKind.ROP_CHAIN, ViolationKind.UNKNOWN_MEASUREMENT, trace=mutated,
                         note=f"{len(gadgets)}-gadget chain at event {position}")


def jop_branch(trace: Sequence[TraceEvent], position: int, branches: Sequence[Edge],
               ctx: AttackContext, thread_id: Optional[int] = None) -> AttackOutcome:
    """Insert indirect-branch dispatch edges.

    A chain made only of legal branches in a legal order stays inside the
    measured set and is reported with expected None.
    """
    if not branches:
        raise SpecError("a JOP chain needs at least one branch")
    for branch in branches:
        if branch.kind is not EdgeKind.BRANCH:
            raise SpecError(f"{branch} is not a branch edge")
    if not trace:
        raise SpecError("cannot inject into an empty trace")
    tid = _thread_at(trace, position) if thread_id is None else thread_id
    _check_open_segment(trace, position, tid)
    mutated = _insert(trace, position, tid, branches)
    if _leaves_db(mutated, ctx):
        return AttackOutcome(AttackKind.JOP_BRANCH, ViolationKind.UNKNOWN_MEASUREMENT, trace=mutated,
                             note=f"{len(branches)} dispatch branches at event {position}")
    return AttackOutcome(AttackKind.JOP_BRANCH, None, trace=mutated,
                         note="dispatch chain follows legal branches; not detectable")


def reuse_function_return(trace: Sequence[TraceEvent], source: int, target: int,
                          ctx: AttackContext) -> AttackOutcome:
    """Hijack the return at target so it behaves like the earlier return at source.

    Events up to target are kept; the return at target is replaced by the
    return at source followed by what ran after it, up to the next checkpoint.

    Args:
        trace: Honest trace
        source: Position of the earlier Return traversal to reuse
        target: Position of the Return traversal to hijack
        ctx: Attack context

    Returns:
        AttackOutcome expecting ShadowStackMismatch (None for the identity swap)

    Raises:
        SpecError: Positions are not returns of one thread, or the result is not
            made of measured, chained triplets
    """
    if source == target:
        return AttackOutcome(AttackKind.FUNCTION_REUSE, None, trace=list(trace), note="identity swap")
    if not 0 <= source < target < len(trace):
        raise SpecError(f"need 0 <= source < target < {len(trace)}, got {source}, {target}")
    first, second = trace[source], trace[target]
    for event in (first, second):
        if not isinstance(event, EdgeTraversal) or event.edge.kind is not EdgeKind.RETURN:
            raise SpecError(f"event {event} is not a return traversal")
    if first.thread_id != second.thread_id:
        raise SpecError("source and target returns belong to different threads")

    tid = first.thread_id
    stop = next((i for i in range(source + 1, len(trace))
                 if isinstance(trace[i], CheckpointCross) and trace[i].thread_id == tid), None)
    if stop is None:
        raise SpecError(f"no checkpoint follows the return at {source}")
    spliced = [e for e in trace[source:stop + 1] if e.thread_id == tid]
    mutated = list(trace[:target]) + spliced

    reports = _measure(mutated, ctx)
    measurements = [m for r in reports if r.thread_id == tid for m in r.measurements]
    last = None
    shadow = ShadowStackState()
    clean = True
    for m in measurements:
        offline = ctx.db.lookup(m)
        if offline is None or (last is not None and m.cp_a != last):
            raise SpecError("swap is not triplet-preserving; use inject_new_edge instead")
        last = m.cp_b
        if clean and apply_loa(shadow, offline.call_ret_subset, ctx.db) is not None:
            clean = False
    if clean:
        raise SpecError("swap returns into a legal context; nothing to detect")
    return AttackOutcome(AttackKind.FUNCTION_REUSE, ViolationKind.SHADOW_STACK_MISMATCH,
                         trace=mutated, note=f"return at {target} hijacked like {source}")


def data_only(trace: Sequence[TraceEvent]) -> AttackOutcome:
    """Pure data-oriented attack: control flow unchanged, nothing to detect."""
    return AttackOutcome(AttackKind.DATA_ONLY, None, trace=list(trace),
                         note="data-only attacks leave control flow intact")


# ---------------------------------------------------------------------------
# Report stream mutations
# ---------------------------------------------------------------------------

def _report_thread(payload: bytes) -> int:
    return decode_report(payload).thread_id


def tamper_or_replay(reports: Sequence[bytes], mode: str, report: int = 0,
                     byte: int = 0, bit: int = 0) -> AttackOutcome:
    """Mutate a serialized honest report stream.

    Args:
        reports: Serialized reports in send order
        mode: "flip" a bit, "duplicate" a report or "drop" a report
        report: Position of the affected report
        byte: Byte offset for flip
        bit: Bit number for flip

    Returns:
        AttackOutcome expecting Integrity (flip) or Replay (duplicate, drop)
    """
    if not 0 <= report < len(reports):
        raise SpecError(f"report {report} outside stream of {len(reports)}")
    stream = list(reports)

    if mode == "flip":
        payload = bytearray(stream[report])
        if not 0 <= byte < len(payload) or not 0 <= bit < 8:
            raise SpecError(f"byte {byte} bit {bit} outside report of {len(payload)} bytes")
        payload[byte] ^= 1 << bit
        stream[report] = bytes(payload)
        return AttackOutcome(AttackKind.REPORT_TAMPER, ViolationKind.INTEGRITY, reports=stream,
                             note=f"flipped bit {bit} of byte {byte} in report {report}")
    if mode == "duplicate":
        stream.insert(report + 1, stream[report])
        return AttackOutcome(AttackKind.REPORT_REPLAY, ViolationKind.REPLAY, reports=stream,
                             note=f"report {report} sent twice")
    if mode == "drop":
        tid = _report_thread(stream[report])
        if not any(_report_thread(p) == tid for p in stream[report + 1:]):
            raise SpecError(f"report {report} is the last of thread {tid}; dropping it leaves no gap")
        del stream[report]
        return AttackOutcome(AttackKind.REPORT_REPLAY, ViolationKind.REPLAY, reports=stream,
                             note=f"report {report} withheld")
    raise SpecError(f"unknown report mutation {mode!r}; use flip, duplicate or drop")


def drop_measurement(reports: Sequence[bytes], report: int, ordinal: int,
                     ctx: AttackContext) -> AttackOutcome:
    """Remove one measurement and re-seal its report with the session key.

    Models a compromised measurement path in front of the trusted anchor.
    Dropping a measurement with cpA == cpB (a loop iteration) leaves a legal
    execution behind and is only reported undetectable when it holds no calls.
    """
    if not 0 <= report < len(reports):
        raise SpecError(f"report {report} outside stream of {len(reports)}")
    original = decode_report(reports[report])
    if not 0 <= ordinal < len(original.measurements):
        raise SpecError(f"measurement {ordinal} outside report of {len(original.measurements)}")
    later = original.measurements[ordinal + 1:] or any(
        _report_thread(p) == original.thread_id for p in reports[report + 1:])
    if not later:
        raise SpecError("dropped measurement has no successor to break the chain")

    dropped = original.measurements[ordinal]
    if len(original.measurements) == 1:
        raise SpecError("dropping the only measurement empties the report; use tamper_or_replay drop")
    remaining = original.measurements[:ordinal] + original.measurements[ordinal + 1:]
    body_report = PartialReport(original.index, original.thread_id, remaining, b"")
    fingerprint = compute_fingerprint(ctx.key, body_report.body(), ctx.nonce, original.index,
                                      ctx.db.algorithm)
    resealed = PartialReport(original.index, original.thread_id, remaining, fingerprint)
    stream = list(reports)
    stream[report] = encode_report(resealed)

    if dropped.cp_a != dropped.cp_b:
        expected = ViolationKind.CHAIN_BREAK
        note = f"dropped {dropped}; neighbours no longer chain"
    else:
        offline = ctx.db.lookup(dropped)
        if offline is not None and offline.call_ret_subset:
            raise SpecError("dropped loop iteration carries calls; outcome depends on stack state")
        expected = None
        note = f"dropped loop iteration {dropped}; another legal execution"
    return AttackOutcome(AttackKind.MEASUREMENT_DROP, expected, reports=stream, note=note)


# ---------------------------------------------------------------------------
# Spec files and execution
# ---------------------------------------------------------------------------

def _edge(raw: Any, default_kind: EdgeKind) -> Edge:
    if not isinstance(raw, (list, tuple)) or len(raw) not in (2, 3):
        raise ParseError(f"edge must be [src, dst] or [src, dst, kind], got {raw!r}")
    kind = default_kind
    if len(raw) == 3:
        try:
            kind = EdgeKind(raw[2])
        except ValueError:
            raise ParseError(f"unknown edge kind {raw[2]!r}") from None
    return Edge(str(raw[0]), str(raw[1]), kind)


def parse_attack_spec(document: Union[str, Mapping[str, Any]]) -> AttackSpec:
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid attack spec JSON: {e}") from e
    if not isinstance(document, Mapping) or "kind" not in document:
        raise ParseError("attack spec needs a 'kind'")
    try:
        kind = AttackKind(document["kind"])
    except ValueError:
        raise ParseError(f"unknown attack kind {document['kind']!r}") from None
    parameters = document.get("parameters", {})
    if not isinstance(parameters, Mapping):
        raise ParseError("'parameters' must be an object")
    return AttackSpec(kind, dict(parameters))


def load_attack_spec(path: Union[str, Path]) -> AttackSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read attack spec {path}: {e}") from e
    return parse_attack_spec(text)


def apply_attack(spec: AttackSpec, trace: Sequence[TraceEvent], ctx: AttackContext) -> AttackOutcome:
    """Build the AttackOutcome an AttackSpec describes for a trace."""
    p = spec.parameters
    try:
        if spec.kind is AttackKind.CODE_INJECTION:
            return inject_new_edge(trace, int(p["position"]), _edge(p["edge"], EdgeKind.BRANCH),
                                   ctx.cfg, p.get("thread"))
        if spec.kind is AttackKind.ROP_CHAIN:
            gadgets = [_edge(g, EdgeKind.RETURN) for g in p.get("gadgets", [])]
            return inject_rop_chain(trace, int(p["position"]), gadgets, ctx, p.get("thread"))
        if spec.kind is AttackKind.JOP_BRANCH:
            branches = [_edge(b, EdgeKind.BRANCH) for b in p.get("branches", [])]
            return jop_branch(trace, int(p["position"]), branches, ctx, p.get("thread"))
        if spec.kind is AttackKind.FUNCTION_REUSE:
            return reuse_function_return(trace, int(p["source"]), int(p["target"]), ctx)
        if spec.kind is AttackKind.DATA_ONLY:
            return data_only(trace)

        reports = honest_reports(trace, ctx)
        if spec.kind is AttackKind.MEASUREMENT_DROP:
            return drop_measurement(reports, int(p.get("report", 0)), int(p["measurement"]), ctx)
        if spec.kind is AttackKind.REPORT_TAMPER:
            return tamper_or_replay(reports, "flip", int(p.get("report", 0)),
                                    int(p.get("byte", 0)), int(p.get("bit", 0)))
        return tamper_or_replay(reports, p.get("mode", "duplicate"), int(p.get("report", 0)))
    except KeyError as e:
        raise SpecError(f"{spec.kind.value} attack is missing parameter {e}") from None
    except (TypeError, ValueError) as e:
        raise SpecError(f"bad {spec.kind.value} parameter: {e}") from None


def run_attack(outcome: AttackOutcome, ctx: AttackContext) -> Optional[Violation]:
    """Feed an outcome to a fresh verifier session.

    Returns:
        The first Violation, or None when every report is accepted
    """
    _, session = issue_challenge(b"", ctx.db, ctx.key, ctx.nonce)
    if outcome.trace is not None:
        for report in _measure(outcome.trace, ctx):
            violation = session.verify_report(report)
            if violation is not None:
                return violation
        return None
    for payload in outcome.reports or []:
        violation = session.verify_serialized(payload)
        if violation is not None:
            return violation
    return None
