#!/usr/bin/env python3
"""
Test script to verify the prover: measurement collection, batching,
fingerprints and trace files.
"""

import json
import sys
from pathlib import Path

import pytest

# Add the src directory to the Python path
src_path = Path(__file__).parent / "src"
sys.path.insert(0, str(src_path))

from core.cfg_model import Edge, EdgeKind, Loa, MeasurementKey, load_cfg
from core.errors import ConfigError, EmptyBatchError, ParseError, ProtocolError
from core.measurement_db import generate_measurements, hash_loa
from core.prover_engine import (
    CheckpointCross, EdgeTraversal, ProverSession, compute_fingerprint, decode_report,
    dump_trace, encode_report, load_trace, parse_trace, replay_trace, verify_fingerprint,
)
from core.workload import main_a_honest_trace, six_node_document

FIXTURES = Path(__file__).parent / "fixtures"
KEY = bytes(range(32))
NONCE = bytes(16)


@pytest.fixture
def six_db():
    raw = json.dumps(six_node_document()).encode("utf-8")
    return generate_measurements(load_cfg(raw), raw)


def collect(session, trace):
    reports = []
    summary = replay_trace(session, trace, reports.append)
    return reports, summary


def test_six_node_trace_yields_two_measurements(six_db):
    session = ProverSession(KEY, NONCE, 50000, six_db.checkpoints)
    reports, summary = collect(session, load_trace(FIXTURES / "six.trace"))

    assert summary.event_count == 7
    assert summary.measurement_count == 2
    assert len(reports) == 1
    assert reports[0].index == 0
    assert reports[0].measurements == (
        MeasurementKey("N1", "N3", hash_loa([Edge("N2", "N3", EdgeKind.BRANCH)])),
        MeasurementKey("N3", "N6", hash_loa(Loa())),
    )
    assert all(m in six_db.entries for m in reports[0].measurements)


def test_batch_limit_seals_reports_in_index_order():
    session = ProverSession(KEY, NONCE, 1)
    reports, summary = collect(session, main_a_honest_trace())

    assert summary.measurement_count == 3
    assert [r.index for r in reports] == [0, 1, 2]
    assert all(len(r.measurements) == 1 for r in reports)


def test_threads_are_measured_independently():
    trace = []
    for a, b in zip(main_a_honest_trace(0), main_a_honest_trace(7)):
        trace += [a, b]
    session = ProverSession(KEY, NONCE, 1)
    reports, _ = collect(session, trace)

    by_thread = {}
    for report in reports:
        by_thread.setdefault(report.thread_id, []).append(report)
    assert sorted(by_thread) == [0, 7]
    assert [r.index for r in by_thread[0]] == [0, 1, 2]
    assert [r.measurements for r in by_thread[0]] == [r.measurements for r in by_thread[7]]


def test_edge_before_first_checkpoint():
    session = ProverSession(KEY, NONCE, 10)
    with pytest.raises(ProtocolError, match="before any checkpoint"):
        session.record_event(EdgeTraversal(0, Edge("S", "M1", EdgeKind.FALLTHROUGH)))


def test_crossing_at_non_checkpoint(six_db):
    session = ProverSession(KEY, NONCE, 10, six_db.checkpoints)
    session.record_event(CheckpointCross(0, "N1"))
    with pytest.raises(ProtocolError, match="non-checkpoint"):
        session.record_event(CheckpointCross(0, "N2"), 2)


def test_crossings_are_unchecked_without_a_checkpoint_table():
    session = ProverSession(KEY, NONCE, 10)
    session.record_event(CheckpointCross(0, "N3"))
    session.record_event(CheckpointCross(0, "N2"))

    report = session.seal_report(0)
    assert report.measurements == (MeasurementKey("N3", "N2", hash_loa(Loa())),)


def test_thread_must_begin_at_thread_begin(six_db):
    session = ProverSession(KEY, NONCE, 10, six_db.checkpoints)
    with pytest.raises(ProtocolError, match="event 1"):
        session.record_event(CheckpointCross(0, "N3"), 1)


def test_seal_with_nothing_pending():
    session = ProverSession(KEY, NONCE, 10)
    with pytest.raises(EmptyBatchError):
        session.seal_report(0)
    session.record_event(CheckpointCross(0, "S"))
    with pytest.raises(EmptyBatchError):
        session.seal_report(0)


def test_session_configuration_errors():
    with pytest.raises(ConfigError):
        ProverSession(KEY, NONCE, 0)
    with pytest.raises(ConfigError):
        ProverSession(KEY, b"short", 10)
    with pytest.raises(ConfigError):
        ProverSession(KEY, NONCE, 10, algorithm="crc32")


def test_fingerprint_binds_key_nonce_and_index():
    session = ProverSession(KEY, NONCE, 50000)
    reports, _ = collect(session, main_a_honest_trace())
    report = decode_report(encode_report(reports[0]))

    assert report == reports[0]
    assert verify_fingerprint(KEY, NONCE, report)
    assert not verify_fingerprint(bytes(32), NONCE, report)
    assert not verify_fingerprint(KEY, b"\x01" * 16, report)
    assert report.fingerprint != compute_fingerprint(KEY, report.body(), NONCE, 1)


def test_fingerprint_follows_configured_algorithm():
    session = ProverSession(KEY, NONCE, 50000, algorithm="sha3-256")
    reports, _ = collect(session, main_a_honest_trace())
    assert verify_fingerprint(KEY, NONCE, reports[0], "sha3-256")
    assert not verify_fingerprint(KEY, NONCE, reports[0], "blake2b-256")


def test_non_significant_edges_do_not_change_measurements():
    with_fallthrough = [
        CheckpointCross(0, "N1"),
        EdgeTraversal(0, Edge("N1", "N2", EdgeKind.FALLTHROUGH)),
        EdgeTraversal(0, Edge("N2", "N3", EdgeKind.BRANCH)),
        CheckpointCross(0, "N3"),
    ]
    without = [with_fallthrough[0], with_fallthrough[2], with_fallthrough[3]]
    first, _ = collect(ProverSession(KEY, NONCE, 10), with_fallthrough)
    second, _ = collect(ProverSession(KEY, NONCE, 10), without)
    assert first[0].measurements == second[0].measurements


def test_trace_file_fixture_matches_builder():
    assert load_trace(FIXTURES / "main_a.trace") == main_a_honest_trace()


def test_trace_dump_and_load(tmp_path):
    path = tmp_path / "out.trace"
    dump_trace(main_a_honest_trace(3), path)
    assert load_trace(path) == main_a_honest_trace(3)


def test_trace_parse_errors_carry_line_numbers():
    with pytest.raises(ParseError, match="line 2"):
        parse_trace("T 0 C S\nT 0 E S M1 sideways\n")
    with pytest.raises(ParseError, match="line 1"):
        parse_trace("T x C S\n")
    with pytest.raises(ParseError):
        parse_trace("T 0 Q S\n")


def test_trace_comments_and_blank_lines():
    events = parse_trace("# header\n\nT 1 C S\n   \nT 1 E S M1 fallthrough\n")
    assert events == [CheckpointCross(1, "S"), EdgeTraversal(1, Edge("S", "M1", EdgeKind.FALLTHROUGH))]
