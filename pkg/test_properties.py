#!/usr/bin/env python3
"""
Test script to verify end-to-end properties over many random programs:
honest executions never raise a violation, tampering always does.
"""

import json
import sys
from pathlib import Path

from hypothesis import example, given, settings, strategies as st

# Add the src directory to the Python path
src_path = Path(__file__).parent / "src"
sys.path.insert(0, str(src_path))

from core.cfg_model import Edge, EdgeKind, identify_checkpoints, load_cfg
from core.measurement_db import encode_loa, generate_measurements
from core.prover_engine import ProverSession, encode_report, replay_trace
from core.verifier_engine import ViolationKind, issue_challenge
from core.workload import main_a_document, main_a_honest_trace, random_cfg, random_walk
from net.wire_protocol import Codec, Output, decode_frame, encode_frame

KEY = bytes(range(32))
NONCE = bytes(range(16))

labels = st.text(alphabet="ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_", min_size=1, max_size=6)
edges = st.builds(Edge, labels, labels, st.sampled_from(list(EdgeKind)))


def attest_and_verify(document, seed, batch_limit):
    """Return the first violation of an honest random walk, or None."""
    raw = json.dumps(document).encode("utf-8")
    cfg = load_cfg(raw)
    db = generate_measurements(cfg, raw)
    trace = random_walk(identify_checkpoints(cfg), seed)

    session = ProverSession(KEY, NONCE, batch_limit, db.checkpoints)
    reports = []
    replay_trace(session, trace, reports.append)

    _, verifier = issue_challenge(b"", db, KEY, NONCE)
    for report in reports:
        violation = verifier.verify_serialized(encode_report(report))
        if violation is not None:
            return violation
    assert all(depth == 0 for depth in verifier.thread_depths().values())
    return None


def test_thousand_random_programs_have_no_false_alarms():
    for seed in range(1000):
        violation = attest_and_verify(random_cfg(seed), seed, 1 + seed % 7)
        assert violation is None, f"seed {seed}: {violation}"


def test_random_programs_are_reproducible():
    assert random_cfg(42) == random_cfg(42)
    cfg = identify_checkpoints(load_cfg(random_cfg(42)))
    assert random_walk(cfg, 5) == random_walk(cfg, 5)


def test_random_programs_only_return_to_live_call_sites():
    for seed, max_nodes in [(s, 200) for s in range(300)] + [(711, 50), (9, 200)]:
        document = random_cfg(seed, max_nodes)
        edges = [(e["src"], e["dst"], e["kind"]) for e in document["edges"]]
        call_sites = {src for src, _, kind in edges if kind == "call"}
        return_sites = {dst for src, dst, kind in edges if kind == "fallthrough" and src in call_sites}
        has_successor = {src for src, _, _ in edges}
        thread_ends = {n["id"] for n in document["nodes"] if n["checkpoint"] == "thread_end"}

        for src, dst, kind in edges:
            if kind == "return":
                assert dst in return_sites, f"seed {seed}: {src}->{dst}"
        for node in document["nodes"]:
            assert node["id"] in has_successor or node["id"] in thread_ends, f"seed {seed}: {node['id']}"


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=10**6), st.integers(min_value=16, max_value=120))
@example(711, 50)
def test_honest_walks_verify(seed, max_nodes):
    assert attest_and_verify(random_cfg(seed, max_nodes), seed, 50000) is None


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_any_bit_flip_is_detected(data):
    raw = json.dumps(main_a_document()).encode("utf-8")
    db = generate_measurements(load_cfg(raw), raw)
    session = ProverSession(KEY, NONCE, 50000, db.checkpoints)
    reports = []
    replay_trace(session, main_a_honest_trace(), reports.append)

    payload = bytearray(encode_report(reports[0]))
    byte = data.draw(st.integers(min_value=0, max_value=len(payload) - 1))
    bit = data.draw(st.integers(min_value=0, max_value=7))
    payload[byte] ^= 1 << bit

    _, verifier = issue_challenge(b"", db, KEY, NONCE)
    violation = verifier.verify_serialized(bytes(payload))
    assert violation is not None
    assert violation.kind is ViolationKind.INTEGRITY


@given(st.lists(edges, max_size=5), st.lists(edges, max_size=5))
def test_loa_encoding_is_injective(first, second):
    assert (encode_loa(first) == encode_loa(second)) == (first == second)


@given(st.binary(max_size=4096), st.sampled_from(list(Codec)))
def test_output_frames_survive_every_codec(data, codec):
    assert decode_frame(encode_frame(Output(data), codec)) == Output(data)
