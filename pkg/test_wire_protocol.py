#!/usr/bin/env python3
"""
Test script to verify report framing, compression codecs and a full
prover/verifier session over a loopback socket.
"""

import json
import socket
import sys
from pathlib import Path

import pytest

# Add the src directory to the Python path
src_path = Path(__file__).parent / "src"
sys.path.insert(0, str(src_path))

from core.attack_sim import AttackContext, inject_rop_chain
from core.cfg_model import Edge, EdgeKind, identify_checkpoints, load_cfg
from core.errors import CodecError, ConfigError, FrameError
from core.measurement_db import generate_measurements
from core.prover_engine import ProverSession, load_trace, replay_trace
from core.verifier_engine import Challenge, ViolationKind
from core.workload import main_a_document, main_a_honest_trace
from net.prover_client import ProverClient, run_prover_client
from net.verifier_server import VerifierServer
from net.wire_protocol import (
    HEADER, HEADER_SIZE, MAGIC, Ack, Alarm, Codec, CodecMode, MessageType, Output,
    decode_frame, decode_frames, decode_payload, encode_frame, pack_frame, parse_header, read_frame,
    write_frame,
)

FIXTURES = Path(__file__).parent / "fixtures"
KEY = bytes(range(32))
NONCE = bytes(range(16))


@pytest.fixture
def db():
    raw = json.dumps(main_a_document()).encode("utf-8")
    return generate_measurements(load_cfg(raw), raw)


@pytest.fixture
def report(db):
    session = ProverSession(KEY, NONCE, 50000, db.checkpoints)
    reports = []
    replay_trace(session, main_a_honest_trace(), reports.append)
    return reports[0]


@pytest.mark.parametrize("codec", list(Codec))
def test_report_frames_under_every_codec(codec, report):
    frame = encode_frame(report, codec)
    msg_type, frame_codec, length = parse_header(frame[:HEADER_SIZE])

    assert msg_type is MessageType.PARTIAL_REPORT
    assert frame_codec is codec
    assert length == len(frame) - HEADER_SIZE
    assert decode_frame(frame) == report


def test_control_messages():
    challenge = Challenge(b"argv", NONCE)
    stream = (encode_frame(challenge) + encode_frame(Ack(3, 9), Codec.ZIP)
              + encode_frame(Alarm("VIOLATION kind=replay")) + encode_frame(Output(b"done")))
    assert decode_frames(stream) == [challenge, Ack(3, 9), Alarm("VIOLATION kind=replay"), Output(b"done")]


def test_header_layout():
    frame = pack_frame(MessageType.OUTPUT, b"xyz")
    assert HEADER_SIZE == 11
    assert frame[:4] == MAGIC
    assert HEADER.unpack(frame[:HEADER_SIZE]) == (MAGIC, 1, 0x03, 0x00, 3)


def test_bad_headers():
    good = pack_frame(MessageType.OUTPUT, b"xyz")
    with pytest.raises(FrameError, match="magic"):
        decode_frame(b"XXXX" + good[4:])
    with pytest.raises(FrameError, match="version"):
        decode_frame(good[:4] + b"\x02" + good[5:])
    with pytest.raises(FrameError, match="message type"):
        decode_frame(good[:5] + b"\x09" + good[6:])
    with pytest.raises(FrameError, match="codec"):
        decode_frame(good[:6] + b"\x07" + good[7:])
    with pytest.raises(FrameError):
        decode_frame(good[:-1])
    with pytest.raises(FrameError):
        decode_frame(good[:5])


def test_corrupt_compressed_payload():
    payload = b"\xff" * 16
    frame = HEADER.pack(MAGIC, 1, MessageType.OUTPUT, Codec.ZIP, len(payload)) + payload
    with pytest.raises(CodecError):
        decode_frame(frame)


def test_malformed_ack_payload():
    frame = pack_frame(MessageType.ACK, b"\x01\x02")
    with pytest.raises(FrameError):
        decode_frame(frame)


def test_codec_modes():
    assert CodecMode(Codec.NONE, 1).name == "single"
    assert CodecMode(Codec.NONE, 50000).name == "batch"
    assert CodecMode(Codec.ZSTD, 50000).name == "zstd"
    assert Codec.from_name("lzma") is Codec.LZMA
    with pytest.raises(ConfigError):
        CodecMode(Codec.ZIP, 1)
    with pytest.raises(ConfigError):
        CodecMode(Codec.NONE, 0)
    with pytest.raises(ConfigError):
        Codec.from_name("rar")


@pytest.mark.parametrize("mode", [CodecMode(Codec.NONE, 1), CodecMode(Codec.ZIP, 50000),
                                  CodecMode(Codec.ZSTD, 2)])
def test_loopback_session_accepts_honest_trace(db, mode):
    with VerifierServer(db, KEY, "127.0.0.1", 0, max_workers=2, socket_timeout=10.0) as server:
        summary = run_prover_client(server.address, db, load_trace(FIXTURES / "main_a.trace"),
                                    mode, KEY, timeout=10.0)

    assert summary.violation is None
    assert summary.alarms == 0
    assert summary.measurements == 3
    assert summary.acks == summary.reports
    assert summary.reports == (3 if mode.batch == 1 else 2 if mode.batch == 2 else 1)

    assert len(server.results) == 1
    result = server.results[0]
    assert result.completed
    assert result.violation is None
    assert result.measurements_verified == 3


def test_loopback_wrong_key_raises_alarm(db):
    with VerifierServer(db, KEY, "127.0.0.1", 0, socket_timeout=10.0) as server:
        client = ProverClient(db, bytes(32), CodecMode(Codec.NONE, 1), timeout=10.0)
        summary = client.run(server.address, main_a_honest_trace())

    assert summary.alarms == 1
    assert summary.acks == 0
    assert summary.violation.startswith("VIOLATION kind=integrity")
    assert server.results[0].violation.kind is ViolationKind.INTEGRITY
    assert not server.results[0].completed


def test_loopback_stale_nonce_raises_alarm(db):
    with VerifierServer(db, KEY, "127.0.0.1", 0, socket_timeout=10.0) as server:
        summary = run_prover_client(server.address, db, main_a_honest_trace(),
                                    CodecMode(Codec.LZMA, 50000), KEY,
                                    nonce_override=b"\xaa" * 16, timeout=10.0)

    assert summary.violation.startswith("VIOLATION kind=integrity")


def test_loopback_challenge_carries_input(db):
    with VerifierServer(db, KEY, "127.0.0.1", 0, challenge_input=b"argv", nonce=NONCE,
                        socket_timeout=10.0) as server:
        summary = run_prover_client(server.address, db, main_a_honest_trace(),
                                    CodecMode(Codec.BZ2, 50000), KEY, timeout=10.0)
    assert summary.violation is None
    assert summary.bytes_wire > 0


def test_loopback_resent_report_is_replay(db):
    session = ProverSession(KEY, NONCE, 1, db.checkpoints)
    reports = []
    replay_trace(session, main_a_honest_trace(), reports.append)

    with VerifierServer(db, KEY, "127.0.0.1", 0, nonce=NONCE, socket_timeout=10.0) as server:
        with socket.create_connection(server.address, timeout=10.0) as sock:
            frame = read_frame(sock)
            challenge = decode_payload(frame.msg_type, frame.payload)
            assert isinstance(challenge, Challenge)
            assert challenge.nonce == NONCE

            write_frame(sock, reports[0])
            frame = read_frame(sock)
            assert decode_payload(frame.msg_type, frame.payload) == Ack(0, 0)

            write_frame(sock, reports[0])
            frame = read_frame(sock)
            alarm = decode_payload(frame.msg_type, frame.payload)
            assert isinstance(alarm, Alarm)
            assert "kind=replay" in alarm.line

    assert server.results[0].violation.kind is ViolationKind.REPLAY


def test_loopback_rop_chain_raises_alarm(db):
    cfg = identify_checkpoints(load_cfg(main_a_document()))
    ctx = AttackContext(cfg, db, KEY, NONCE)
    gadgets = [Edge("A2", "M2", EdgeKind.RETURN), Edge("A2", "M4", EdgeKind.RETURN)]
    outcome = inject_rop_chain(main_a_honest_trace(), 3, gadgets, ctx)

    with VerifierServer(db, KEY, "127.0.0.1", 0, socket_timeout=10.0) as server:
        summary = run_prover_client(server.address, db, outcome.trace,
                                    CodecMode(Codec.NONE, 1), KEY, timeout=10.0)

    assert summary.alarms == 1
    assert summary.violation
    assert "kind=unknown_measurement" in summary.violation
    assert server.results[0].violation.kind is ViolationKind.UNKNOWN_MEASUREMENT
