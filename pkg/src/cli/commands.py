#!/usr/bin/env python3
"""
Command Dispatch for ScaRR

One entry point with subcommands for the whole pipeline. Exit codes: 0 on
success, 1 when a verification violation is observed (and not expected),
2 on usage, configuration or input errors. Diagnostics go to standard error,
machine output (CSV, violation lines, summaries) to standard output.
"""

import argparse
import json
import logging
import secrets
import sys
from pathlib import Path
from typing import Optional, Sequence, TextIO, Tuple

from core.attack_sim import AttackContext, apply_attack, load_attack_spec, run_attack
from core.bench import (
    DEFAULT_MODES, bench_attestation, bench_network, bench_verification, run_all,
    shadow_depth_stats, write_csv,
)
from core.cfg_model import identify_checkpoints, load_cfg_file
from core.errors import ConfigError, ScarrError
from core.measurement_db import generate_measurements, read_db, write_db
from core.prover_engine import NONCE_SIZE, dump_trace, load_trace
from core.settings_manager import DEFAULT_PORT, SettingsManager
from core.verifier_engine import ViolationKind
from core.workload import random_cfg, random_walk, synthetic_workload
from net.prover_client import run_prover_client
from net.verifier_server import VerifierServer
from net.wire_protocol import Codec, CodecMode

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_USAGE = 2

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """Configure the root logger once: console on stderr, optional file."""
    root_logger = logging.getLogger()
    if not root_logger.handlers:
        formatter = logging.Formatter(LOG_FORMAT)
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(formatter)
        root_logger.addHandler(console_handler)
        if log_file:
            file_handler = logging.FileHandler(log_file)
            file_handler.setFormatter(formatter)
            root_logger.addHandler(file_handler)
    root_logger.setLevel(getattr(logging, level.upper(), logging.INFO))


def parse_address(text: Optional[str], default_host: str, default_port: int) -> Tuple[str, int]:
    if not text:
        return default_host, default_port
    host, sep, port = text.rpartition(":")
    if not sep:
        return text, default_port
    try:
        return host or default_host, int(port)
    except ValueError:
        raise ConfigError(f"bad address {text!r}, expected host:port") from None


def parse_nonce(text: Optional[str]) -> Optional[bytes]:
    if text is None:
        return None
    try:
        nonce = bytes.fromhex(text)
    except ValueError:
        raise ConfigError(f"--nonce-hex is not hex: {text!r}") from None
    if len(nonce) != NONCE_SIZE:
        raise ConfigError(f"--nonce-hex needs {NONCE_SIZE * 2} hex characters")
    return nonce


def _codec_mode(args: argparse.Namespace, settings: SettingsManager) -> CodecMode:
    codec = Codec.from_name(args.codec or settings.get("codec", "none"))
    batch = args.batch if args.batch is not None else settings.get_batch_limit()
    return CodecMode(codec, batch)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_measurements(args, settings: SettingsManager, out: TextIO) -> int:
    cfg, raw = load_cfg_file(args.cfg)
    db = generate_measurements(cfg, raw, args.hash or settings.get_hash_algorithm(), args.step_limit)
    write_db(db, args.out)
    print(f"entries={len(db)} ret_to={len(db.relations())} program_id={db.program_id.hex()}", file=out)
    return EXIT_OK


def cmd_gen_cfg(args, settings: SettingsManager, out: TextIO) -> int:
    document = random_cfg(args.seed, args.max_nodes)
    Path(args.out).write_text(json.dumps(document, indent=2), encoding="utf-8")
    print(f"nodes={len(document['nodes'])} edges={len(document['edges'])}", file=out)
    return EXIT_OK


def cmd_gen_trace(args, settings: SettingsManager, out: TextIO) -> int:
    cfg, _ = load_cfg_file(args.cfg)
    events = random_walk(identify_checkpoints(cfg), args.seed,
                         args.max_steps or int(settings.get("walk_max_steps", 100000)))
    dump_trace(events, args.out)
    print(f"events={len(events)}", file=out)
    return EXIT_OK


def cmd_serve(args, settings: SettingsManager, out: TextIO) -> int:
    key = settings.get_shared_key()
    db = read_db(args.db)
    host, port = parse_address(args.bind, *settings.get_bind_address())
    server = VerifierServer(
        db, key, host, port,
        max_workers=int(settings.get("max_workers", 4)),
        challenge_input=settings.get_challenge_input(),
        socket_timeout=settings.get("socket_timeout", 30.0),
        nonce=parse_nonce(args.nonce_hex),
    )
    server.serve_forever()
    for result in server.results:
        if result.violation is not None:
            print(result.violation.render(), file=out)
    return EXIT_OK


def cmd_prove(args, settings: SettingsManager, out: TextIO) -> int:
    key = settings.get_shared_key()
    db = read_db(args.db)
    events = load_trace(args.trace)
    address = parse_address(args.connect, settings.get("bind_host", "127.0.0.1"),
                            int(settings.get("port", DEFAULT_PORT)))
    summary = run_prover_client(address, db, events, _codec_mode(args, settings), key,
                                parse_nonce(args.nonce_hex), settings.get("socket_timeout", 30.0))
    print(f"reports={summary.reports} acks={summary.acks} alarms={summary.alarms} "
          f"measurements={summary.measurements} bytes_raw={summary.bytes_raw} "
          f"bytes_wire={summary.bytes_wire}", file=out)
    if summary.violation:
        print(summary.violation, file=out)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_attack(args, settings: SettingsManager, out: TextIO) -> int:
    cfg, raw = load_cfg_file(args.cfg)
    algorithm = settings.get_hash_algorithm()
    db = generate_measurements(cfg, raw, algorithm)
    try:
        key = settings.get_shared_key()
    except ConfigError:
        key = secrets.token_bytes(32)
    batch = args.batch if args.batch is not None else settings.get_batch_limit()
    ctx = AttackContext(identify_checkpoints(cfg), db, key, secrets.token_bytes(NONCE_SIZE), batch)

    spec = load_attack_spec(args.spec)
    outcome = apply_attack(spec, load_trace(args.trace), ctx)
    violation = run_attack(outcome, ctx)
    observed = violation.kind if violation is not None else None
    print(violation.render() if violation is not None else "OK", file=out)

    if outcome.expected is not observed:
        logger.warning("%s expected %s, observed %s", spec.kind.value,
                       outcome.expected.value if outcome.expected else "none",
                       observed.value if observed else "none")
    if args.expect is None:
        return EXIT_OK if observed is None else EXIT_VIOLATION
    wanted = None if args.expect == "none" else ViolationKind(args.expect)
    return EXIT_OK if wanted is observed else EXIT_VIOLATION


def cmd_bench(args, settings: SettingsManager, out: TextIO) -> int:
    seed = args.seed if args.seed is not None else int(settings.get("bench.seed", 0))
    runs = args.runs if args.runs is not None else int(settings.get("bench.runs", 10))
    if runs < 1:
        raise ConfigError(f"--runs must be >= 1, got {runs}")

    if args.bench_command == "run-all":
        results = run_all(seed, runs, args.measurements, args.distinct, progress=args.progress)
    else:
        workload = synthetic_workload(args.measurements, args.distinct, args.profile, seed)
        if args.bench_command == "attest":
            results = [bench_attestation(workload, runs, progress=args.progress)]
        elif args.bench_command == "verify":
            results = [bench_verification(workload, runs, progress=args.progress)]
        elif args.bench_command == "network":
            results = bench_network(workload, DEFAULT_MODES, progress=args.progress)
        else:
            results = [shadow_depth_stats(workload)]

    if args.out:
        write_csv(results, args.out, seed)
    else:
        write_csv(results, out, seed)
    return EXIT_OK


def cmd_inspect(args, settings: SettingsManager, out: TextIO) -> int:
    db = read_db(args.db)
    print(f"program_id={db.program_id.hex()} algorithm={db.algorithm} entries={len(db)} "
          f"ret_to={len(db.relations())}", file=out)
    for entry in db.sorted_entries():
        subset = ",".join(str(e) for e in entry.call_ret_subset) or "-"
        print(f"entry {entry.key.cp_a} {entry.key.cp_b} {entry.key.loa_hash.hex()} {subset}", file=out)
    for relation in sorted(db.relations(), key=lambda r: (str(r.return_edge), str(r.call_edge))):
        print(f"ret_to {relation.return_edge} {relation.call_edge}", file=out)
    for node, kind in sorted(db.checkpoints.items()):
        print(f"checkpoint {node} {kind.value}", file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scarr",
        description="Control-flow attestation toolchain: offline measurements, prover, verifier.",
    )
    parser.add_argument("--config", help="Settings file (default ~/.scarr/config.json)")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-measurements", help="Build the measurements DB of a CFG document")
    p.add_argument("--cfg", required=True, help="CFG document (.json or .xml)")
    p.add_argument("--out", required=True, help="Output DB path")
    p.add_argument("--hash", help="Hash algorithm (default from settings)")
    p.add_argument("--step-limit", type=int, help="Abort enumeration after this many steps")
    p.set_defaults(func=cmd_gen_measurements)

    p = sub.add_parser("gen-cfg", help="Write a random structured CFG document")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-nodes", type=int, default=200)
    p.set_defaults(func=cmd_gen_cfg)

    p = sub.add_parser("gen-trace", help="Write an honest trace from a random walk")
    p.add_argument("--cfg", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("serve", help="Run the verifier server")
    p.add_argument("--db", required=True)
    p.add_argument("--bind", help="host:port (default from settings)")
    p.add_argument("--nonce-hex", help="Fixed challenge nonce, testing only")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("prove", help="Attest a trace to a verifier")
    p.add_argument("--connect", help="host:port (default from settings)")
    p.add_argument("--db", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--codec", choices=[c.label for c in Codec])
    p.add_argument("--batch", type=int, help="Measurements per report (1 = single mode)")
    p.add_argument("--nonce-hex", help="Override the challenge nonce, testing only")
    p.set_defaults(func=cmd_prove)

    p = sub.add_parser("attack", help="Replay an attack against a local verifier")
    p.add_argument("--cfg", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--spec", required=True, help="Attack spec (JSON)")
    p.add_argument("--expect", choices=["none"] + [k.value for k in ViolationKind])
    p.add_argument("--batch", type=int)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("bench", help="Run benchmarks and emit CSV")
    p.add_argument("bench_command", choices=["attest", "verify", "network", "shadow", "run-all"])
    p.add_argument("--out", help="CSV path (default standard output)")
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--measurements", type=int, default=200000)
    p.add_argument("--distinct", type=int, default=1000)
    p.add_argument("--profile", default="none", help="none, recursive or fixed:<m>")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="Print the contents of a measurements DB")
    p.add_argument("--db", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def dispatch(argv: Optional[Sequence[str]] = None, out: Optional[TextIO] = None) -> int:
    """Parse argv and run one command.

    Args:
        argv: Arguments without the program name
        out: Machine output stream (default standard output)

    Returns:
        Process exit code
    """
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        settings = SettingsManager(args.config)
        configure_logging(args.log_level or settings.get("log_level", "INFO"), settings.get("log_file"))
        return args.func(args, settings, out)
    except ScarrError as e:
        logger.error("%s: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        logger.error("%s: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
