#!/usr/bin/env python3
"""
Benchmarks for ScaRR

Attestation speed, verification speed, bytes on the wire per codec mode and
shadow-stack activity per measurement, over seeded synthetic workloads.
Results are written as CSV.
"""

import csv
import logging
import statistics
import sys
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, List, Optional, Sequence, Union

from tqdm import tqdm

from net.wire_protocol import HEADER_SIZE, Codec, CodecMode, compress

from .errors import ValidationError
from .prover_engine import PartialReport, ProverSession, encode_report, replay_trace
from .verifier_engine import VerifierSession
from .workload import SyntheticWorkload, synthetic_workload

logger = logging.getLogger(__name__)

BENCH_KEY = bytes(range(32))
BENCH_NONCE = bytes(16)
CSV_COLUMNS = ["scenario", "metric", "unit", "runs", "mean", "stddev", "seed", "params"]

DEFAULT_MODES = [
    CodecMode(Codec.NONE, 1),
    CodecMode(Codec.NONE, 50000),
    CodecMode(Codec.ZIP, 50000),
    CodecMode(Codec.LZMA, 50000),
    CodecMode(Codec.BZ2, 50000),
    CodecMode(Codec.ZSTD, 50000),
]


class Metric(Enum):
    ATTEST_SPEED = "AttestSpeed"
    VERIFY_SPEED = "VerifySpeed"
    BYTES_ON_WIRE = "BytesOnWire"
    COMPRESSION_RATIO = "CompressionRatio"
    SHADOW_DEPTH_STATS = "ShadowDepthStats"


@dataclass
class BenchResult:
    """One CSV row."""
    scenario: str
    metric: Metric
    runs: int
    mean: float
    stddev: float
    unit: str
    params: str = ""
    median: Optional[float] = None


@dataclass
class NetworkStats:
    """Byte accounting of one codec mode over a whole workload."""
    mode: CodecMode
    frames: int
    measurement_bytes: int
    raw_bytes: int
    wire_bytes: int
    raw_payload_bytes: int
    wire_payload_bytes: int

    @property
    def overhead_bytes(self) -> int:
        """Frame headers plus report envelopes (index, thread, count, fingerprint)."""
        return self.raw_bytes - self.measurement_bytes

    @property
    def compression_ratio(self) -> float:
        if not self.raw_payload_bytes:
            return 0.0
        return 1.0 - self.wire_payload_bytes / self.raw_payload_bytes


def _summarize(samples: Sequence[float]):
    mean = statistics.fmean(samples)
    stddev = statistics.stdev(samples) if len(samples) > 1 else 0.0
    return mean, stddev


def _prove(workload: SyntheticWorkload, batch_limit: int) -> List[PartialReport]:
    session = ProverSession(BENCH_KEY, BENCH_NONCE, batch_limit, workload.db.checkpoints,
                            workload.db.algorithm)
    reports: List[PartialReport] = []
    replay_trace(session, workload.events, reports.append)
    return reports


def bench_attestation(workload: SyntheticWorkload, runs: int = 10, batch_limit: int = 50000,
                      progress: bool = False) -> BenchResult:
    """Online measurements per second at the prover, hashing and sealing included.

    Args:
        workload: Synthetic workload
        runs: Number of timed replays
        batch_limit: Measurements per report
        progress: Show a progress bar

    Returns:
        BenchResult with metric AttestSpeed
    """
    samples = []
    for _ in tqdm(range(runs), desc="attest", disable=not progress, file=sys.stderr):
        session = ProverSession(BENCH_KEY, BENCH_NONCE, batch_limit, workload.db.checkpoints,
                                workload.db.algorithm)
        sink: List[PartialReport] = []
        start = time.perf_counter()
        summary = replay_trace(session, workload.events, sink.append)
        elapsed = time.perf_counter() - start
        samples.append(summary.measurement_count / max(elapsed, 1e-9))
    mean, stddev = _summarize(samples)
    logger.info("AttestSpeed %.0f +/- %.0f measurements/s", mean, stddev)
    return BenchResult("attestation", Metric.ATTEST_SPEED, runs, mean, stddev,
                       "measurements/s", workload.params())


def bench_verification(workload: SyntheticWorkload, runs: int = 10, batch_limit: int = 50000,
                       progress: bool = False) -> BenchResult:
    """Verified measurements per second with the report stream already in memory.

    Raises:
        ValidationError: The honest workload did not verify
    """
    reports = _prove(workload, batch_limit)
    total = sum(len(r.measurements) for r in reports)
    samples = []
    for _ in tqdm(range(runs), desc="verify", disable=not progress, file=sys.stderr):
        session = VerifierSession(BENCH_KEY, BENCH_NONCE, workload.db)
        start = time.perf_counter()
        for report in reports:
            violation = session.verify_report(report)
            if violation is not None:
                raise ValidationError(f"honest workload rejected: {violation.render()}")
        elapsed = time.perf_counter() - start
        samples.append(total / max(elapsed, 1e-9))
    mean, stddev = _summarize(samples)
    logger.info("VerifySpeed %.0f +/- %.0f measurements/s", mean, stddev)
    return BenchResult("verification", Metric.VERIFY_SPEED, runs, mean, stddev,
                       "measurements/s", workload.params())


def measure_network(workload: SyntheticWorkload, mode: CodecMode) -> NetworkStats:
    """Frame every report of the workload under one codec mode."""
    frames = measurement_bytes = raw_payload = wire_payload = 0
    for report in _prove(workload, mode.batch):
        payload = encode_report(report)
        body = compress(mode.codec, payload)
        frames += 1
        measurement_bytes += len(report.body()) - 8
        raw_payload += len(payload)
        wire_payload += len(body)
    return NetworkStats(
        mode=mode,
        frames=frames,
        measurement_bytes=measurement_bytes,
        raw_bytes=raw_payload + frames * HEADER_SIZE,
        wire_bytes=wire_payload + frames * HEADER_SIZE,
        raw_payload_bytes=raw_payload,
        wire_payload_bytes=wire_payload,
    )


def bench_network(workload: SyntheticWorkload, modes: Iterable[CodecMode] = DEFAULT_MODES,
                  progress: bool = False) -> List[BenchResult]:
    """BytesOnWire and CompressionRatio per codec mode."""
    results = []
    modes = list(modes)
    for mode in tqdm(modes, desc="network", disable=not progress, file=sys.stderr):
        stats = measure_network(workload, mode)
        params = (f"{workload.params()};batch={mode.batch};frames={stats.frames};"
                  f"overhead={stats.overhead_bytes}")
        results.append(BenchResult(f"network/{mode.name}", Metric.BYTES_ON_WIRE, 1,
                                   float(stats.wire_bytes), 0.0, "bytes", params))
        results.append(BenchResult(f"network/{mode.name}", Metric.COMPRESSION_RATIO, 1,
                                   stats.compression_ratio, 0.0, "ratio", params))
        logger.info("%s: %d bytes on wire, ratio %.3f", mode.name, stats.wire_bytes,
                    stats.compression_ratio)
    return results


def shadow_depth_stats(workload: SyntheticWorkload, batch_limit: int = 50000) -> BenchResult:
    """Call plus return edges consumed by the shadow stack per measurement.

    The workload is verified first so only accepted measurements are counted.
    """
    session = VerifierSession(BENCH_KEY, BENCH_NONCE, workload.db)
    counts = []
    for report in _prove(workload, batch_limit):
        violation = session.verify_report(report)
        if violation is not None:
            raise ValidationError(f"honest workload rejected: {violation.render()}")
        counts.extend(len(workload.db.entries[m].call_ret_subset) for m in report.measurements)
    mean = statistics.fmean(counts)
    return BenchResult(f"shadow/{workload.call_depth_profile}", Metric.SHADOW_DEPTH_STATS, 1, mean,
                       statistics.pstdev(counts), "ops/measurement",
                       f"{workload.params()};median={statistics.median(counts)}",
                       median=statistics.median(counts))


def run_all(seed: int = 0, runs: int = 10, total_measurements: int = 200000,
            distinct_triplets: int = 1000, progress: bool = False) -> List[BenchResult]:
    """Every benchmark on the standard workloads."""
    base = synthetic_workload(total_measurements, distinct_triplets, "none", seed)
    results = [
        bench_attestation(base, runs, progress=progress),
        bench_verification(base, runs, progress=progress),
    ]
    results += bench_network(base, progress=progress)
    for profile in ("none", "recursive", "fixed:3"):
        workload = base if profile == "none" else synthetic_workload(
            total_measurements, distinct_triplets, profile, seed)
        results.append(shadow_depth_stats(workload))
    return results


def write_csv(results: Iterable[BenchResult], out: Union[str, Path, IO[str]], seed: int) -> None:
    """Write results with the columns scenario,metric,unit,runs,mean,stddev,seed,params."""
    if isinstance(out, (str, Path)):
        with open(out, "w", newline="", encoding="utf-8") as f:
            write_csv(results, f, seed)
        return
    writer = csv.writer(out)
    writer.writerow(CSV_COLUMNS)
    for r in results:
        writer.writerow([r.scenario, r.metric.value, r.unit, r.runs, f"{r.mean:.6g}",
                         f"{r.stddev:.6g}", seed, r.params])
