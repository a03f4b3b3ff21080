#!/usr/bin/env python3
"""
Measurements Database for ScaRR

Canonical LoA hashing plus construction, binary persistence and lookup of the
offline measurements (triplets, call/return subsets and ret_to relations).
"""

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Dict, FrozenSet, Iterable, Mapping, Optional, Set, Tuple, Union

from .cfg_model import (
    BblId, Cfg, CheckpointKind, Edge, EdgeKind, Loa, MeasurementKey, RetToRelation,
    compute_ret_to, enumerate_loas, identify_checkpoints,
)
from .errors import ConfigError, ConsistencyError, FormatError

logger = logging.getLogger(__name__)

DIGEST_SIZE = 32
DEFAULT_ALGORITHM = "blake2b-256"

DB_MAGIC = b"SCARRDB1"
DB_VERSION = 1

LABEL_SEPARATOR = b"\x1f"
EDGE_SEPARATOR = b"\x1e"

# name -> (file id, constructor)
HASH_ALGORITHMS: Dict[str, Tuple[int, Callable]] = {
    "blake2b-256": (1, partial(hashlib.blake2b, digest_size=DIGEST_SIZE)),
    "sha256": (2, hashlib.sha256),
    "sha3-256": (3, hashlib.sha3_256),
    "blake2s-256": (4, partial(hashlib.blake2s, digest_size=DIGEST_SIZE)),
}

_ALGORITHM_BY_ID = {algo_id: name for name, (algo_id, _) in HASH_ALGORITHMS.items()}
_KIND_BY_TAG = {kind.tag: kind for kind in EdgeKind}

_CHECKPOINT_CODES = {
    CheckpointKind.THREAD_BEGIN: 1,
    CheckpointKind.THREAD_END: 2,
    CheckpointKind.EXIT_POINT: 3,
    CheckpointKind.VIRTUAL: 4,
}
_CHECKPOINT_BY_CODE = {code: kind for kind, code in _CHECKPOINT_CODES.items()}


def hash_constructor(algorithm: str) -> Callable:
    """Return the hashlib constructor for a configured algorithm name.

    Raises:
        ConfigError: Unknown algorithm
    """
    try:
        return HASH_ALGORITHMS[algorithm][1]
    except KeyError:
        raise ConfigError(
            f"unknown hash algorithm {algorithm!r}; choose from {', '.join(HASH_ALGORITHMS)}"
        ) from None


def digest(data: bytes, algorithm: str = DEFAULT_ALGORITHM) -> bytes:
    return hash_constructor(algorithm)(data).digest()


def encode_loa(loa: Union[Loa, Iterable[Edge]]) -> bytes:
    """Canonical byte encoding of a LoA."""
    parts = []
    for edge in loa:
        parts.append(edge.src.encode("utf-8"))
        parts.append(LABEL_SEPARATOR)
        parts.append(edge.dst.encode("utf-8"))
        parts.append(EDGE_SEPARATOR)
        parts.append(bytes((edge.kind.tag,)))
    return b"".join(parts)


def hash_loa(loa: Union[Loa, Iterable[Edge]], algorithm: str = DEFAULT_ALGORITHM) -> bytes:
    """Digest of the canonical LoA encoding.

    Args:
        loa: Loa or ordered edges
        algorithm: Configured hash algorithm name

    Returns:
        32-byte digest
    """
    return digest(encode_loa(loa), algorithm)


def program_digest(document: bytes, algorithm: str = DEFAULT_ALGORITHM) -> bytes:
    """Program id: digest of the raw CFG document bytes."""
    return digest(document, algorithm)


@dataclass(frozen=True)
class OfflineMeasurement:
    """A DB entry: the triplet plus the call/return edges of its LoA."""
    key: MeasurementKey
    call_ret_subset: Tuple[Edge, ...]


@dataclass
class MeasurementsDb:
    """Offline measurements of one program. Treat as immutable once built."""
    entries: Dict[MeasurementKey, OfflineMeasurement]
    ret_to: Dict[Edge, FrozenSet[Edge]]
    program_id: bytes
    algorithm: str = DEFAULT_ALGORITHM
    checkpoints: Dict[BblId, CheckpointKind] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, key: MeasurementKey) -> Optional[OfflineMeasurement]:
        """Exact-match lookup on the full triplet."""
        return self.entries.get(key)

    def returns_to(self, return_edge: Edge, call_edge: Edge) -> bool:
        return call_edge in self.ret_to.get(return_edge, ())

    def kind_of(self, node: BblId) -> Optional[CheckpointKind]:
        return self.checkpoints.get(node)

    def relations(self) -> Set[RetToRelation]:
        return {RetToRelation(ret, call) for ret, calls in self.ret_to.items() for call in calls}

    def sorted_entries(self):
        return sorted(self.entries.values(), key=lambda m: (m.key.cp_a, m.key.cp_b, m.key.loa_hash))


def lookup(db: MeasurementsDb, key: MeasurementKey) -> Optional[OfflineMeasurement]:
    return db.lookup(key)


def build_db(measurements: Iterable[Tuple[MeasurementKey, Loa]],
             ret_to: Iterable[RetToRelation],
             program_id: bytes,
             algorithm: str = DEFAULT_ALGORITHM,
             checkpoints: Optional[Mapping[BblId, CheckpointKind]] = None) -> MeasurementsDb:
    """Assemble a MeasurementsDb.

    Args:
        measurements: (key, Loa) pairs from enumerate_loas
        ret_to: Relations from compute_ret_to
        program_id: Digest of the source CFG document
        algorithm: Hash algorithm the keys were computed with
        checkpoints: Checkpoint annotations of the source Cfg

    Returns:
        MeasurementsDb

    Raises:
        ConsistencyError: Same key with different subsets, or a return edge without ret_to
    """
    hash_constructor(algorithm)
    if len(program_id) != DIGEST_SIZE:
        raise ConsistencyError(f"program id must be {DIGEST_SIZE} bytes, got {len(program_id)}")

    relations: Dict[Edge, Set[Edge]] = {}
    for relation in ret_to:
        relations.setdefault(relation.return_edge, set()).add(relation.call_edge)

    entries: Dict[MeasurementKey, OfflineMeasurement] = {}
    for key, loa in measurements:
        subset = loa.call_ret_subset()
        existing = entries.get(key)
        if existing is not None:
            if existing.call_ret_subset != subset:
                raise ConsistencyError(f"measurement {key} maps to two different call/return subsets")
            continue
        for edge in subset:
            if edge.kind is EdgeKind.RETURN and edge not in relations:
                raise ConsistencyError(f"return edge {edge} in {key} has no ret_to relation")
        entries[key] = OfflineMeasurement(key, subset)

    logger.info("Built measurements DB: %d entries, %d ret_to relations",
                len(entries), sum(len(c) for c in relations.values()))
    return MeasurementsDb(
        entries=entries,
        ret_to={ret: frozenset(calls) for ret, calls in relations.items()},
        program_id=bytes(program_id),
        algorithm=algorithm,
        checkpoints=dict(checkpoints or {}),
    )


def generate_measurements(cfg: Cfg, document: bytes, algorithm: str = DEFAULT_ALGORITHM,
                          step_limit: Optional[int] = None) -> MeasurementsDb:
    """Run the offline pipeline on a loaded Cfg.

    Args:
        cfg: Validated Cfg, without virtual checkpoints yet
        document: Raw CFG document bytes (program id source)
        algorithm: Hash algorithm name
        step_limit: Optional enumeration step limit

    Returns:
        MeasurementsDb for the program
    """
    annotated = identify_checkpoints(cfg)
    measurements = enumerate_loas(annotated, algorithm, step_limit)
    relations = compute_ret_to(measurements, annotated)
    return build_db(measurements, relations, program_digest(document, algorithm),
                    algorithm, annotated.checkpoint_map)


# ---------------------------------------------------------------------------
# Binary format
# ---------------------------------------------------------------------------

def pack_label(label: str) -> bytes:
    raw = label.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_edge(edge: Edge) -> bytes:
    return pack_label(edge.src) + pack_label(edge.dst) + struct.pack("<B", edge.kind.tag)


class ByteReader:
    """Cursor over a byte string; every short read is a FormatError."""

    def __init__(self, data: bytes, error: type = FormatError):
        self.data = memoryview(data)
        self.offset = 0
        self.error = error

    def remaining(self) -> int:
        return len(self.data) - self.offset

    def read(self, size: int) -> bytes:
        if size > self.remaining():
            raise self.error(f"truncated stream: need {size} bytes at offset {self.offset}, "
                             f"{self.remaining()} left")
        chunk = bytes(self.data[self.offset:self.offset + size])
        self.offset += size
        return chunk

    def u8(self) -> int:
        return self.read(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.read(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.read(8))[0]

    def label(self) -> str:
        raw = self.read(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise self.error(f"label is not UTF-8: {e}") from e

    def edge(self) -> Edge:
        src, dst = self.label(), self.label()
        tag = self.u8()
        if tag not in _KIND_BY_TAG:
            raise self.error(f"unknown edge tag 0x{tag:02x}")
        return Edge(src, dst, _KIND_BY_TAG[tag])

    def expect_end(self) -> None:
        if self.remaining():
            raise self.error(f"{self.remaining()} trailing bytes")


def save_db(db: MeasurementsDb) -> bytes:
    """Serialize a MeasurementsDb to its binary file format."""
    algo_id = HASH_ALGORITHMS[db.algorithm][0]
    out = bytearray(DB_MAGIC)
    out += struct.pack("<BB", DB_VERSION, algo_id)
    out += db.program_id

    entries = db.sorted_entries()
    out += struct.pack("<I", len(entries))
    for entry in entries:
        out += pack_label(entry.key.cp_a)
        out += pack_label(entry.key.cp_b)
        out += entry.key.loa_hash
        out += struct.pack("<I", len(entry.call_ret_subset))
        for edge in entry.call_ret_subset:
            out += _pack_edge(edge)

    pairs = sorted(db.relations(), key=lambda r: (r.return_edge.src, r.return_edge.dst,
                                                  r.call_edge.src, r.call_edge.dst))
    out += struct.pack("<I", len(pairs))
    for relation in pairs:
        out += _pack_edge(relation.return_edge)
        out += _pack_edge(relation.call_edge)

    out += struct.pack("<I", len(db.checkpoints))
    for node, kind in sorted(db.checkpoints.items()):
        out += pack_label(node)
        out += struct.pack("<B", _CHECKPOINT_CODES[kind])
    return bytes(out)


def load_db(data: bytes) -> MeasurementsDb:
    """Parse the binary file format.

    Raises:
        FormatError: Bad magic, unknown version or algorithm, truncation
    """
    reader = ByteReader(data)
    magic = reader.read(len(DB_MAGIC))
    if magic != DB_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DB_MAGIC!r}")
    version = reader.u8()
    if version != DB_VERSION:
        raise FormatError(f"unsupported DB version {version} (this build reads version {DB_VERSION})")
    algo_id = reader.u8()
    if algo_id not in _ALGORITHM_BY_ID:
        raise FormatError(f"unknown hash algorithm id {algo_id}")
    program_id = reader.read(DIGEST_SIZE)

    entries = {}
    for _ in range(reader.u32()):
        cp_a, cp_b = reader.label(), reader.label()
        key = MeasurementKey(cp_a, cp_b, reader.read(DIGEST_SIZE))
        subset = tuple(reader.edge() for _ in range(reader.u32()))
        entries[key] = OfflineMeasurement(key, subset)

    ret_to: Dict[Edge, Set[Edge]] = {}
    for _ in range(reader.u32()):
        ret, call = reader.edge(), reader.edge()
        ret_to.setdefault(ret, set()).add(call)

    checkpoints = {}
    for _ in range(reader.u32()):
        node = reader.label()
        code = reader.u8()
        if code not in _CHECKPOINT_BY_CODE:
            raise FormatError(f"unknown checkpoint code {code} for {node!r}")
        checkpoints[node] = _CHECKPOINT_BY_CODE[code]
    reader.expect_end()

    return MeasurementsDb(
        entries=entries,
        ret_to={ret: frozenset(calls) for ret, calls in ret_to.items()},
        program_id=program_id,
        algorithm=_ALGORITHM_BY_ID[algo_id],
        checkpoints=checkpoints,
    )


def write_db(db: MeasurementsDb, path: Union[str, Path]) -> None:
    Path(path).write_bytes(save_db(db))
    logger.info("Wrote %d measurements to %s", len(db), path)


def read_db(path: Union[str, Path]) -> MeasurementsDb:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    return load_db(data)
