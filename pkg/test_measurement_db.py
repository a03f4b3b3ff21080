#!/usr/bin/env python3
"""
Test script to verify measurements DB generation, lookup and the binary file format.
"""

import itertools
import json
import random
import struct
import sys
from pathlib import Path

import pytest

# Add the src directory to the Python path
src_path = Path(__file__).parent / "src"
sys.path.insert(0, str(src_path))

from core.cfg_model import CheckpointKind, Edge, EdgeKind, Loa, MeasurementKey, RetToRelation, load_cfg
from core.errors import ConfigError, ConsistencyError, FormatError
from core.measurement_db import (
    DB_MAGIC, build_db, encode_loa, generate_measurements, hash_loa, load_db, lookup,
    program_digest, read_db, save_db, write_db,
)
from core.workload import main_a_document, six_node_document

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def main_a_db():
    raw = json.dumps(main_a_document()).encode("utf-8")
    return generate_measurements(load_cfg(raw), raw)


def test_main_a_db_contents(main_a_db):
    assert len(main_a_db) == 3
    assert main_a_db.returns_to(Edge("A2", "M2", EdgeKind.RETURN), Edge("M1", "A1", EdgeKind.CALL))
    assert main_a_db.returns_to(Edge("A2", "M4", EdgeKind.RETURN), Edge("M3", "A1", EdgeKind.CALL))
    assert not main_a_db.returns_to(Edge("A2", "M2", EdgeKind.RETURN), Edge("M3", "A1", EdgeKind.CALL))
    assert main_a_db.kind_of("S") is CheckpointKind.THREAD_BEGIN
    assert main_a_db.kind_of("C") is CheckpointKind.EXIT_POINT
    assert main_a_db.kind_of("E") is CheckpointKind.THREAD_END


def test_program_id_is_digest_of_document(main_a_db):
    raw = (FIXTURES / "six.json").read_bytes()
    db = generate_measurements(load_cfg(raw), raw)
    assert db.program_id == program_digest(raw)
    assert db.program_id != main_a_db.program_id


def test_lookup_is_exact_on_the_triplet(main_a_db):
    entry = next(e for e in main_a_db.sorted_entries() if e.key.cp_a != e.key.cp_b)
    assert lookup(main_a_db, entry.key) == entry

    altered = bytearray(entry.key.loa_hash)
    altered[0] ^= 0x01
    assert lookup(main_a_db, MeasurementKey(entry.key.cp_a, entry.key.cp_b, bytes(altered))) is None
    assert lookup(main_a_db, MeasurementKey(entry.key.cp_b, entry.key.cp_a, entry.key.loa_hash)) is None


def test_save_and_load_preserve_the_db(main_a_db, tmp_path):
    path = tmp_path / "main_a.db"
    write_db(main_a_db, path)
    loaded = read_db(path)

    assert loaded.entries == main_a_db.entries
    assert loaded.ret_to == main_a_db.ret_to
    assert loaded.program_id == main_a_db.program_id
    assert loaded.algorithm == main_a_db.algorithm
    assert loaded.checkpoints == main_a_db.checkpoints
    assert path.read_bytes().startswith(DB_MAGIC)


def test_serialization_is_deterministic(main_a_db):
    assert save_db(main_a_db) == save_db(load_db(save_db(main_a_db)))


def test_bad_magic(main_a_db):
    data = bytearray(save_db(main_a_db))
    data[0:8] = b"NOTADB!!"
    with pytest.raises(FormatError, match="magic"):
        load_db(bytes(data))


def test_unsupported_version(main_a_db):
    data = bytearray(save_db(main_a_db))
    data[len(DB_MAGIC)] = 2
    with pytest.raises(FormatError, match="unsupported DB version 2"):
        load_db(bytes(data))


def test_truncated_and_trailing_data(main_a_db):
    data = save_db(main_a_db)
    with pytest.raises(FormatError):
        load_db(data[:-3])
    with pytest.raises(FormatError, match="trailing"):
        load_db(data + b"\x00")


def test_missing_file_is_format_error(tmp_path):
    with pytest.raises(FormatError):
        read_db(tmp_path / "absent.db")


def test_algorithm_is_recorded_and_changes_hashes():
    raw = json.dumps(six_node_document()).encode("utf-8")
    cfg = load_cfg(raw)
    blake = generate_measurements(cfg, raw)
    sha = generate_measurements(cfg, raw, "sha256")

    assert load_db(save_db(sha)).algorithm == "sha256"
    assert {k.loa_hash for k in blake.entries} != {k.loa_hash for k in sha.entries}
    assert len(blake) == len(sha) == 4


def test_unknown_algorithm():
    with pytest.raises(ConfigError):
        hash_loa([], "md5")


def test_hash_depends_on_edge_kind():
    as_branch = hash_loa([Edge("A", "B", EdgeKind.BRANCH)])
    as_call = hash_loa([Edge("A", "B", EdgeKind.CALL)])
    assert as_branch != as_call
    assert hash_loa([Edge("AB", "C", EdgeKind.BRANCH)]) != hash_loa([Edge("A", "BC", EdgeKind.BRANCH)])
    assert encode_loa([]) == b""


def test_no_collisions_over_many_distinct_loas():
    rng = random.Random(0)
    labels = [f"B{i}" for i in range(64)]
    kinds = list(EdgeKind)
    loas = set()
    while len(loas) < 100000:
        loas.add(tuple(Edge(rng.choice(labels), rng.choice(labels), rng.choice(kinds))
                       for _ in range(rng.randint(1, 4))))
    assert len({hash_loa(loa) for loa in loas}) == len(loas)


def test_edge_order_changes_the_digest():
    edges = [Edge(a, b, kind) for a, b in itertools.product("ABCD", repeat=2) for kind in EdgeKind]
    for first, second in itertools.permutations(edges, 2):
        assert hash_loa([first, second]) != hash_loa([second, first]), f"{first} {second}"


def test_conflicting_subsets_are_rejected():
    call = Edge("A", "F", EdgeKind.CALL)
    key = MeasurementKey("A", "B", b"\x11" * 32)
    with pytest.raises(ConsistencyError):
        build_db([(key, Loa((call,))), (key, Loa())], [], b"\x00" * 32)


def test_return_without_relation_is_rejected():
    ret = Edge("F", "A", EdgeKind.RETURN)
    key = MeasurementKey("A", "B", hash_loa([ret]))
    with pytest.raises(ConsistencyError, match="ret_to"):
        build_db([(key, Loa((ret,)))], [], b"\x00" * 32)

    relation = RetToRelation(ret, Edge("X", "F", EdgeKind.CALL))
    db = build_db([(key, Loa((ret,)))], [relation], b"\x00" * 32)
    assert db.relations() == {relation}


def test_duplicate_entries_collapse():
    key = MeasurementKey("A", "B", hash_loa([]))
    db = build_db([(key, Loa()), (key, Loa())], [], b"\x00" * 32)
    assert len(db) == 1


def test_program_id_must_be_a_digest():
    with pytest.raises(ConsistencyError):
        build_db([], [], b"short")


def test_checkpoint_section_rejects_unknown_code(main_a_db):
    data = bytearray(save_db(main_a_db))
    # last record of the checkpoint section is one code byte
    data[-1] = 9
    with pytest.raises(FormatError, match="checkpoint code"):
        load_db(bytes(data))


def test_checkpoint_count_is_last_section(main_a_db):
    data = save_db(main_a_db)
    count_offset = len(data) - sum(4 + len(node.encode()) + 1 for node in main_a_db.checkpoints) - 4
    assert struct.unpack_from("<I", data, count_offset)[0] == len(main_a_db.checkpoints)
