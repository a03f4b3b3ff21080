#!/usr/bin/env python3
"""
Test script to verify CFG loading, checkpoint identification and LoA enumeration
on the reference programs.
"""

import json
import sys
from pathlib import Path

import pytest

# Add the src directory to the Python path
src_path = Path(__file__).parent / "src"
sys.path.insert(0, str(src_path))

from core.cfg_model import (
    CheckpointKind, Edge, EdgeKind, Loa, RetToRelation, compute_ret_to, enumerate_loas,
    identify_checkpoints, load_cfg, load_cfg_file, load_cfg_xml,
)
from core.errors import EnumerationLimitError, ParseError, ValidationError
from core.measurement_db import hash_loa
from core.workload import loop_document, main_a_document, recursion_document, six_node_document

FIXTURES = Path(__file__).parent / "fixtures"


def pairs(measurements):
    return sorted((key.cp_a, key.cp_b) for key, _ in measurements)


def test_six_node_diamond_has_four_loas():
    cfg = identify_checkpoints(load_cfg(six_node_document()))
    measurements = enumerate_loas(cfg)

    assert len(measurements) == 4
    assert pairs(measurements) == [("N1", "N3"), ("N1", "N4"), ("N3", "N6"), ("N4", "N6")]

    by_pair = {(k.cp_a, k.cp_b): (k, loa) for k, loa in measurements}
    key, loa = by_pair[("N1", "N3")]
    assert loa.edges == (Edge("N2", "N3", EdgeKind.BRANCH),)
    assert key.loa_hash == hash_loa(loa)
    # fallthrough-only sub-paths hash the empty LoA
    assert by_pair[("N3", "N6")][0].loa_hash == hash_loa(Loa())
    assert by_pair[("N4", "N6")][0].loa_hash == hash_loa(Loa())


def test_loop_header_becomes_virtual():
    cfg = identify_checkpoints(load_cfg(loop_document()))

    assert cfg.kind_of("N1") is CheckpointKind.VIRTUAL
    assert not cfg.is_checkpoint("N2")
    assert not cfg.is_checkpoint("N3")

    measurements = enumerate_loas(cfg)
    assert pairs(measurements) == [("N1", "N1"), ("N1", "S_B"), ("S_A", "N1")]
    loas = {(k.cp_a, k.cp_b): loa.edges for k, loa in measurements}
    assert loas[("S_A", "N1")] == ()
    assert loas[("N1", "N1")] == (Edge("N1", "N2", EdgeKind.BRANCH),)
    assert loas[("N1", "S_B")] == (Edge("N1", "N3", EdgeKind.BRANCH),)


def test_loop_header_does_not_depend_on_node_order():
    document = loop_document()
    nodes = document["nodes"]
    document["nodes"] = [nodes[2], nodes[3], nodes[1], nodes[4], nodes[0]]
    cfg = identify_checkpoints(load_cfg(document))

    virtual = [node for node, kind in cfg.checkpoints if kind is CheckpointKind.VIRTUAL]
    assert virtual == ["N1"]
    assert pairs(enumerate_loas(cfg)) == [("N1", "N1"), ("N1", "S_B"), ("S_A", "N1")]


def test_enumeration_is_deterministic():
    first = enumerate_loas(identify_checkpoints(load_cfg(main_a_document())))
    second = enumerate_loas(identify_checkpoints(load_cfg(main_a_document())))
    assert first == second
    assert sorted(first, key=lambda m: (m[0].cp_a, m[0].cp_b, m[0].loa_hash)) == \
        sorted(second, key=lambda m: (m[0].cp_a, m[0].cp_b, m[0].loa_hash))


def test_recursion_site_becomes_virtual():
    cfg = identify_checkpoints(load_cfg(recursion_document()))

    assert cfg.kind_of("N2") is CheckpointKind.VIRTUAL
    assert not cfg.is_checkpoint("N1")
    assert not cfg.is_checkpoint("N3")

    measurements = enumerate_loas(cfg)
    assert len(measurements) == 5
    assert pairs(measurements) == [
        ("N2", "N2"), ("N2", "N2"), ("N2", "P_E"), ("P_B", "N2"), ("P_B", "P_E"),
    ]


def test_main_calling_a_twice():
    cfg = identify_checkpoints(load_cfg(main_a_document()))
    measurements = enumerate_loas(cfg)

    loas = {(k.cp_a, k.cp_b): loa for k, loa in measurements}
    assert sorted(loas) == [("C", "C"), ("C", "E"), ("S", "C")]
    assert loas[("S", "C")].call_ret_subset() == (Edge("M1", "A1", EdgeKind.CALL),)
    assert loas[("C", "C")].call_ret_subset() == (
        Edge("A2", "M2", EdgeKind.RETURN), Edge("M3", "A1", EdgeKind.CALL))
    assert loas[("C", "E")].call_ret_subset() == (Edge("A2", "M4", EdgeKind.RETURN),)

    relations = compute_ret_to(measurements, cfg)
    assert relations == {
        RetToRelation(Edge("A2", "M2", EdgeKind.RETURN), Edge("M1", "A1", EdgeKind.CALL)),
        RetToRelation(Edge("A2", "M4", EdgeKind.RETURN), Edge("M3", "A1", EdgeKind.CALL)),
    }


def test_every_cycle_holds_a_checkpoint_after_identification():
    for document in (six_node_document(), loop_document(), recursion_document(), main_a_document()):
        cfg = identify_checkpoints(load_cfg(document))
        # enumeration raises on a checkpoint-free cycle
        enumerate_loas(cfg)


def test_enumeration_rejects_cycle_without_checkpoint():
    cfg = load_cfg(loop_document())
    with pytest.raises(ValidationError):
        enumerate_loas(cfg)


def test_enumeration_step_limit():
    cfg = identify_checkpoints(load_cfg(six_node_document()))
    with pytest.raises(EnumerationLimitError):
        enumerate_loas(cfg, step_limit=2)


def test_identification_keeps_existing_annotations():
    cfg = identify_checkpoints(load_cfg(six_node_document()))
    assert cfg.kind_of("N1") is CheckpointKind.THREAD_BEGIN
    assert cfg.kind_of("N3") is CheckpointKind.EXIT_POINT
    assert cfg.kind_of("N6") is CheckpointKind.THREAD_END
    assert all(kind is not CheckpointKind.VIRTUAL for _, kind in cfg.checkpoints)


def test_load_cfg_from_json_text_and_file():
    text = json.dumps(six_node_document())
    from_text = load_cfg(text)
    from_file, raw = load_cfg_file(FIXTURES / "six.json")

    assert from_text.nodes == from_file.nodes
    assert set(from_text.edges) == set(from_file.edges)
    assert raw == (FIXTURES / "six.json").read_bytes()


def test_load_cfg_xml_matches_json():
    xml = """<cfg entry="N1">
      <node id="N1" checkpoint="thread_begin"/>
      <node id="N2"/>
      <node id="N3" checkpoint="exit_point"/>
      <node id="N4" checkpoint="exit_point"/>
      <node id="N5"/>
      <node id="N6" checkpoint="thread_end"/>
      <edge src="N1" dst="N2" kind="fallthrough"/>
      <edge src="N2" dst="N3" kind="branch"/>
      <edge src="N2" dst="N4" kind="branch"/>
      <edge src="N3" dst="N5" kind="fallthrough"/>
      <edge src="N4" dst="N5" kind="fallthrough"/>
      <edge src="N5" dst="N6" kind="fallthrough"/>
      <exit id="N6"/>
    </cfg>"""
    cfg = load_cfg_xml(xml)
    reference = load_cfg(six_node_document())

    assert cfg.nodes == reference.nodes
    assert cfg.edges == reference.edges
    assert cfg.checkpoints == reference.checkpoints


def test_malformed_documents_raise_parse_error():
    with pytest.raises(ParseError):
        load_cfg("{not json")
    with pytest.raises(ParseError):
        load_cfg({"nodes": [], "edges": []})
    with pytest.raises(ParseError):
        document = six_node_document()
        document["edges"][0]["kind"] = "jump"
        load_cfg(document)
    with pytest.raises(ParseError):
        load_cfg_xml("<cfg><node")


def test_dangling_edge_is_rejected():
    document = six_node_document()
    document["edges"].append({"src": "N5", "dst": "N9", "kind": "branch"})
    with pytest.raises(ValidationError, match="N9"):
        load_cfg(document)


def test_unreachable_node_is_rejected():
    document = six_node_document()
    document["nodes"].append({"id": "N7", "checkpoint": "none"})
    with pytest.raises(ValidationError, match="unreachable"):
        load_cfg(document)


def test_labels_with_whitespace_are_rejected():
    document = six_node_document()
    document["nodes"][1]["id"] = "N 2"
    with pytest.raises(ValidationError):
        load_cfg(document)


def test_exit_must_be_thread_end():
    document = six_node_document()
    document["nodes"][5]["checkpoint"] = "none"
    with pytest.raises(ValidationError, match="thread_end"):
        load_cfg(document)


def test_entry_must_be_thread_begin():
    document = six_node_document()
    document["nodes"][0]["checkpoint"] = "none"
    with pytest.raises(ValidationError, match="thread_begin"):
        load_cfg(document)


def test_handler_thread_is_a_thread_root():
    document = six_node_document()
    document["nodes"] += [{"id": "H1", "checkpoint": "thread_begin"},
                          {"id": "H2", "checkpoint": "thread_end"}]
    document["edges"].append({"src": "H1", "dst": "H2", "kind": "branch"})
    document["handlers"] = [{"trigger": "signal", "entry": "H1"}]
    cfg = load_cfg(document)

    assert cfg.thread_roots == ("N1", "H1")
    keys = pairs(enumerate_loas(identify_checkpoints(cfg)))
    assert ("H1", "H2") in keys


def test_ret_to_requires_call_and_return_kinds():
    with pytest.raises(ValidationError):
        RetToRelation(Edge("A", "B", EdgeKind.CALL), Edge("C", "D", EdgeKind.CALL))
