#!/usr/bin/env python3
"""
CFG Model for ScaRR

Represents programs as control-flow graphs of basic blocks, places checkpoints,
enumerates the Lists of Actions (LoAs) between consecutive checkpoints and
derives the ret_to relations used by the verifier's shadow stack.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import networkx as nx
from lxml import etree

from .errors import EnumerationLimitError, ParseError, ValidationError

logger = logging.getLogger(__name__)

BblId = str


class EdgeKind(Enum):
    """Kind of a CFG edge."""
    CALL = "call"
    RETURN = "return"
    BRANCH = "branch"
    FALLTHROUGH = "fallthrough"  # non-significant successor

    @property
    def is_significant(self) -> bool:
        return self is not EdgeKind.FALLTHROUGH

    @property
    def tag(self) -> int:
        """One-byte tag used by the canonical LoA encoding."""
        return _KIND_TAGS[self]


_KIND_TAGS = {
    EdgeKind.CALL: 0x01,
    EdgeKind.RETURN: 0x02,
    EdgeKind.BRANCH: 0x03,
    EdgeKind.FALLTHROUGH: 0x04,
}


class CheckpointKind(Enum):
    """Checkpoint annotation carried by a node."""
    THREAD_BEGIN = "thread_begin"
    THREAD_END = "thread_end"
    EXIT_POINT = "exit_point"
    VIRTUAL = "virtual"


class HandlerTrigger(Enum):
    SIGNAL = "signal"
    EXCEPTION = "exception"


@dataclass(frozen=True)
class Edge:
    """A directed, typed edge between two basic blocks."""
    src: BblId
    dst: BblId
    kind: EdgeKind

    def __str__(self) -> str:
        return f"({self.src},{self.dst},{self.kind.value})"


@dataclass(frozen=True)
class Loa:
    """List of Actions: the significant edges between two checkpoints."""
    edges: Tuple[Edge, ...] = ()

    def __len__(self) -> int:
        return len(self.edges)

    def __iter__(self):
        return iter(self.edges)

    def call_ret_subset(self) -> Tuple[Edge, ...]:
        """Call and Return edges of this LoA, in order."""
        return tuple(e for e in self.edges if e.kind in (EdgeKind.CALL, EdgeKind.RETURN))


@dataclass(frozen=True)
class MeasurementKey:
    """The (cp_A, cp_B, H(LoA)) triplet."""
    cp_a: BblId
    cp_b: BblId
    loa_hash: bytes

    def __str__(self) -> str:
        return f"({self.cp_a},{self.cp_b},{self.loa_hash.hex()[:16]})"


@dataclass(frozen=True)
class RetToRelation:
    """A return edge paired with a call edge it may legally return from."""
    return_edge: Edge
    call_edge: Edge

    def __post_init__(self):
        if self.return_edge.kind is not EdgeKind.RETURN:
            raise ValidationError(f"ret_to needs a return edge, got {self.return_edge}")
        if self.call_edge.kind is not EdgeKind.CALL:
            raise ValidationError(f"ret_to needs a call edge, got {self.call_edge}")


@dataclass(frozen=True)
class Handler:
    """A signal or exception handler, modelled as a separate thread."""
    trigger: HandlerTrigger
    entry: BblId


@dataclass(frozen=True)
class Cfg:
    """Control-flow graph of one program.

    Nodes keep document order, which every deterministic traversal relies on.
    Checkpoint annotations are stored as (node, kind) pairs in node order.
    """
    nodes: Tuple[BblId, ...]
    edges: Tuple[Edge, ...]
    entry: BblId
    exits: Tuple[BblId, ...] = ()
    handlers: Tuple[Handler, ...] = ()
    checkpoints: Tuple[Tuple[BblId, CheckpointKind], ...] = field(default=())

    @cached_property
    def checkpoint_map(self) -> Dict[BblId, CheckpointKind]:
        return dict(self.checkpoints)

    @cached_property
    def _out_edges(self) -> Dict[BblId, Tuple[Edge, ...]]:
        out: Dict[BblId, List[Edge]] = {node: [] for node in self.nodes}
        for edge in self.edges:
            out[edge.src].append(edge)
        return {node: tuple(edges) for node, edges in out.items()}

    @cached_property
    def edge_pairs(self) -> FrozenSet[Tuple[BblId, BblId]]:
        return frozenset((e.src, e.dst) for e in self.edges)

    @cached_property
    def call_sites(self) -> FrozenSet[BblId]:
        return frozenset(e.src for e in self.edges if e.kind is EdgeKind.CALL)

    @cached_property
    def _return_sites(self) -> Dict[BblId, BblId]:
        sites = {}
        for edge in self.edges:
            if edge.kind is EdgeKind.FALLTHROUGH and edge.src in self.call_sites:
                sites.setdefault(edge.src, edge.dst)
        return sites

    @cached_property
    def _path_edges(self) -> Dict[BblId, Tuple[Edge, ...]]:
        return {
            node: tuple(e for e in edges if not self.is_return_link(e))
            for node, edges in self._out_edges.items()
        }

    @cached_property
    def thread_roots(self) -> Tuple[BblId, ...]:
        return (self.entry,) + tuple(h.entry for h in self.handlers)

    @cached_property
    def function_bodies(self) -> Dict[BblId, FrozenSet[BblId]]:
        """Nodes reachable from each function root without crossing calls or returns."""
        roots = list(self.thread_roots)
        for edge in self.edges:
            if edge.kind is EdgeKind.CALL and edge.dst not in roots:
                roots.append(edge.dst)

        bodies = {}
        for root in roots:
            seen = {root}
            pending = [root]
            while pending:
                node = pending.pop()
                for edge in self._out_edges[node]:
                    if edge.kind in (EdgeKind.BRANCH, EdgeKind.FALLTHROUGH) and edge.dst not in seen:
                        seen.add(edge.dst)
                        pending.append(edge.dst)
            bodies[root] = frozenset(seen)
        return bodies

    def kind_of(self, node: BblId) -> Optional[CheckpointKind]:
        return self.checkpoint_map.get(node)

    def is_checkpoint(self, node: BblId) -> bool:
        return node in self.checkpoint_map

    def out_edges(self, node: BblId) -> Tuple[Edge, ...]:
        return self._out_edges.get(node, ())

    def path_edges(self, node: BblId) -> Tuple[Edge, ...]:
        """Outgoing edges an execution can actually take from node."""
        return self._path_edges.get(node, ())

    def is_return_link(self, edge: Edge) -> bool:
        """True for the fallthrough that names a call site's return site."""
        return edge.kind is EdgeKind.FALLTHROUGH and edge.src in self.call_sites

    def return_site(self, call_site: BblId) -> BblId:
        """Block a call made from call_site returns into."""
        return self._return_sites.get(call_site, call_site)

    def returns_to(self, return_edge: Edge, call_edge: Edge) -> bool:
        """True if return_edge is a legal return for call_edge."""
        body = self.function_bodies.get(call_edge.dst, frozenset())
        return return_edge.src in body and return_edge.dst == self.return_site(call_edge.src)

    def with_checkpoints(self, annotations: Mapping[BblId, CheckpointKind]) -> "Cfg":
        ordered = tuple((node, annotations[node]) for node in self.nodes if node in annotations)
        return replace(self, checkpoints=ordered)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _require(document: Mapping[str, Any], key: str, expected: type) -> Any:
    if key not in document:
        raise ParseError(f"missing field '{key}'")
    value = document[key]
    if not isinstance(value, expected):
        raise ParseError(f"field '{key}' must be {expected.__name__}, got {type(value).__name__}")
    return value


def _check_label(label: Any) -> BblId:
    if not isinstance(label, str) or not label:
        raise ValidationError(f"node id must be a non-empty string, got {label!r}")
    if any(ch.isspace() or ord(ch) < 0x20 for ch in label):
        raise ValidationError(f"node id {label!r} contains whitespace or control characters")
    return label


def load_cfg(description: Union[str, bytes, Mapping[str, Any]]) -> Cfg:
    """Parse and validate a CFG document.

    Args:
        description: JSON text/bytes or an already decoded mapping

    Returns:
        Validated Cfg

    Raises:
        ParseError: Malformed document
        ValidationError: Dangling edge, unreachable node, bad annotations
    """
    if isinstance(description, (str, bytes)):
        try:
            document = json.loads(description)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ParseError(f"invalid JSON: {e}") from e
    else:
        document = description
    if not isinstance(document, Mapping):
        raise ParseError("CFG document must be an object")

    raw_nodes = _require(document, "nodes", list)
    raw_edges = _require(document, "edges", list)
    entry = _require(document, "entry", str)
    raw_exits = document.get("exits", [])
    raw_handlers = document.get("handlers", [])
    if not isinstance(raw_exits, list) or not isinstance(raw_handlers, list):
        raise ParseError("'exits' and 'handlers' must be lists")

    nodes: List[BblId] = []
    annotations: Dict[BblId, CheckpointKind] = {}
    for raw in raw_nodes:
        if not isinstance(raw, Mapping):
            raise ParseError(f"node entry must be an object, got {raw!r}")
        node = _check_label(_require(raw, "id", str))
        if node in annotations or node in nodes:
            raise ValidationError(f"duplicate node id {node!r}")
        nodes.append(node)
        checkpoint = raw.get("checkpoint", "none")
        if checkpoint not in (None, "none"):
            try:
                annotations[node] = CheckpointKind(checkpoint)
            except ValueError as e:
                raise ParseError(f"node {node!r}: unknown checkpoint {checkpoint!r}") from e

    edges: List[Edge] = []
    for raw in raw_edges:
        if not isinstance(raw, Mapping):
            raise ParseError(f"edge entry must be an object, got {raw!r}")
        try:
            kind = EdgeKind(_require(raw, "kind", str))
        except ValueError as e:
            raise ParseError(f"unknown edge kind {raw.get('kind')!r}") from e
        edges.append(Edge(_require(raw, "src", str), _require(raw, "dst", str), kind))

    handlers = []
    for raw in raw_handlers:
        if not isinstance(raw, Mapping):
            raise ParseError(f"handler entry must be an object, got {raw!r}")
        try:
            trigger = HandlerTrigger(_require(raw, "trigger", str))
        except ValueError as e:
            raise ParseError(f"unknown handler trigger {raw.get('trigger')!r}") from e
        handlers.append(Handler(trigger, _require(raw, "entry", str)))

    cfg = Cfg(
        nodes=tuple(nodes),
        edges=tuple(edges),
        entry=entry,
        exits=tuple(raw_exits),
        handlers=tuple(handlers),
    ).with_checkpoints(annotations)
    validate_cfg(cfg)
    return cfg


def load_cfg_xml(text: Union[str, bytes]) -> Cfg:
    """Parse the XML variant of the CFG document.

    Args:
        text: XML document with a <cfg> root element

    Returns:
        Validated Cfg
    """
    try:
        root = etree.fromstring(text.encode("utf-8") if isinstance(text, str) else text)
    except etree.XMLSyntaxError as e:
        raise ParseError(f"invalid XML: {e}") from e
    if root.tag != "cfg":
        raise ParseError(f"root element must be <cfg>, got <{root.tag}>")

    document = {
        "entry": root.get("entry", ""),
        "nodes": [
            {"id": elem.get("id", ""), "checkpoint": elem.get("checkpoint", "none")}
            for elem in root.findall("node")
        ],
        "edges": [
            {"src": elem.get("src", ""), "dst": elem.get("dst", ""), "kind": elem.get("kind", "")}
            for elem in root.findall("edge")
        ],
        "exits": [elem.get("id", "") for elem in root.findall("exit")],
        "handlers": [
            {"trigger": elem.get("trigger", ""), "entry": elem.get("entry", "")}
            for elem in root.findall("handler")
        ],
    }
    return load_cfg(document)


def load_cfg_file(path: Union[str, Path]) -> Tuple[Cfg, bytes]:
    """Load a CFG document from disk.

    Args:
        path: JSON document, or XML when the suffix is .xml

    Returns:
        Tuple of (Cfg, raw file bytes); the raw bytes feed the program id
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    if path.suffix.lower() == ".xml":
        return load_cfg_xml(raw), raw
    return load_cfg(raw), raw


def validate_cfg(cfg: Cfg) -> None:
    """Check the structural invariants of a Cfg.

    Raises:
        ValidationError: On the first violated invariant
    """
    known = set(cfg.nodes)
    if not known:
        raise ValidationError("CFG has no nodes")
    for edge in cfg.edges:
        for end in (edge.src, edge.dst):
            if end not in known:
                raise ValidationError(f"edge {edge} references undeclared node {end!r}")

    if cfg.entry not in known:
        raise ValidationError(f"entry {cfg.entry!r} is not a declared node")
    if cfg.kind_of(cfg.entry) is not CheckpointKind.THREAD_BEGIN:
        if not (cfg.entry in cfg.exits and cfg.kind_of(cfg.entry) is CheckpointKind.THREAD_END):
            raise ValidationError(f"entry {cfg.entry!r} must be annotated thread_begin")

    for exit_node in cfg.exits:
        if exit_node not in known:
            raise ValidationError(f"exit {exit_node!r} is not a declared node")
        if exit_node == cfg.entry:
            continue
        if cfg.kind_of(exit_node) is not CheckpointKind.THREAD_END:
            raise ValidationError(f"exit {exit_node!r} must be annotated thread_end")

    for handler in cfg.handlers:
        if handler.entry not in known:
            raise ValidationError(f"handler entry {handler.entry!r} is not a declared node")
        if cfg.kind_of(handler.entry) is not CheckpointKind.THREAD_BEGIN:
            raise ValidationError(f"handler entry {handler.entry!r} must be annotated thread_begin")
        for node in _reachable(cfg, [handler.entry]):
            if not cfg.out_edges(node) and cfg.kind_of(node) is not CheckpointKind.THREAD_END:
                raise ValidationError(
                    f"handler {handler.entry!r} terminates at {node!r}, which is not thread_end")

    for site in cfg.call_sites:
        links = [e for e in cfg.out_edges(site) if e.kind is EdgeKind.FALLTHROUGH]
        if len(links) > 1:
            raise ValidationError(f"call site {site!r} names more than one return site")

    unreachable = known - _reachable(cfg, cfg.thread_roots)
    if unreachable:
        first = next(node for node in cfg.nodes if node in unreachable)
        raise ValidationError(f"node {first!r} is unreachable from every thread entry")


def _reachable(cfg: Cfg, roots: Iterable[BblId]) -> Set[BblId]:
    seen = set(roots)
    pending = list(seen)
    while pending:
        node = pending.pop()
        for edge in cfg.out_edges(node):
            if edge.dst not in seen:
                seen.add(edge.dst)
                pending.append(edge.dst)
    return seen


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _recursive_calls(cfg: Cfg) -> List[Edge]:
    """Call edges that take part in a call-graph cycle."""
    bodies = cfg.function_bodies
    call_graph = nx.DiGraph()
    call_graph.add_nodes_from(bodies)
    calls = [e for e in cfg.edges if e.kind is EdgeKind.CALL]
    callers: Dict[Edge, List[BblId]] = {}
    for call in calls:
        callers[call] = [root for root, body in bodies.items() if call.src in body]
        for root in callers[call]:
            call_graph.add_edge(root, call.dst)

    return [
        call for call in calls
        if any(nx.has_path(call_graph, call.dst, root) for root in callers[call])
    ]


def _cut_graph(cfg: Cfg, annotations: Mapping[BblId, CheckpointKind]) -> nx.DiGraph:
    """Path graph with every checkpoint split into a sink and a source."""
    graph = nx.DiGraph()
    for node in cfg.nodes:
        if node in annotations:
            graph.add_node(("in", node))
            graph.add_node(("out", node))
        else:
            graph.add_node(node)
    for edge in cfg.edges:
        if cfg.is_return_link(edge):
            continue
        src = ("out", edge.src) if edge.src in annotations else edge.src
        dst = ("in", edge.dst) if edge.dst in annotations else edge.dst
        graph.add_edge(src, dst)
    return graph


def _first_back_edge_cycle(graph: nx.DiGraph, roots: Sequence[BblId]) -> Optional[List[Tuple]]:
    """First cycle a DFS from the thread roots closes, starting at the back-edge target."""
    for source in ([("out", root) for root in roots if ("out", root) in graph], None):
        try:
            return nx.find_cycle(graph, source=source)
        except nx.NetworkXNoCycle:
            continue
    return None


def identify_checkpoints(cfg: Cfg) -> Cfg:
    """Complete checkpoint annotations with virtual checkpoints.

    Recursion sites are marked first; afterwards every cycle left without a
    checkpoint gets one at the target of the back edge a depth-first search
    from the thread entries closes it with (the loop header for ordinary
    loops), whatever the document order. Nodes that already carry a kind keep it.

    Args:
        cfg: Validated Cfg with thread and exit-point annotations

    Returns:
        New Cfg whose every cycle contains a checkpoint
    """
    if not any(kind is CheckpointKind.THREAD_BEGIN for _, kind in cfg.checkpoints):
        raise ValidationError("CFG has no thread_begin checkpoint")

    annotations = dict(cfg.checkpoint_map)
    for call in _recursive_calls(cfg):
        if call.src not in annotations:
            logger.debug("Recursion site %s marked virtual", call.src)
            annotations[call.src] = CheckpointKind.VIRTUAL

    while True:
        cycle = _first_back_edge_cycle(_cut_graph(cfg, annotations), cfg.thread_roots)
        if cycle is None:
            break
        header = cycle[0][0]
        logger.debug("Back-edge target %s marked virtual", header)
        annotations[header] = CheckpointKind.VIRTUAL

    return cfg.with_checkpoints(annotations)


# ---------------------------------------------------------------------------
# LoA enumeration
# ---------------------------------------------------------------------------

def enumerate_loas(cfg: Cfg, algorithm: str = "blake2b-256",
                   step_limit: Optional[int] = None) -> Set[Tuple[MeasurementKey, Loa]]:
    """Enumerate every sub-path between consecutive checkpoints.

    Paths stop at the first checkpoint they reach. Inside one sub-path a
    return must match the innermost call made earlier in that sub-path; a
    return with no such call is admitted unless the sub-path started at a
    thread beginning.

    Args:
        cfg: Cfg with checkpoints identified
        algorithm: Hash algorithm for H(LoA)
        step_limit: Optional bound on explored edges

    Returns:
        Set of (MeasurementKey, Loa)

    Raises:
        ValidationError: A cycle without a checkpoint was walked
        EnumerationLimitError: step_limit exceeded
    """
    from .measurement_db import hash_loa

    result: Set[Tuple[MeasurementKey, Loa]] = set()
    steps = 0

    for start in cfg.nodes:
        if not cfg.is_checkpoint(start):
            continue
        known_empty = cfg.kind_of(start) is CheckpointKind.THREAD_BEGIN
        on_path: Set[Edge] = set()
        significant: List[Edge] = []
        calls: List[Edge] = []

        def extend(node: BblId) -> None:
            nonlocal steps
            for edge in cfg.path_edges(node):
                steps += 1
                if step_limit is not None and steps > step_limit:
                    raise EnumerationLimitError(f"enumeration exceeded {step_limit} steps")
                if edge in on_path:
                    raise ValidationError(f"cycle without a checkpoint through {edge}")

                pushed = popped = None
                if edge.kind is EdgeKind.RETURN:
                    if calls:
                        if not cfg.returns_to(edge, calls[-1]):
                            continue
                        popped = calls.pop()
                    elif known_empty:
                        continue
                elif edge.kind is EdgeKind.CALL:
                    pushed = edge
                    calls.append(edge)
                if edge.kind.is_significant:
                    significant.append(edge)

                if cfg.is_checkpoint(edge.dst):
                    loa = Loa(tuple(significant))
                    result.add((MeasurementKey(start, edge.dst, hash_loa(loa, algorithm)), loa))
                else:
                    on_path.add(edge)
                    extend(edge.dst)
                    on_path.discard(edge)

                if edge.kind.is_significant:
                    significant.pop()
                if pushed is not None:
                    calls.pop()
                if popped is not None:
                    calls.append(popped)

        extend(start)

    logger.debug("Enumerated %d LoAs in %d steps", len(result), steps)
    return result


def compute_ret_to(measurements: Iterable[Tuple[MeasurementKey, Loa]], cfg: Cfg) -> Set[RetToRelation]:
    """Pair every return edge seen in a LoA with the calls it may return from.

    Args:
        measurements: Output of enumerate_loas
        cfg: The Cfg the measurements were enumerated from

    Returns:
        Set of RetToRelation

    Raises:
        ValidationError: A return edge has no matching call edge
    """
    returns = sorted(
        {edge for _, loa in measurements for edge in loa if edge.kind is EdgeKind.RETURN},
        key=lambda e: (e.src, e.dst),
    )
    calls = [edge for edge in cfg.edges if edge.kind is EdgeKind.CALL]

    relations: Set[RetToRelation] = set()
    for ret in returns:
        matches = [call for call in calls if cfg.returns_to(ret, call)]
        if not matches:
            raise ValidationError(f"return edge {ret} matches no call edge")
        relations.update(RetToRelation(ret, call) for call in matches)
    return relations
