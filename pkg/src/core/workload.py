#!/usr/bin/env python3
"""
Workload Generation for ScaRR

Reference CFG documents, a seeded generator of structured random
programs, a stack-aware random walker producing honest traces, and the
synthetic measurement workloads used by the benchmarks.
"""

import logging
import random
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .cfg_model import Cfg, CheckpointKind, Edge, EdgeKind, Loa, MeasurementKey, RetToRelation
from .errors import ConfigError, WalkError
from .measurement_db import DEFAULT_ALGORITHM, MeasurementsDb, build_db, hash_loa, program_digest
from .prover_engine import CheckpointCross, EdgeTraversal, TraceEvent

logger = logging.getLogger(__name__)

CfgDocument = Dict[str, Any]


def _document(nodes: Sequence[Tuple[str, str]], edges: Sequence[Tuple[str, str, str]],
              entry: str, exits: Sequence[str], handlers: Sequence[Tuple[str, str]] = ()) -> CfgDocument:
    return {
        "entry": entry,
        "nodes": [{"id": node, "checkpoint": checkpoint} for node, checkpoint in nodes],
        "edges": [{"src": src, "dst": dst, "kind": kind} for src, dst, kind in edges],
        "exits": list(exits),
        "handlers": [{"trigger": trigger, "entry": node} for trigger, node in handlers],
    }


# ---------------------------------------------------------------------------
# Reference programs
# ---------------------------------------------------------------------------

def six_node_document() -> CfgDocument:
    """Diamond with two exit points between thread begin N1 and thread end N6."""
    return _document(
        nodes=[("N1", "thread_begin"), ("N2", "none"), ("N3", "exit_point"),
               ("N4", "exit_point"), ("N5", "none"), ("N6", "thread_end")],
        edges=[("N1", "N2", "fallthrough"), ("N2", "N3", "branch"), ("N2", "N4", "branch"),
               ("N3", "N5", "fallthrough"), ("N4", "N5", "fallthrough"), ("N5", "N6", "fallthrough")],
        entry="N1", exits=["N6"],
    )


def loop_document() -> CfgDocument:
    """Single loop whose header N1 needs a virtual checkpoint."""
    return _document(
        nodes=[("S_A", "thread_begin"), ("N1", "none"), ("N2", "none"),
               ("N3", "none"), ("S_B", "thread_end")],
        edges=[("S_A", "N1", "fallthrough"), ("N1", "N2", "branch"), ("N2", "N1", "fallthrough"),
               ("N1", "N3", "branch"), ("N3", "S_B", "fallthrough")],
        entry="S_A", exits=["S_B"],
    )


def recursion_document() -> CfgDocument:
    """Self-recursive procedure N1 called from N2."""
    return _document(
        nodes=[("P_B", "thread_begin"), ("N1", "none"), ("N2", "none"),
               ("N3", "none"), ("P_E", "thread_end")],
        edges=[("P_B", "N1", "branch"), ("N1", "N2", "branch"), ("N1", "N3", "branch"),
               ("N2", "N1", "call"), ("N3", "N2", "return"), ("N3", "P_E", "branch")],
        entry="P_B", exits=["P_E"],
    )


def main_a_document() -> CfgDocument:
    """main() calling a() twice; a() holds exit point C."""
    return _document(
        nodes=[("S", "thread_begin"), ("M1", "none"), ("M2", "none"), ("M3", "none"),
               ("M4", "none"), ("A1", "none"), ("C", "exit_point"), ("A2", "none"),
               ("E", "thread_end")],
        edges=[("S", "M1", "fallthrough"), ("M1", "A1", "call"), ("M1", "M2", "fallthrough"),
               ("A1", "C", "fallthrough"), ("C", "A2", "fallthrough"), ("A2", "M2", "return"),
               ("A2", "M4", "return"), ("M2", "M3", "fallthrough"), ("M3", "A1", "call"),
               ("M3", "M4", "fallthrough"), ("M4", "E", "fallthrough")],
        entry="S", exits=["E"],
    )


def main_a_honest_trace(thread_id: int = 0) -> List[TraceEvent]:
    """main() runs a() from M1, then from M3, then exits."""
    steps = [
        ("C", "S"),
        ("E", Edge("S", "M1", EdgeKind.FALLTHROUGH)),
        ("E", Edge("M1", "A1", EdgeKind.CALL)),
        ("E", Edge("A1", "C", EdgeKind.FALLTHROUGH)),
        ("C", "C"),
        ("E", Edge("C", "A2", EdgeKind.FALLTHROUGH)),
        ("E", Edge("A2", "M2", EdgeKind.RETURN)),
        ("E", Edge("M2", "M3", EdgeKind.FALLTHROUGH)),
        ("E", Edge("M3", "A1", EdgeKind.CALL)),
        ("E", Edge("A1", "C", EdgeKind.FALLTHROUGH)),
        ("C", "C"),
        ("E", Edge("C", "A2", EdgeKind.FALLTHROUGH)),
        ("E", Edge("A2", "M4", EdgeKind.RETURN)),
        ("E", Edge("M4", "E", EdgeKind.FALLTHROUGH)),
        ("C", "E"),
    ]
    return [CheckpointCross(thread_id, item) if tag == "C" else EdgeTraversal(thread_id, item)
            for tag, item in steps]


# ---------------------------------------------------------------------------
# Random structured programs
# ---------------------------------------------------------------------------

class _ProgramBuilder:
    """Emits nodes and edges of a structured program into a CFG document."""

    EXIT_POINT_EVERY = 3

    def __init__(self, rng: random.Random, max_nodes: int):
        self.rng = rng
        self.max_nodes = max_nodes
        self.nodes: List[Tuple[str, str]] = []
        self.edges: List[Tuple[str, str, str]] = []
        self.counters: Dict[str, int] = {}
        self.return_sites: Dict[str, List[str]] = {}

    def node(self, prefix: str, checkpoint: str = "none") -> str:
        number = self.counters.get(prefix, 0)
        self.counters[prefix] = number + 1
        label = f"{prefix}_{number}"
        self.nodes.append((label, checkpoint))
        return label

    def edge(self, src: str, dst: str, kind: str) -> None:
        self.edges.append((src, dst, kind))

    def budget_left(self) -> int:
        return self.max_nodes - len(self.nodes)

    def call(self, cur: str, prefix: str, callee_entry: str) -> str:
        site = self.node(prefix)
        ret = self.node(prefix)
        self.edge(cur, site, "fallthrough")
        self.edge(site, callee_entry, "call")
        self.edge(site, ret, "fallthrough")
        self.return_sites.setdefault(callee_entry, []).append(ret)
        return ret

    def body(self, prefix: str, cur: str, callees: Sequence[str], statements: int,
             recursive_entry: Optional[str] = None) -> str:
        """Append a statement sequence after cur and return its last node."""
        since_checkpoint = 0
        for _ in range(statements):
            if self.budget_left() < 12:
                break
            if since_checkpoint >= self.EXIT_POINT_EVERY or self.rng.random() < 0.15:
                point = self.node(prefix, "exit_point")
                self.edge(cur, point, "fallthrough")
                cur = point
                since_checkpoint = 0
                continue

            choices = ["seq", "diamond", "loop"]
            if callees:
                choices += ["call", "call"]
            if recursive_entry is not None:
                choices.append("recurse")
            statement = self.rng.choice(choices)

            if statement == "seq":
                nxt = self.node(prefix)
                self.edge(cur, nxt, "fallthrough")
                cur = nxt
            elif statement == "diamond":
                left, right, join = self.node(prefix), self.node(prefix), self.node(prefix)
                self.edge(cur, left, "branch")
                self.edge(cur, right, "branch")
                self.edge(left, join, "fallthrough")
                self.edge(right, join, "fallthrough")
                cur = join
            elif statement == "loop":
                header, out = self.node(prefix), self.node(prefix)
                self.edge(cur, header, "fallthrough")
                if callees and self.rng.random() < 0.5:
                    guard = self.node(prefix)
                    self.edge(header, guard, "branch")
                    back = self.call(guard, prefix, self.rng.choice(callees))
                    self.edge(back, header, "fallthrough")
                else:
                    inner = self.node(prefix)
                    self.edge(header, inner, "branch")
                    self.edge(inner, header, "fallthrough")
                self.edge(header, out, "branch")
                cur = out
            elif statement == "call":
                cur = self.call(cur, prefix, self.rng.choice(callees))
            else:
                guard, skip, join = self.node(prefix), self.node(prefix), self.node(prefix)
                self.edge(cur, guard, "fallthrough")
                taken = self.node(prefix)
                self.edge(guard, taken, "branch")
                self.edge(guard, skip, "branch")
                back = self.call(taken, prefix, recursive_entry)
                self.edge(back, join, "fallthrough")
                self.edge(skip, join, "fallthrough")
                cur = join
                recursive_entry = None
            since_checkpoint += 1
        return cur

    def prune_unreachable(self, roots: Sequence[str]) -> None:
        """Drop code no thread can run.

        Return edges are not followed: a return site is live only when its
        call site is, so a live callee cannot revive the body of a dead caller.
        """
        successors: Dict[str, List[str]] = {}
        for src, dst, kind in self.edges:
            if kind != "return":
                successors.setdefault(src, []).append(dst)
        seen = set(roots)
        pending = list(roots)
        while pending:
            for nxt in successors.get(pending.pop(), ()):
                if nxt not in seen:
                    seen.add(nxt)
                    pending.append(nxt)
        self.nodes = [(n, c) for n, c in self.nodes if n in seen]
        self.edges = [(s, d, k) for s, d, k in self.edges if s in seen and d in seen]


def random_cfg(seed: int, max_nodes: int = 200) -> CfgDocument:
    """Generate a structured random program as a CFG document.

    Functions only call functions created after them, except one optional
    guarded self-recursive call. Every function body gets an exit point at
    least every few statements, which keeps LoA enumeration small.

    Args:
        seed: Generator seed
        max_nodes: Upper bound on node count (at least 16)

    Returns:
        CFG document accepted by load_cfg
    """
    if max_nodes < 16:
        raise ConfigError(f"max_nodes must be >= 16, got {max_nodes}")
    rng = random.Random(seed)
    builder = _ProgramBuilder(rng, max_nodes - 6)

    entry = builder.node("main", "thread_begin")
    function_count = rng.randint(0, 3)
    entries = [builder.node(f"f{i}") for i in range(function_count)]
    exits = [builder.node(f"f{i}x") for i in range(function_count)]
    recursive = rng.randrange(function_count) if function_count and rng.random() < 0.5 else None

    handler_entry = None
    if rng.random() < 0.3:
        handler_entry = builder.node("sig", "thread_begin")

    end = builder.node("main_end", "thread_end")
    last = builder.body("main", entry, entries, rng.randint(1, 8))
    builder.edge(last, end, "fallthrough")

    for i in range(function_count):
        last = builder.body(f"f{i}b", entries[i], entries[i + 1:], rng.randint(1, 5),
                            entries[i] if i == recursive else None)
        builder.edge(last, exits[i], "fallthrough")

    handlers = []
    if handler_entry is not None:
        handler_end = builder.node("sig_end", "thread_end")
        last = builder.body("sig", handler_entry, entries, rng.randint(1, 4))
        builder.edge(last, handler_end, "fallthrough")
        handlers.append(("signal", handler_entry))

    for i in range(function_count):
        for site in builder.return_sites.get(entries[i], []):
            builder.edge(exits[i], site, "return")

    roots = [entry] + ([handler_entry] if handler_entry else [])
    builder.prune_unreachable(roots)
    return _document(builder.nodes, builder.edges, entry, [end], handlers)


def random_walk(cfg: Cfg, seed: int, max_steps: int = 100000,
                interleave: bool = True) -> List[TraceEvent]:
    """Walk every thread of an annotated Cfg from begin to end.

    Returns are only taken when they match the walker's call stack and a
    thread_end only stops the walk with an empty stack. Thread ids follow
    thread_roots order (entry is 0, handlers 1..n).

    Args:
        cfg: Cfg with checkpoints identified
        seed: Walk seed
        max_steps: Edge limit per thread
        interleave: Randomly interleave the per-thread event streams

    Returns:
        Ordered trace events

    Raises:
        WalkError: Dead end or step limit exceeded
    """
    rng = random.Random(seed)
    streams = [_walk_thread(cfg, root, tid, rng, max_steps)
               for tid, root in enumerate(cfg.thread_roots)]
    if not interleave or len(streams) == 1:
        return [event for stream in streams for event in stream]

    merged: List[TraceEvent] = []
    cursors = [0] * len(streams)
    live = [i for i, s in enumerate(streams) if s]
    while live:
        i = rng.choice(live)
        merged.append(streams[i][cursors[i]])
        cursors[i] += 1
        if cursors[i] == len(streams[i]):
            live.remove(i)
    return merged


def _walk_thread(cfg: Cfg, root: str, thread_id: int, rng: random.Random,
                 max_steps: int) -> List[TraceEvent]:
    events: List[TraceEvent] = [CheckpointCross(thread_id, root)]
    stack: List[Edge] = []
    node = root
    for _ in range(max_steps):
        if cfg.kind_of(node) is CheckpointKind.THREAD_END and not stack:
            return events
        candidates = [
            e for e in cfg.path_edges(node)
            if e.kind is not EdgeKind.RETURN or (stack and cfg.returns_to(e, stack[-1]))
        ]
        if not candidates:
            raise WalkError(f"thread {thread_id} stuck at {node!r} with call depth {len(stack)}")
        edge = rng.choice(candidates)
        events.append(EdgeTraversal(thread_id, edge))
        if edge.kind is EdgeKind.CALL:
            stack.append(edge)
        elif edge.kind is EdgeKind.RETURN:
            stack.pop()
        node = edge.dst
        if cfg.is_checkpoint(node):
            events.append(CheckpointCross(thread_id, node))
    raise WalkError(f"thread {thread_id} exceeded {max_steps} steps")


# ---------------------------------------------------------------------------
# Synthetic benchmark workloads
# ---------------------------------------------------------------------------

START, HUB = "S", "H"
CALL_EDGE = Edge("K", "F", EdgeKind.CALL)
RETURN_EDGE = Edge("Fr", "Kr", EdgeKind.RETURN)


def call_patterns(profile: str) -> List[str]:
    """Call/return patterns for a depth profile.

    "none" has no calls, "recursive" one push or pop per measurement and
    "fixed:<m>" exactly m pushes plus pops per measurement.
    """
    if profile == "none":
        return [""]
    if profile == "recursive":
        return ["C", "R"]
    if profile.startswith("fixed:"):
        try:
            size = int(profile.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad call profile {profile!r}") from None
        if size < 0:
            raise ConfigError(f"bad call profile {profile!r}")
        half = size // 2
        if size == 0:
            return [""]
        if size % 2 == 0:
            return ["CR" * half]
        return ["C" + "RC" * half, "R" + "CR" * half]
    raise ConfigError(f"unknown call profile {profile!r}; use none, recursive or fixed:<m>")


def _depth_delta(pattern: str) -> int:
    return pattern.count("C") - pattern.count("R")


def _min_depth(pattern: str) -> int:
    """Depth needed before the pattern so no return underflows."""
    depth = need = 0
    for step in pattern:
        depth += 1 if step == "C" else -1
        need = max(need, -depth)
    return need


@dataclass
class SyntheticWorkload:
    """Measurement stream over a hub-and-spoke program with a known DB."""
    cfg_size: int
    distinct_triplets: int
    total_measurements: int
    call_depth_profile: str
    seed: int
    db: MeasurementsDb
    events: List[TraceEvent] = field(repr=False)
    measurements: List[MeasurementKey] = field(repr=False)
    subset_sizes: List[int] = field(repr=False)

    def params(self) -> str:
        return (f"cfg_size={self.cfg_size};distinct={self.distinct_triplets};"
                f"total={self.total_measurements};profile={self.call_depth_profile}")


def synthetic_workload(total_measurements: int, distinct_triplets: int = 1000,
                       profile: str = "none", seed: int = 0, max_depth: int = 64,
                       algorithm: str = DEFAULT_ALGORITHM) -> SyntheticWorkload:
    """Build a loop-shaped measurement stream and its matching DB.

    Measurements after the first are hub-to-hub triplets drawn from
    distinct_triplets templates. The stream repeats short cycles of templates,
    each returning to the call depth it started at.

    Args:
        total_measurements: Stream length (>= 1)
        distinct_triplets: Number of hub templates (>= 1)
        profile: Call depth profile, see call_patterns
        seed: Generator seed
        max_depth: Shadow stack bound
        algorithm: Hash algorithm

    Returns:
        SyntheticWorkload
    """
    if total_measurements < 1 or distinct_triplets < 1:
        raise ConfigError("workload needs at least one measurement and one template")
    rng = random.Random(seed)
    patterns = call_patterns(profile)
    if distinct_triplets < len(patterns) or max_depth < 1:
        raise ConfigError(f"profile {profile!r} needs at least {len(patterns)} templates "
                          f"and max_depth >= 1")

    templates = []
    for index in range(distinct_triplets):
        pattern = patterns[index % len(patterns)]
        edges = [Edge(HUB, f"B{index}", EdgeKind.BRANCH)]
        edges += [CALL_EDGE if step == "C" else RETURN_EDGE for step in pattern]
        loa = Loa(tuple(edges))
        key = MeasurementKey(HUB, HUB, hash_loa(loa, algorithm))
        events = tuple(EdgeTraversal(0, e) for e in edges) + (CheckpointCross(0, HUB),)
        templates.append((pattern, loa, key, events))

    start_loa = Loa(())
    start_key = MeasurementKey(START, HUB, hash_loa(start_loa, algorithm))
    measurements = [start_key]
    subset_sizes = [0]
    events: List[TraceEvent] = [CheckpointCross(0, START), CheckpointCross(0, HUB)]

    by_delta: Dict[int, List[int]] = {}
    for index, (pattern, _, _, _) in enumerate(templates):
        by_delta.setdefault(_depth_delta(pattern), []).append(index)

    def fits(index: int, depth: int) -> bool:
        pattern = templates[index][0]
        return depth >= _min_depth(pattern) and 0 <= depth + _depth_delta(pattern) <= max_depth

    # every cycle starts and ends at depth 0
    while len(measurements) < total_measurements:
        cycle: List[int] = []
        depth = 0
        for _ in range(rng.randint(1, 12)):
            sampled = rng.sample(range(distinct_triplets), min(8, distinct_triplets))
            options = [i for i in sampled if fits(i, depth)]
            if options:
                cycle.append(options[0])
                depth += _depth_delta(templates[options[0]][0])
        while depth > 0:
            cycle.append(rng.choice([i for i in by_delta[-1] if fits(i, depth)]))
            depth -= 1
        if not cycle:
            continue

        for _ in range(rng.randint(20, 200)):
            for index in cycle:
                if len(measurements) >= total_measurements:
                    break
                pattern, loa, key, template_events = templates[index]
                measurements.append(key)
                subset_sizes.append(len(pattern))
                events.extend(template_events)

    db = build_db(
        [(start_key, start_loa)] + [(key, loa) for _, loa, key, _ in templates],
        [RetToRelation(RETURN_EDGE, CALL_EDGE)] if any("R" in t[0] for t in templates) else [],
        program_digest(f"synthetic:{profile}:{distinct_triplets}:{seed}".encode(), algorithm),
        algorithm,
        {START: CheckpointKind.THREAD_BEGIN, HUB: CheckpointKind.VIRTUAL},
    )
    workload = SyntheticWorkload(
        cfg_size=distinct_triplets + 6,
        distinct_triplets=distinct_triplets,
        total_measurements=len(measurements),
        call_depth_profile=profile,
        seed=seed,
        db=db,
        events=events,
        measurements=measurements,
        subset_sizes=subset_sizes,
    )
    logger.debug("Synthetic workload %s", workload.params())
    return workload
