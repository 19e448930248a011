"""System-wide propagation graph construction and path metrics.

Nodes are execution waves, keyed by ``NodeRef(pid, wave)``.  All three
path metrics (process depth, wave depth, width) come out of one walk over
the simple paths that start at the entry node.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Dict, Iterable, Optional, Tuple

import networkx as nx

from .errors import DisconnectedGraph, MissingEntryWave, PathBudgetExceeded
from .trace_model import ExecutionTrace, NodeRef

DEFAULT_PATH_BUDGET = 10_000_000


class EdgeKind(str, Enum):
    INTRA = "IntraProcess"
    CROSS = "CrossProcess"


@dataclass(frozen=True)
class SpgNode:
    ref: NodeRef
    image_name: str = ""

    @property
    def pid(self) -> int:
        return self.ref.pid

    @property
    def wave_index(self) -> int:
        return self.ref.wave


@dataclass(frozen=True, order=True)
class SpgEdge:
    src: NodeRef
    dst: NodeRef

    @property
    def kind(self) -> EdgeKind:
        return EdgeKind.INTRA if self.src.pid == self.dst.pid else EdgeKind.CROSS


@dataclass(frozen=True)
class SpgMetrics:
    process_depth: int
    wave_depth: int
    width: int
    process_count: int
    wave_count: int


def _ref(x) -> NodeRef:
    return x if isinstance(x, NodeRef) else NodeRef(*x)


@dataclass(frozen=True)
class Spg:
    """Immutable graph; ``nodes`` and ``edges`` are kept in sorted order."""

    nodes: Tuple[SpgNode, ...]
    edges: Tuple[SpgEdge, ...]
    entry: NodeRef
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @classmethod
    def create(cls, nodes: Iterable[SpgNode], edges: Iterable[SpgEdge], entry) -> "Spg":
        by_ref = {n.ref: n for n in nodes}
        return cls(tuple(by_ref[r] for r in sorted(by_ref)), tuple(sorted(set(edges))), _ref(entry))

    @classmethod
    def from_edges(cls, edges, entry, nodes=None, names: Optional[Dict[int, str]] = None) -> "Spg":
        """Build directly from (pid, wave) pairs; handy for tests and tools."""
        names = names or {}
        refs = {_ref(entry)}
        es = []
        for a, b in edges:
            a, b = _ref(a), _ref(b)
            refs.update((a, b))
            es.append(SpgEdge(a, b))
        refs.update(_ref(n) for n in nodes or ())
        return cls.create((SpgNode(r, names.get(r.pid, "")) for r in refs), es, entry)

    @cached_property
    def node_map(self) -> Dict[NodeRef, SpgNode]:
        return {n.ref: n for n in self.nodes}

    @cached_property
    def successors(self) -> Dict[NodeRef, Tuple[NodeRef, ...]]:
        succ = defaultdict(list)
        for e in self.edges:
            succ[e.src].append(e.dst)
        return {k: tuple(v) for k, v in succ.items()}

    @property
    def pids(self):
        return sorted({n.pid for n in self.nodes})

    def reachable(self) -> set:
        seen = {self.entry}
        todo = [self.entry]
        while todo:
            for nxt in self.successors.get(todo.pop(), ()):
                if nxt not in seen:
                    seen.add(nxt)
                    todo.append(nxt)
        return seen

    def restricted(self, keep) -> "Spg":
        """Induced subgraph on the node refs in ``keep``."""
        keep = set(keep)
        return Spg.create((n for n in self.nodes if n.ref in keep),
                          (e for e in self.edges if e.src in keep and e.dst in keep), self.entry)


def build_spg(trace: ExecutionTrace) -> Spg:
    entry = NodeRef(trace.initial_pid, 0)
    if entry not in trace.waves:
        raise MissingEntryWave(trace.initial_pid)
    procs = trace.processes
    nodes = [SpgNode(ref, procs[ref.pid].image_name) for ref in trace.waves]
    edges = [SpgEdge(w.predecessor, ref) for ref, w in trace.waves.items() if w.predecessor is not None]
    edges.extend(SpgEdge(t.source, t.target) for _, t in trace.transitions)
    g = Spg.create(nodes, edges, entry)
    _check_connected(g)
    return g


def _check_connected(g: Spg) -> None:
    ug = nx.Graph()
    ug.add_nodes_from(n.ref for n in g.nodes)
    ug.add_edges_from((e.src, e.dst) for e in g.edges)
    comp = nx.node_connected_component(ug, g.entry)
    if len(comp) != len(g.nodes):
        orphans = sorted(n.ref for n in g.nodes if n.ref not in comp)
        raise DisconnectedGraph((o.pid, o.wave) for o in orphans)


def _walk(g: Spg, budget: int) -> Tuple[int, int, int]:
    """Enumerate maximal simple paths from the entry without recursion.

    Returns (process depth, wave depth, width).  A path ends when every
    successor of its last node is already on the path.
    """
    key = ("walk", budget)
    if key in g._cache:
        return g._cache[key]
    succ = g.successors
    on_path = {g.entry}
    pid_count = defaultdict(int)
    pid_count[g.entry.pid] = 1
    distinct = 1
    pd = wd = 1
    width = 0
    expansions = 0
    # frame: [node, next successor index, extended?]
    stack = [[g.entry, 0, False]]
    while stack:
        frame = stack[-1]
        node, i, _ = frame
        children = succ.get(node, ())
        while i < len(children) and children[i] in on_path:
            i += 1
        if i < len(children):
            child = children[i]
            frame[1] = i + 1
            frame[2] = True
            expansions += 1
            if expansions > budget:
                raise PathBudgetExceeded(budget)
            on_path.add(child)
            if pid_count[child.pid] == 0:
                distinct += 1
            pid_count[child.pid] += 1
            stack.append([child, 0, False])
            pd = max(pd, distinct)
            wd = max(wd, len(stack))
            continue
        stack.pop()
        if not frame[2]:
            width += 1
        on_path.discard(node)
        pid_count[node.pid] -= 1
        if pid_count[node.pid] == 0:
            distinct -= 1
    result = (pd, wd, width)
    g._cache[key] = result
    return result


def process_depth(g: Spg, budget: int = DEFAULT_PATH_BUDGET) -> int:
    return _walk(g, budget)[0]


def wave_depth(g: Spg, budget: int = DEFAULT_PATH_BUDGET) -> int:
    return _walk(g, budget)[1]


def spg_width(g: Spg, budget: int = DEFAULT_PATH_BUDGET) -> int:
    return _walk(g, budget)[2]


def metrics(g: Spg, budget: int = DEFAULT_PATH_BUDGET) -> SpgMetrics:
    pd, wd, width = _walk(g, budget)
    return SpgMetrics(pd, wd, width, len({n.pid for n in g.nodes}), len(g.nodes))


# -- DOT export ------------------------------------------------------------

def _dot_quote(s: str) -> str:
    return s.replace("\\", "\\\\").replace('"', '\\"')


def to_dot(g: Spg, name: str = "spg") -> str:
    out = [f"digraph {name} {{"]
    for n in g.nodes:
        label = f"{_dot_quote(n.image_name)}\\n{n.ref.label()}"
        shape = "doublecircle" if n.ref == g.entry else "ellipse"
        out.append(f'  "{n.ref.label()}" [label="{label}", shape={shape}];')
    for e in g.edges:
        style = "solid" if e.kind is EdgeKind.CROSS else "dashed"
        out.append(f'  "{e.src.label()}" -> "{e.dst.label()}" [style={style}];')
    out.append("}")
    return "\n".join(out) + "\n"
