"""Heterogeneous property graph: loading, degree statistics, neighbourhoods,
dataset splits and negative edges.

Node file: JSON-lines ``{"id", "type", "attributes": {key: text}, "label"}``.
Edge file: JSON-lines ``{"src", "dst", "type"}``.
"""

import hashlib
import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType

import pandas as pd

from utils.errors import (
    DanglingEdgeEndpoint,
    DuplicateNodeId,
    InsufficientNegativeSpace,
    MalformedRecord,
    RatioSumInvalid,
    UnknownNode,
)

log = logging.getLogger(__name__)

NEGATIVE = "negative"
POSITIVE = "positive"

_MASK64 = (1 << 64) - 1


# -- Domain types --
@dataclass(frozen=True)
class Node:
    id: str
    node_type: str
    attributes: tuple[tuple[str, str], ...] = ()
    label: str | None = None

    def attribute(self, key: str, default: str = "") -> str:
        for k, v in self.attributes:
            if k == key:
                return v
        return default


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    edge_type: str
    label: str | None = None

    @property
    def pair(self) -> tuple[str, str]:
        return (self.src, self.dst)


@dataclass(frozen=True)
class Graph:
    """Immutable graph. Neighbourhood queries use the undirected view."""

    nodes: Mapping[str, Node]
    edges: tuple[Edge, ...]
    adjacency: Mapping[str, tuple[str, ...]]
    _pairs: frozenset = field(default=frozenset(), repr=False)

    def __contains__(self, node_id) -> bool:
        return node_id in self.nodes

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def neighbors(self, node_id: str) -> tuple[str, ...]:
        if node_id not in self.nodes:
            raise UnknownNode(node_id)
        return self.adjacency[node_id]

    def connected(self, x: str, y: str) -> bool:
        """True if any edge of any type joins x and y, in either direction."""
        return _pair_key(x, y) in self._pairs

    def nodes_of_type(self, node_type: str) -> list[str]:
        return sorted(n.id for n in self.nodes.values() if n.node_type == node_type)


@dataclass(frozen=True)
class DegreeStats:
    avg_degree_by_type: dict[str, float]
    degree: dict[str, int]
    node_type: dict[str, str]


@dataclass(frozen=True)
class Split:
    train: list
    validation: list
    test: list
    seed: int


# -- Deterministic randomness --
class SplitMix64:
    """64-bit SplitMix generator; identical streams in any language."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias."""
        if n <= 0:
            raise ValueError("n must be positive")
        threshold = (1 << 64) % n
        while True:
            r = self.next_u64()
            if r >= threshold:
                return r % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, items: Sequence, k: int) -> list:
        """k distinct items in pick order (partial Fisher-Yates)."""
        pool = list(items)
        k = min(k, len(pool))
        for i in range(k):
            j = i + self.randbelow(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


def derive_seed(seed: int, *parts) -> int:
    """Mix a run seed with stable identity parts into a new 64-bit seed."""
    text = json.dumps([seed, *[sample_key(p) if isinstance(p, (str, tuple)) else p for p in parts]])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def sample_key(sample_id) -> tuple:
    """Uniform ordering key for node ids (str) and edge pairs (tuple)."""
    if isinstance(sample_id, str):
        return (sample_id,)
    return tuple(sample_id)


def _pair_key(x: str, y: str) -> tuple[str, str]:
    return (x, y) if x <= y else (y, x)


# -- Loading --
def _reject_duplicate_keys(pairs):
    keys = [k for k, _ in pairs]
    if len(keys) != len(set(keys)):
        raise ValueError("duplicate keys in object")
    return dict(pairs)


def _records(source: Iterable, name: str):
    """Yield (line_no, dict) from JSON lines or already-parsed dicts."""
    for line_no, item in enumerate(source, start=1):
        if isinstance(item, Mapping):
            yield line_no, dict(item)
            continue
        text = item.strip() if isinstance(item, str) else item
        if not text:
            continue
        try:
            rec = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
        except ValueError as e:
            raise MalformedRecord(name, line_no, str(e)) from None
        if not isinstance(rec, dict):
            raise MalformedRecord(name, line_no, "expected a JSON object")
        yield line_no, rec


def _text_field(rec: dict, key: str, name: str, line_no: int) -> str:
    val = rec.get(key)
    if not isinstance(val, str) or not val:
        raise MalformedRecord(name, line_no, f"field {key!r} must be a non-empty string")
    return val


def _parse_node(rec: dict, line_no: int) -> Node:
    node_id = _text_field(rec, "id", "nodes", line_no)
    node_type = _text_field(rec, "type", "nodes", line_no)
    attrs = rec.get("attributes") or {}
    if not isinstance(attrs, dict):
        raise MalformedRecord("nodes", line_no, "'attributes' must be an object")
    label = rec.get("label")
    if label is not None and not isinstance(label, str):
        raise MalformedRecord("nodes", line_no, "'label' must be a string")
    return Node(
        id=node_id,
        node_type=node_type,
        attributes=tuple((str(k), "" if v is None else str(v)) for k, v in attrs.items()),
        label=label or None,
    )


def _build(nodes: dict[str, Node], edges: list[Edge]) -> Graph:
    adj: dict[str, set] = {nid: set() for nid in nodes}
    pairs = set()
    for e in edges:
        adj[e.src].add(e.dst)
        adj[e.dst].add(e.src)
        pairs.add(_pair_key(e.src, e.dst))
    return Graph(
        nodes=MappingProxyType(dict(nodes)),
        edges=tuple(edges),
        adjacency=MappingProxyType({nid: tuple(sorted(nbrs)) for nid, nbrs in adj.items()}),
        _pairs=frozenset(pairs),
    )


def load_graph(node_source: Iterable, edge_source: Iterable) -> Graph:
    """Build a Graph from node and edge record streams (JSON lines or dicts)."""
    nodes: dict[str, Node] = {}
    for line_no, rec in _records(node_source, "nodes"):
        node = _parse_node(rec, line_no)
        if node.id in nodes:
            raise DuplicateNodeId(node.id, line_no)
        nodes[node.id] = node

    edges: list[Edge] = []
    for line_no, rec in _records(edge_source, "edges"):
        src = _text_field(rec, "src", "edges", line_no)
        dst = _text_field(rec, "dst", "edges", line_no)
        edge_type = _text_field(rec, "type", "edges", line_no)
        for endpoint in (src, dst):
            if endpoint not in nodes:
                raise DanglingEdgeEndpoint(src, dst, edge_type, endpoint, line_no)
        edges.append(Edge(src, dst, edge_type))

    g = _build(nodes, edges)
    log.info("loaded graph: %d nodes, %d edges", len(g.nodes), len(g.edges))
    return g


def read_graph(node_path, edge_path) -> Graph:
    with open(node_path, encoding="utf-8") as nf, open(edge_path, encoding="utf-8") as ef:
        return load_graph(nf, ef)


def subset_graph(g: Graph, node_types: Iterable[str]) -> Graph:
    """Keep the given node types and the edges joining two kept nodes."""
    keep = set(node_types)
    nodes = {nid: n for nid, n in g.nodes.items() if n.node_type in keep}
    edges = [e for e in g.edges if e.src in nodes and e.dst in nodes]
    sub = _build(nodes, edges)
    log.info("subset to %s: %d nodes, %d edges", sorted(keep), len(sub.nodes), len(sub.edges))
    return sub


# -- Statistics --
def degree_stats(g: Graph) -> DegreeStats:
    """Degree per node (edge multiplicity counted) and mean degree per type."""
    if not g.nodes:
        return DegreeStats({}, {}, {})
    nodes = pd.DataFrame(
        {"id": list(g.nodes), "type": [n.node_type for n in g.nodes.values()]}
    )
    ends = pd.Series([e.src for e in g.edges] + [e.dst for e in g.edges], dtype=object)
    counts = ends.value_counts()
    nodes["degree"] = nodes["id"].map(counts).fillna(0).astype(int)
    avg = nodes.groupby("type")["degree"].mean()
    return DegreeStats(
        avg_degree_by_type={t: float(v) for t, v in avg.items()},
        degree=dict(zip(nodes["id"], (int(d) for d in nodes["degree"]))),
        node_type=dict(zip(nodes["id"], nodes["type"])),
    )


def graph_summary(g: Graph, stats: DegreeStats | None = None) -> pd.DataFrame:
    """One row per node type: node count and average degree."""
    stats = stats or degree_stats(g)
    if not g.nodes:
        return pd.DataFrame(columns=["node_type", "nodes", "avg_degree"])
    types = pd.Series(stats.node_type).value_counts().sort_index()
    return pd.DataFrame({
        "node_type": types.index,
        "nodes": types.values,
        "avg_degree": [round(stats.avg_degree_by_type[t], 3) for t in types.index],
    })


def edge_type_counts(g: Graph) -> pd.Series:
    return pd.Series([e.edge_type for e in g.edges], dtype=object).value_counts().sort_index()


def n_hop_neighbors(g: Graph, v: str, h: int, avoid: Iterable[str] = ()) -> list[tuple[str, int]]:
    """Breadth-first neighbours of v up to h hops, each at its minimum hop.

    Within a hop nodes are ordered by id. v itself is never reported. Nodes in
    ``avoid`` are neither reported nor walked through.
    """
    if h < 1:
        raise ValueError("hop count must be >= 1")
    if v not in g.nodes:
        raise UnknownNode(v)
    seen = {v, *avoid}
    frontier = [v]
    out: list[tuple[str, int]] = []
    for hop in range(1, h + 1):
        nxt = set()
        for u in frontier:
            for w in g.adjacency[u]:
                if w not in seen:
                    nxt.add(w)
        if not nxt:
            break
        seen.update(nxt)
        frontier = sorted(nxt)
        out.extend((w, hop) for w in frontier)
    return out


# -- Splits and negatives --
def split_dataset(sample_ids: Sequence, ratios: Sequence[float], seed: int) -> Split:
    """Seeded shuffle, then slice; validation and test round down, train keeps the rest."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise RatioSumInvalid(f"ratios must be three positive numbers, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise RatioSumInvalid(f"ratios must sum to 1, got {sum(ratios)!r}")
    ids = sorted(sample_ids, key=sample_key)
    SplitMix64(seed).shuffle(ids)
    n = len(ids)
    n_val = int(n * ratios[1] + 1e-9)
    n_test = int(n * ratios[2] + 1e-9)
    n_train = n - n_val - n_test
    return Split(
        train=ids[:n_train],
        validation=ids[n_train:n_train + n_val],
        test=ids[n_train + n_val:],
        seed=seed,
    )


def save_split(split: Split, path) -> None:
    def enc(ids):
        return [list(i) if isinstance(i, tuple) else i for i in ids]

    payload = {
        "seed": split.seed,
        "train": enc(split.train),
        "validation": enc(split.validation),
        "test": enc(split.test),
    }
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_split(path) -> Split:
    data = json.loads(Path(path).read_text(encoding="utf-8"))

    def dec(ids):
        return [tuple(i) if isinstance(i, list) else i for i in ids]

    return Split(dec(data["train"]), dec(data["validation"]), dec(data["test"]), int(data["seed"]))


def typed_pairs(g: Graph, src_type: str, dst_type: str) -> list[tuple[str, str]]:
    """Distinct (src_type node, dst_type node) pairs joined by at least one edge."""
    pairs = set()
    for e in g.edges:
        a, b = g.nodes[e.src].node_type, g.nodes[e.dst].node_type
        if (a, b) == (src_type, dst_type):
            pairs.add((e.src, e.dst))
        elif (b, a) == (src_type, dst_type):
            pairs.add((e.dst, e.src))
    if src_type == dst_type:
        pairs = {_pair_key(x, y) for x, y in pairs if x != y}
    return sorted(pairs)


def sample_negative_edges(g: Graph, src_type: str, dst_type: str, count: int, seed: int) -> list[Edge]:
    """Uniformly drawn, unconnected, distinct (src_type, dst_type) pairs labeled negative."""
    if count < 0:
        raise ValueError("count must be >= 0")
    sources = g.nodes_of_type(src_type)
    targets = g.nodes_of_type(dst_type)
    same = src_type == dst_type

    def key(s, d):
        return _pair_key(s, d) if same else (s, d)

    target_set = set(targets)
    taken = set()
    for s in sources:
        for d in g.adjacency[s]:
            if d in target_set and not (same and d == s):
                taken.add(key(s, d))
    total = len(sources) * (len(sources) - 1) // 2 if same else len(sources) * len(targets)
    available = total - len(taken)
    if count > available:
        raise InsufficientNegativeSpace(
            f"requested {count} negative {src_type}-{dst_type} pairs, only {available} exist"
        )
    edge_type = f"{src_type}-{dst_type}"
    if count == 0:
        return []
    rng = SplitMix64(seed)

    if 2 * count > available:
        # dense: enumerate the free pairs and shuffle
        free = [
            (s, d) for s in sources for d in targets
            if (not same or s < d) and key(s, d) not in taken
        ]
        rng.shuffle(free)
        picked = free[:count]
    else:
        picked, chosen = [], set()
        while len(picked) < count:
            s = sources[rng.randbelow(len(sources))]
            d = targets[rng.randbelow(len(targets))]
            if same and s == d:
                continue
            k = key(s, d)
            if k in taken or k in chosen:
                continue
            chosen.add(k)
            picked.append(k)
    return [Edge(s, d, edge_type, label=NEGATIVE) for s, d in picked]
