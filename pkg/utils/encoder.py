"""Graph-to-text encoder with degree-importance neighbour sampling.

Text grammar (one item per line)::

    node: <id>
    type: <node type>
    attributes:
    - <key>: <value>
    n-hop-neighbours: [hop 1]
    - <type> | <id> | <key>: <value>; <key>: <value>

Edges use an ``edge: (x, y)`` header, both endpoints' attributes, then
``y-n-hop-neighbours`` and ``x-n-hop-neighbours`` sections. Connections among
neighbours are never rendered.
"""

import json
from collections.abc import Collection, Iterable
from dataclasses import dataclass
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field

from utils.errors import UnknownNode
from utils.graph_core import DegreeStats, Graph, Node, n_hop_neighbors


class EncoderConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    hops: int = Field(1, ge=1)
    top_k: int = Field(8, ge=0)
    # None renders every attribute in file order
    attribute_keys_target: tuple[str, ...] | None = None
    attribute_keys_neighbor: tuple[str, ...] | None = None
    mask_target_label: bool = True
    neighbor_labels: bool = False
    target_char_budget: int = Field(1200, ge=4)
    neighbor_char_budget: int = Field(300, ge=4)


@dataclass(frozen=True)
class EncodedSample:
    sample_id: str | tuple[str, str]
    kind: str
    text: str
    neighbor_ids_used: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        sid = list(self.sample_id) if isinstance(self.sample_id, tuple) else self.sample_id
        return {
            "sample_id": sid,
            "kind": self.kind,
            "text": self.text,
            "neighbor_ids_used": list(self.neighbor_ids_used),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EncodedSample":
        sid = data["sample_id"]
        return cls(
            sample_id=tuple(sid) if isinstance(sid, list) else sid,
            kind=data["kind"],
            text=data["text"],
            neighbor_ids_used=tuple(data.get("neighbor_ids_used", ())),
        )


# -- Sampling --
def importance(stats: DegreeStats, n: str) -> float:
    """degree(n) / average degree of n's type (0 when that average is 0)."""
    if n not in stats.degree:
        raise UnknownNode(n)
    avg = stats.avg_degree_by_type.get(stats.node_type[n], 0.0)
    if avg == 0:
        return 0.0
    return stats.degree[n] / avg


def sample_neighbors(candidates: Iterable[str], stats: DegreeStats, k: int) -> list[str]:
    """Top-k candidates by importance, ties by ascending id."""
    if k < 0:
        raise ValueError("k must be >= 0")
    scored = sorted((-importance(stats, c), c) for c in set(candidates))
    return [c for _, c in scored[:k]]


# -- Rendering --
def _clip(text: str, budget: int) -> str:
    text = " ".join(text.split())
    if len(text) <= budget:
        return text
    return text[: budget - 3] + "..."


def _selected(node: Node, keys: tuple[str, ...] | None):
    if keys is None:
        return list(node.attributes)
    return [(k, node.attribute(k)) for k in keys if node.attribute(k)]


def _attribute_lines(node: Node, cfg: EncoderConfig) -> list[str]:
    lines = [f"- {k}: {_clip(v, cfg.target_char_budget)}" for k, v in _selected(node, cfg.attribute_keys_target)]
    if not cfg.mask_target_label and node.label:
        lines.append(f"- label: {node.label}")
    return lines


def _neighbor_line(node: Node, cfg: EncoderConfig, show_label: bool) -> str:
    parts = [node.node_type, node.id]
    attrs = "; ".join(
        f"{k}: {_clip(v, cfg.neighbor_char_budget)}" for k, v in _selected(node, cfg.attribute_keys_neighbor)
    )
    if attrs:
        parts.append(attrs)
    if show_label and node.label:
        parts.append(f"label: {node.label}")
    return "- " + " | ".join(parts)


def _neighbor_sections(g, stats, v, cfg, prefix, exclude, visible_labels, masked):
    lines, used = [], []
    by_hop: dict[int, list[str]] = {h: [] for h in range(1, cfg.hops + 1)}
    # cut the counterpart from the walk itself, not only from the output
    for n, hop in n_hop_neighbors(g, v, cfg.hops, avoid=exclude):
        by_hop[hop].append(n)
    for hop in range(1, cfg.hops + 1):
        lines.append(f"{prefix}n-hop-neighbours: [hop {hop}]")
        for n in sample_neighbors(by_hop[hop], stats, cfg.top_k):
            show = cfg.neighbor_labels and n in visible_labels and n not in masked
            lines.append(_neighbor_line(g.nodes[n], cfg, show))
            used.append(n)
    return lines, used


def encode_node(
    g: Graph,
    stats: DegreeStats,
    v: str,
    cfg: EncoderConfig,
    visible_labels: Collection[str] = frozenset(),
) -> EncodedSample:
    """Render a node, its attributes and one sampled neighbour list per hop.

    Neighbour labels are only shown when ``cfg.neighbor_labels`` is set and
    the neighbour is in ``visible_labels``; the target's label never appears
    in a neighbour list.
    """
    node = g.node(v)
    lines = [f"node: {v}", f"type: {node.node_type}", "attributes:"]
    lines += _attribute_lines(node, cfg)
    sections, used = _neighbor_sections(g, stats, v, cfg, "", frozenset(), visible_labels, {v})
    lines += sections
    return EncodedSample(sample_id=v, kind="node", text="\n".join(lines), neighbor_ids_used=tuple(used))


def encode_edge(
    g: Graph,
    stats: DegreeStats,
    x: str,
    y: str,
    cfg: EncoderConfig,
    drop_counterpart: bool = True,
    visible_labels: Collection[str] = frozenset(),
) -> EncodedSample:
    """Render a (possibly non-existent) edge with per-endpoint neighbour lists.

    With ``drop_counterpart`` each endpoint is removed from the other's
    neighbour list, so an existing edge does not reveal itself.
    """
    nx_, ny_ = g.node(x), g.node(y)
    lines = [f"edge: ({x}, {y})", "attributes:"]
    for tag, node in (("x", nx_), ("y", ny_)):
        lines.append(f"{tag}: {node.id} | {node.node_type}")
        lines += _attribute_lines(node, cfg)
    masked = {x, y}
    y_lines, y_used = _neighbor_sections(
        g, stats, y, cfg, "y-", {x} if drop_counterpart else frozenset(), visible_labels, masked
    )
    x_lines, x_used = _neighbor_sections(
        g, stats, x, cfg, "x-", {y} if drop_counterpart else frozenset(), visible_labels, masked
    )
    lines += y_lines + x_lines
    return EncodedSample(
        sample_id=(x, y), kind="edge", text="\n".join(lines), neighbor_ids_used=tuple(y_used + x_used)
    )


def encode_sample(g, stats, sample_id, cfg, visible_labels=frozenset()) -> EncodedSample:
    if isinstance(sample_id, tuple):
        return encode_edge(g, stats, sample_id[0], sample_id[1], cfg, visible_labels=visible_labels)
    return encode_node(g, stats, sample_id, cfg, visible_labels=visible_labels)


def dump_samples(samples: Iterable[EncodedSample], path) -> int:
    """Write encoded samples as JSON-lines; returns the count written."""
    n = 0
    with Path(path).open("w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")
            n += 1
    return n
