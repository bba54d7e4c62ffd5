import json
import random
from collections import Counter

import pytest

from utils.encoder import EncoderConfig, dump_samples, encode_edge, encode_node, importance, sample_neighbors
from utils.errors import UnknownNode
from utils.graph_core import degree_stats, load_graph, read_graph


# -- Sampling --
def test_importance_is_degree_over_type_average(paper_stats):
    avg = paper_stats.avg_degree_by_type["paper"]
    assert importance(paper_stats, "p5") == pytest.approx(paper_stats.degree["p5"] / avg)


def test_importance_zero_for_isolated_type():
    g = load_graph([{"id": "a", "type": "x"}, {"id": "b", "type": "y"}], [])
    assert importance(degree_stats(g), "a") == 0.0


def test_importance_unknown_node(paper_stats):
    with pytest.raises(UnknownNode):
        importance(paper_stats, "ghost")


def test_sample_neighbors_ties_by_id():
    g = load_graph(
        [{"id": i, "type": "t"} for i in ("a", "b", "c", "hub")],
        [{"src": "hub", "dst": x, "type": "e"} for x in ("a", "b", "c")],
    )
    stats = degree_stats(g)
    assert sample_neighbors(["c", "a", "b", "hub"], stats, 3) == ["hub", "a", "b"]
    assert sample_neighbors(["c", "a"], stats, 0) == []


def _random_graph(rng: random.Random):
    n = rng.randint(1, 200)
    types = ["drug", "gene", "disease"][: rng.randint(1, 3)]
    nodes = [{"id": f"n{i}", "type": rng.choice(types)} for i in range(n)]
    edges = [
        {"src": f"n{rng.randrange(n)}", "dst": f"n{rng.randrange(n)}", "type": "e"}
        for _ in range(rng.randint(0, 3 * n))
    ]
    return nodes, edges


def _oracle(nodes, edges, candidates, k):
    deg = Counter()
    for e in edges:
        deg[e["src"]] += 1
        deg[e["dst"]] += 1
    by_type = {}
    for n in nodes:
        by_type.setdefault(n["type"], []).append(deg[n["id"]])
    avg = {t: sum(d) / len(d) for t, d in by_type.items()}
    ntype = {n["id"]: n["type"] for n in nodes}

    def imp(c):
        a = avg[ntype[c]]
        return deg[c] / a if a else 0.0

    return sorted(set(candidates), key=lambda c: (-imp(c), c))[:k]


@pytest.mark.parametrize("chunk", range(5))
def test_sample_neighbors_matches_full_sort_oracle(chunk):
    rng = random.Random(1000 + chunk)
    for _ in range(100):
        nodes, edges = _random_graph(rng)
        stats = degree_stats(load_graph(nodes, edges))
        ids = [n["id"] for n in nodes]
        candidates = rng.sample(ids, rng.randint(0, len(ids)))
        k = rng.randint(0, 20)
        assert sample_neighbors(candidates, stats, k) == _oracle(nodes, edges, candidates, k)


# -- Nodes --
def test_node_grammar(paper_graph, paper_stats):
    s = encode_node(paper_graph, paper_stats, "p5", EncoderConfig(hops=2))
    lines = s.text.splitlines()
    assert lines[:3] == ["node: p5", "type: paper", "attributes:"]
    assert lines[3].startswith("- title: ")
    assert lines.index("n-hop-neighbours: [hop 1]") < lines.index("n-hop-neighbours: [hop 2]")
    assert "- paper | p4 | title: " in s.text
    assert s.kind == "node"
    assert "p5" not in s.neighbor_ids_used


def test_target_label_masked(paper_graph, paper_stats):
    label = paper_graph.node("p5").label
    masked = encode_node(paper_graph, paper_stats, "p5", EncoderConfig(hops=2))
    assert label not in masked.text
    shown = encode_node(paper_graph, paper_stats, "p5", EncoderConfig(mask_target_label=False))
    assert f"- label: {label}" in shown.text


def test_neighbor_labels_only_for_visible_nodes(paper_graph, paper_stats):
    cfg = EncoderConfig(neighbor_labels=True)
    s = encode_node(paper_graph, paper_stats, "p5", cfg, visible_labels={"p4"})
    assert "| label: Neural_Networks" in s.text
    assert "Theory" not in s.text
    hidden = encode_node(paper_graph, paper_stats, "p5", EncoderConfig(), visible_labels={"p4"})
    assert "label:" not in hidden.text


def test_attribute_key_selection(paper_graph, paper_stats):
    cfg = EncoderConfig(attribute_keys_target=("title",), attribute_keys_neighbor=("title",))
    s = encode_node(paper_graph, paper_stats, "p5", cfg)
    assert "authors" not in s.text


def test_top_k_caps_each_hop(paper_graph, paper_stats):
    s = encode_node(paper_graph, paper_stats, "p5", EncoderConfig(hops=2, top_k=1))
    assert len(s.neighbor_ids_used) == 2
    assert sum(line.startswith("- paper |") for line in s.text.splitlines()) == 2


def test_long_attributes_are_clipped():
    g = load_graph([{"id": "a", "type": "doc", "attributes": {"abstract": "word " * 500}}], [])
    s = encode_node(g, degree_stats(g), "a", EncoderConfig(target_char_budget=50))
    line = next(x for x in s.text.splitlines() if x.startswith("- abstract: "))
    assert len(line) == len("- abstract: ") + 50
    assert line.endswith("...")


# -- Edges --
def test_edge_grammar_and_counterpart_removal(synthetic_graph, synthetic_stats):
    x, y = next(e.pair for e in synthetic_graph.edges if e.edge_type == "targets")
    s = encode_edge(synthetic_graph, synthetic_stats, x, y, EncoderConfig(top_k=50))
    lines = s.text.splitlines()
    assert lines[0] == f"edge: ({x}, {y})"
    assert lines[1] == "attributes:"
    assert f"x: {x} | drug" in lines and f"y: {y} | gene" in lines
    assert lines.index("y-n-hop-neighbours: [hop 1]") < lines.index("x-n-hop-neighbours: [hop 1]")
    assert f"| {y} |" not in s.text
    assert f"| {x} |" not in s.text
    assert s.sample_id == (x, y)

    kept = encode_edge(synthetic_graph, synthetic_stats, x, y, EncoderConfig(top_k=50), drop_counterpart=False)
    assert f"| {y} |" in kept.text


def test_counterpart_is_not_walked_through_at_two_hops():
    nodes = [{"id": "d1", "type": "drug"}, {"id": "g1", "type": "gene"}, {"id": "z9", "type": "disease"}]
    linked = load_graph(nodes, [
        {"src": "d1", "dst": "g1", "type": "targets"},
        {"src": "g1", "dst": "z9", "type": "associates"},
    ])
    unlinked = load_graph(nodes, [{"src": "g1", "dst": "z9", "type": "associates"}])
    cfg = EncoderConfig(hops=2)
    pos = encode_edge(linked, degree_stats(linked), "d1", "g1", cfg)
    neg = encode_edge(unlinked, degree_stats(unlinked), "d1", "g1", cfg)
    assert pos.text == neg.text
    x_part = pos.text.split("x-n-hop-neighbours: [hop 1]")[1]
    assert "z9" not in x_part


def test_encoding_is_pure(datasets, paper_graph, paper_stats, synthetic_graph, synthetic_stats):
    cfg = EncoderConfig(hops=2, top_k=3)
    for nid in ("p0", "p5", "p11"):
        assert encode_node(paper_graph, paper_stats, nid, cfg) == encode_node(paper_graph, paper_stats, nid, cfg)
    fresh = read_graph(*datasets["link"])
    fresh_stats = degree_stats(fresh)
    for e in synthetic_graph.edges[:20]:
        a = encode_edge(synthetic_graph, synthetic_stats, *e.pair, cfg)
        b = encode_edge(fresh, fresh_stats, *e.pair, cfg)
        assert a.text.encode("utf-8") == b.text.encode("utf-8")
        assert a.neighbor_ids_used == b.neighbor_ids_used


def test_dump_samples(tmp_path, paper_graph, paper_stats):
    samples = [encode_node(paper_graph, paper_stats, f"p{i}", EncoderConfig()) for i in range(3)]
    assert dump_samples(samples, tmp_path / "enc.jsonl") == 3
    rows = [json.loads(line) for line in (tmp_path / "enc.jsonl").read_text().splitlines()]
    assert [r["sample_id"] for r in rows] == ["p0", "p1", "p2"]
