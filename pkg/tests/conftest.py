import json
import random
from pathlib import Path

import numpy as np
import pytest

from utils.config import parse_config
from utils.graph_core import degree_stats, load_graph
from utils.memory import HashingEmbedder

VOCAB = [
    "kinase", "receptor", "membrane", "signal", "enzyme", "channel",
    "binding", "transport", "metabolic", "immune", "cardiac", "hepatic",
]

PAPER_LABELS = ("Genetic_Algorithms", "Neural_Networks", "Theory")
PAPER_WORDS = {
    "Neural_Networks": ["backprop", "layers", "activation", "gradient"],
    "Theory": ["bounds", "proofs", "complexity", "lemma"],
    "Genetic_Algorithms": ["mutation", "crossover", "fitness", "population"],
}


def write_jsonl(path: Path, records) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


# -- Synthetic heterogeneous fixture: 15 drugs, 25 genes, 20 diseases; 150 edges --
def synthetic_records(seed: int = 7):
    rng = random.Random(seed)
    nodes = []
    ids = {}
    for kind, count in (("drug", 15), ("gene", 25), ("disease", 20)):
        ids[kind] = [f"{kind[:2]}{i}" for i in range(count)]
        for nid in ids[kind]:
            nodes.append({
                "id": nid,
                "type": kind,
                "attributes": {"name": f"{kind} {nid}", "summary": " ".join(rng.sample(VOCAB, 3))},
            })

    def pick(a, b, count, etype, same=False):
        chosen = set()
        while len(chosen) < count:
            x, y = rng.choice(ids[a]), rng.choice(ids[b])
            if same and (x == y or (y, x) in chosen):
                continue
            chosen.add((x, y))
        return [{"src": x, "dst": y, "type": etype} for x, y in sorted(chosen)]

    edges = (
        pick("drug", "gene", 50, "targets")
        + pick("gene", "disease", 60, "associated_with")
        + pick("gene", "gene", 40, "interacts", same=True)
    )
    return nodes, edges


# -- 20 labeled papers with citations --
def paper_records():
    nodes = []
    for i in range(20):
        label = PAPER_LABELS[i % 3]
        words = PAPER_WORDS[label]
        nodes.append({
            "id": f"p{i}",
            "type": "paper",
            "attributes": {
                "title": f"{words[i % 4]} {words[(i + 1) % 4]} study {i}",
                "authors": f"author{i % 5}, author{(i + 2) % 7}",
            },
            "label": label,
        })
    edges = [{"src": f"p{i}", "dst": f"p{i - 1}", "type": "cites"} for i in range(1, 20)]
    edges += [{"src": f"p{i}", "dst": f"p{i - 3}", "type": "cites"} for i in range(3, 20, 2)]
    return nodes, edges


@pytest.fixture
def synthetic_graph():
    nodes, edges = synthetic_records()
    return load_graph(nodes, edges)


@pytest.fixture
def paper_graph():
    nodes, edges = paper_records()
    return load_graph(nodes, edges)


@pytest.fixture
def synthetic_stats(synthetic_graph):
    return degree_stats(synthetic_graph)


@pytest.fixture
def paper_stats(paper_graph):
    return degree_stats(paper_graph)


@pytest.fixture
def embedder():
    return HashingEmbedder(64)


@pytest.fixture
def datasets(tmp_path):
    """Both fixtures written as JSON-lines files."""
    data = tmp_path / "data"
    s_nodes, s_edges = synthetic_records()
    p_nodes, p_edges = paper_records()
    return {
        "link": (write_jsonl(data / "kg_nodes.jsonl", s_nodes), write_jsonl(data / "kg_edges.jsonl", s_edges)),
        "node": (write_jsonl(data / "paper_nodes.jsonl", p_nodes), write_jsonl(data / "paper_edges.jsonl", p_edges)),
    }


def config_data(datasets, out_dir: Path, task: str = "link-prediction") -> dict:
    """Offline run config: hashing embeddings and the majority-label mock."""
    nodes, edges = datasets["link" if task == "link-prediction" else "node"]
    dataset = {"nodes": str(nodes), "edges": str(edges), "task": task}
    if task == "link-prediction":
        dataset.update(src_type="drug", dst_type="gene")
    else:
        dataset.update(target_type="paper")
    return {
        "dataset": dataset,
        "memory": {"provider": "hashing", "dim": 64, "concurrency": 2, "batch_size": 8},
        "backend": {"provider": "majority-mock"},
        "run": {"seed": 13, "workers": 4, "output_dir": str(out_dir)},
    }


@pytest.fixture
def make_config(datasets, tmp_path):
    def _make(task="link-prediction", out="run", **sections):
        data = config_data(datasets, tmp_path / out, task)
        for name, values in sections.items():
            data.setdefault(name, {}).update(values)
        return parse_config(data)

    return _make


@pytest.fixture
def gnn_vectors(tmp_path):
    """Integer 4-d vectors for every synthetic and paper node."""
    rng = np.random.default_rng(5)
    s_nodes, _ = synthetic_records()
    p_nodes, _ = paper_records()
    records = [
        {"id": n["id"], "vector": [int(v) for v in rng.integers(1, 6, size=4)]} for n in s_nodes + p_nodes
    ]
    return write_jsonl(tmp_path / "data" / "node_vectors.jsonl", records)
