"""Long-term memory: embedded training samples with exact cosine retrieval.

On disk a store is two files in one directory: ``vectors.f32`` (row-major
little-endian float32) and ``records.json`` (ids, labels, texts, dim,
provenance).
"""

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import openai
from openai import OpenAI

from utils.encoder import EncodedSample
from utils.errors import (
    AuthFailure,
    CacheMiss,
    DataError,
    DimensionMismatch,
    DuplicateSampleId,
    EmbeddingProviderError,
    InconsistentDim,
    MalformedRecord,
    MissingNodeVector,
    StoreNotFound,
    ZeroVector,
)
from utils.graph_core import sample_key
from utils.llm_gateway import ReplayCache
from utils.retry import api_retry

log = logging.getLogger(__name__)

VECTORS_FILE = "vectors.f32"
RECORDS_FILE = "records.json"

PROVENANCES = ("lm", "gnn")


def as_vector(values) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float32).reshape(-1)
    if vec.size == 0:
        raise DimensionMismatch("empty vector")
    if not np.all(np.isfinite(vec)):
        raise DataError("vector contains non-finite values")
    return vec


def cosine_similarity(a, b) -> float:
    """dot(a, b) / (|a| |b|), clipped to [-1, 1]."""
    a64 = np.asarray(a, dtype=np.float64).reshape(-1)
    b64 = np.asarray(b, dtype=np.float64).reshape(-1)
    if a64.shape != b64.shape:
        raise DimensionMismatch(f"dimension {a64.size} != {b64.size}")
    na, nb = float(np.linalg.norm(a64)), float(np.linalg.norm(b64))
    if na == 0 or nb == 0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(a64, b64) / (na * nb), -1.0, 1.0))


# -- Store --
@dataclass(frozen=True, eq=False)
class MemoryRecord:
    sample_id: str | tuple[str, str]
    kind: str
    vector: np.ndarray
    label: str
    encoded_text: str


@dataclass(frozen=True)
class RetrievalResult:
    hits: list[tuple[MemoryRecord, float]]
    short: bool  # fewer than k records passed the filter


class MemoryStore:
    """Immutable set of records sharing one dimension, with cached norms."""

    def __init__(self, records: Sequence[MemoryRecord], dim: int, provenance: str = "lm"):
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}")
        seen = set()
        for r in records:
            if r.vector.shape != (dim,):
                raise DimensionMismatch(f"record {r.sample_id!r} has dim {r.vector.size}, store dim is {dim}")
            if not r.label:
                raise DataError(f"record {r.sample_id!r} has an empty label")
            if r.sample_id in seen:
                raise DuplicateSampleId(f"duplicate sample id {r.sample_id!r}")
            seen.add(r.sample_id)
        self.records = tuple(records)
        self.dim = dim
        self.provenance = provenance
        matrix = np.stack([r.vector for r in records]).astype(np.float32) if records else np.zeros((0, dim), np.float32)
        matrix.flags.writeable = False
        self.matrix = matrix
        self._matrix64 = matrix.astype(np.float64)
        self._norms = np.linalg.norm(self._matrix64, axis=1)
        if np.any(self._norms == 0):
            raise ZeroVector("store contains a zero vector")
        order = sorted(range(len(records)), key=lambda i: sample_key(records[i].sample_id))
        self._key_rank = np.empty(len(records), dtype=np.int64)
        self._key_rank[order] = np.arange(len(records))
        self._index = {r.sample_id: i for i, r in enumerate(self.records)}

    def __len__(self) -> int:
        return len(self.records)

    def get(self, sample_id) -> MemoryRecord | None:
        i = self._index.get(sample_id)
        return None if i is None else self.records[i]

    def scores(self, query) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        if q.size != self.dim:
            raise DimensionMismatch(f"query dim {q.size} != store dim {self.dim}")
        qn = float(np.linalg.norm(q))
        if qn == 0:
            raise ZeroVector("query vector is zero")
        return np.clip((self._matrix64 @ q) / (self._norms * qn), -1.0, 1.0)


def retrieve_similar(
    store: MemoryStore,
    query,
    k: int,
    filter: Callable[[MemoryRecord], bool] | None = None,
) -> RetrievalResult:
    """Exact top-k by cosine similarity, descending, ties by ascending sample id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    sims = store.scores(query)
    idx = np.arange(len(store))
    if filter is not None:
        idx = np.array([i for i in idx if filter(store.records[i])], dtype=np.int64)
    if idx.size == 0:
        return RetrievalResult([], short=True)
    order = idx[np.lexsort((store._key_rank[idx], -sims[idx]))][:k]
    hits = [(store.records[i], float(sims[i])) for i in order]
    return RetrievalResult(hits, short=len(hits) < k)


# -- Embedding providers --
class TextEmbedder:
    """Base for providers that embed the encoded text of a sample."""

    provenance = "lm"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        raise NotImplementedError

    def embed_samples(self, samples: Sequence[EncodedSample]) -> np.ndarray:
        return self.embed([s.text for s in samples])


class OpenAIEmbedder(TextEmbedder):
    """Remote embeddings over the OpenAI-compatible JSON/HTTP API."""

    def __init__(self, model="text-embedding-ada-002", base_url=None, api_key_env="GRAPH_AGENT_EMBED_API_KEY",
                 client_factory=OpenAI, timeout=60.0):
        self.model = model
        self.base_url = base_url
        self.api_key_env = api_key_env
        self._client_factory = client_factory
        self._timeout = timeout
        self._client = None

    def _get_client(self):
        if self._client is None:
            key = os.environ.get(self.api_key_env) or os.environ.get("OPENAI_API_KEY")
            if not key:
                raise AuthFailure(f"embedding API key not set (environment variable {self.api_key_env})")
            self._client = self._client_factory(api_key=key, base_url=self.base_url, timeout=self._timeout)
        return self._client

    def embed(self, texts):
        client = self._get_client()
        try:
            resp = client.embeddings.create(model=self.model, input=list(texts))
        except openai.AuthenticationError as e:
            raise AuthFailure(str(e)) from e
        except openai.APIError as e:
            raise EmbeddingProviderError(str(e)) from e
        data = sorted(resp.data, key=lambda d: d.index)
        return np.asarray([d.embedding for d in data], dtype=np.float32)


class HashingEmbedder(TextEmbedder):
    """Offline deterministic embedder: signed token hashing plus a bias slot."""

    def __init__(self, dim: int = 256):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim

    def _embed_one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float32)
        vec[0] = 1.0
        for token in re.findall(r"\w+", text.lower()):
            h = hashlib.sha256(token.encode("utf-8")).digest()
            slot = 1 + int.from_bytes(h[:4], "little") % (self.dim - 1)
            vec[slot] += 1.0 if h[4] & 1 else -1.0
        return vec

    def embed(self, texts):
        return np.stack([self._embed_one(t) for t in texts]) if texts else np.zeros((0, self.dim), np.float32)


class CachedEmbedder(TextEmbedder):
    """Wrap a lazily built text embedder with a ReplayCache keyed by (model, text).

    In replay mode the inner embedder is never constructed and a text that was
    not recorded raises CacheMiss.
    """

    def __init__(self, cache: ReplayCache, embedder_factory: Callable[[], TextEmbedder], model: str = ""):
        self.cache = cache
        self.model = model
        self._factory = embedder_factory
        self._inner = None
        self._lock = threading.Lock()

    def _embedder(self) -> TextEmbedder:
        with self._lock:
            if self._inner is None:
                self._inner = self._factory()
            return self._inner

    def _key(self, text: str) -> str:
        blob = json.dumps({"kind": "embedding", "model": self.model, "text": text}, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def embed(self, texts):
        texts = list(texts)
        keys = [self._key(t) for t in texts]
        found: dict[int, np.ndarray] = {}
        if self.cache.mode != "passthrough":
            for i, key in enumerate(keys):
                entry = self.cache.load(key)
                if entry is not None:
                    found[i] = np.asarray(entry["vector"], dtype=np.float32)
        todo = [i for i in range(len(texts)) if i not in found]
        if todo and self.cache.mode == "replay":
            raise CacheMiss(f"no recorded embedding for {len(todo)} of {len(texts)} texts (replay mode)")
        if todo:
            fresh = self._embedder().embed([texts[i] for i in todo])
            for i, vec in zip(todo, fresh):
                found[i] = np.asarray(vec, dtype=np.float32)
                if self.cache.mode == "record":
                    self.cache.save(keys[i], {"model": self.model, "text": texts[i], "vector": found[i].tolist()})
        if not texts:
            return np.zeros((0, 0), np.float32)
        return np.stack([found[i] for i in range(len(texts))])


class NodeVectorTable:
    """Externally trained GNN node vectors; edge vectors concatenate [src || dst]."""

    provenance = "gnn"

    def __init__(self, vectors: Mapping[str, np.ndarray]):
        dims = {v.size for v in vectors.values()}
        if len(dims) > 1:
            raise InconsistentDim(f"node vectors have mixed dimensions {sorted(dims)}")
        self.vectors = dict(vectors)
        self.node_dim = dims.pop() if dims else 0

    @classmethod
    def from_records(cls, source: Iterable) -> "NodeVectorTable":
        vectors: dict[str, np.ndarray] = {}
        for line_no, item in enumerate(source, start=1):
            if isinstance(item, str):
                if not item.strip():
                    continue
                try:
                    item = json.loads(item)
                except ValueError as e:
                    raise MalformedRecord("vectors", line_no, str(e)) from None
            if not isinstance(item, dict) or not isinstance(item.get("id"), str) or "vector" not in item:
                raise MalformedRecord("vectors", line_no, "expected {\"id\", \"vector\"}")
            vec = as_vector(item["vector"])
            if vectors and vec.size != next(iter(vectors.values())).size:
                raise InconsistentDim(f"line {line_no}: vector for {item['id']!r} has dim {vec.size}")
            vectors[item["id"]] = vec
        return cls(vectors)

    @classmethod
    def read(cls, path) -> "NodeVectorTable":
        with open(path, encoding="utf-8") as f:
            return cls.from_records(f)

    def vector_for(self, sample_id) -> np.ndarray:
        ids = list(sample_id) if isinstance(sample_id, tuple) else [sample_id]
        missing = [i for i in ids if i not in self.vectors]
        if missing:
            raise MissingNodeVector(f"no GNN vector for node(s) {missing}")
        return np.concatenate([self.vectors[i] for i in ids]).astype(np.float32)

    def embed_samples(self, samples):
        return np.stack([self.vector_for(s.sample_id) for s in samples])


# -- Building --
def _batches(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def memorize(
    samples: Sequence[EncodedSample],
    labels: Mapping,
    embedder,
    concurrency: int = 8,
    batch_size: int = 16,
    max_retries: int = 3,
    persist_dir=None,
    sleep=time.sleep,
) -> MemoryStore:
    """Embed every sample and build a store, one record per sample.

    At most ``concurrency`` provider calls are in flight; records keep input
    order. Any provider failure after retries aborts without a partial store.
    """
    if not samples:
        raise DataError("nothing to memorize")
    seen = set()
    for s in samples:
        if s.sample_id in seen:
            raise DuplicateSampleId(f"duplicate sample id {s.sample_id!r}")
        seen.add(s.sample_id)
        if not labels.get(s.sample_id):
            raise DataError(f"no label for sample {s.sample_id!r}")

    def embed_batch(batch):
        vecs = api_retry(
            embedder.embed_samples, batch,
            retry_on=(EmbeddingProviderError,), max_retries=max_retries, sleep=sleep,
        )
        if len(vecs) != len(batch):
            raise EmbeddingProviderError(f"provider returned {len(vecs)} vectors for {len(batch)} inputs")
        return vecs

    batches = list(_batches(list(samples), batch_size))
    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        results = list(pool.map(embed_batch, batches))

    vectors = np.concatenate(results).astype(np.float32)
    records = [
        MemoryRecord(s.sample_id, s.kind, as_vector(vectors[i]), labels[s.sample_id], s.text)
        for i, s in enumerate(samples)
    ]
    store = MemoryStore(records, vectors.shape[1], getattr(embedder, "provenance", "lm"))
    log.info("memorized %d samples (dim %d, %s)", len(store), store.dim, store.provenance)
    if persist_dir is not None:
        save_store(store, persist_dir)
    return store


def import_gnn_embeddings(node_vectors: Iterable, labels: Mapping, texts: Mapping | None = None) -> MemoryStore:
    """Store imported GNN vectors for the labeled samples in ``labels``.

    Node ids map straight to their vector; (src, dst) pairs get the
    concatenation of both endpoint vectors.
    """
    table = node_vectors if isinstance(node_vectors, NodeVectorTable) else NodeVectorTable.from_records(node_vectors)
    texts = texts or {}
    records = []
    for sid, label in labels.items():
        kind = "edge" if isinstance(sid, tuple) else "node"
        records.append(MemoryRecord(sid, kind, table.vector_for(sid), label, texts.get(sid, "")))
    dim = records[0].vector.size if records else table.node_dim
    return MemoryStore(records, dim, "gnn")


# -- Persistence --
def save_store(store: MemoryStore, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / VECTORS_FILE).write_bytes(store.matrix.astype("<f4").tobytes())
    meta = {
        "dim": store.dim,
        "provenance": store.provenance,
        "count": len(store),
        "records": [
            {
                "sample_id": list(r.sample_id) if isinstance(r.sample_id, tuple) else r.sample_id,
                "kind": r.kind,
                "label": r.label,
                "encoded_text": r.encoded_text,
            }
            for r in store.records
        ],
    }
    (out / RECORDS_FILE).write_text(json.dumps(meta, ensure_ascii=False, sort_keys=True), encoding="utf-8")
    return out


def load_store(directory) -> MemoryStore:
    src = Path(directory)
    if not (src / VECTORS_FILE).exists() or not (src / RECORDS_FILE).exists():
        raise StoreNotFound(f"no memory store in {src}; run `memorize` first")
    meta = json.loads((src / RECORDS_FILE).read_text(encoding="utf-8"))
    dim, count = int(meta["dim"]), int(meta["count"])
    matrix = np.frombuffer((src / VECTORS_FILE).read_bytes(), dtype="<f4").astype(np.float32)
    if matrix.size != dim * count:
        raise DataError(f"{src / VECTORS_FILE} holds {matrix.size} floats, expected {dim * count}")
    matrix = matrix.reshape(count, dim)
    records = []
    for i, r in enumerate(meta["records"]):
        sid = tuple(r["sample_id"]) if isinstance(r["sample_id"], list) else r["sample_id"]
        records.append(MemoryRecord(sid, r["kind"], matrix[i].copy(), r["label"], r["encoded_text"]))
    return MemoryStore(records, dim, meta["provenance"])


def store_digest(directory) -> str:
    h = hashlib.sha256()
    for name in (VECTORS_FILE, RECORDS_FILE):
        h.update((Path(directory) / name).read_bytes())
    return h.hexdigest()
