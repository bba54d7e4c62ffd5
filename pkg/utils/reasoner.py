"""Example selection, inductive/deductive prompting and answer parsing.

Also hosts the two prompt-only baselines (simple ask, k-shot COT) so that all
three methods share one prompt layout and one parser.
"""

import hashlib
import json
import logging
import re
import threading
import time
from collections.abc import Collection, Iterable
from dataclasses import dataclass, field, replace

from pydantic import BaseModel, ConfigDict, Field

from utils.encoder import EncodedSample, EncoderConfig, encode_sample
from utils.errors import (
    ContextOverflow,
    EmbeddingProviderError,
    GraphAgentError,
    UnparseableResponse,
    UsageError,
)
from utils.graph_core import NEGATIVE, POSITIVE, DegreeStats, Graph, SplitMix64, derive_seed, sample_key
from utils.llm_gateway import ChatSettings, complete
from utils.memory import MemoryStore, retrieve_similar
from utils.prompts import render
from utils.retry import api_retry

log = logging.getLogger(__name__)

NODE_TASK = "node-classification"
LINK_TASK = "link-prediction"
TASK_KINDS = (NODE_TASK, LINK_TASK)

METHODS = ("graph-agent", "simple-ask", "kshot-cot")
TRACE_SCHEMA_VERSION = 1


class ExamplePolicy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    node_k: int = Field(5, ge=1)
    positives: int = Field(3, ge=0)
    negatives: int = Field(2, ge=0)
    exclude_shared_endpoints: bool = True


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    options: tuple[str, ...] = ()
    example_policy: ExamplePolicy = field(default_factory=ExamplePolicy)
    encoder_cfg: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise UsageError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.kind == NODE_TASK and len(self.options) < 2:
            raise UsageError("node classification needs at least two options")

    @property
    def is_link(self) -> bool:
        return self.kind == LINK_TASK


@dataclass(frozen=True)
class Example:
    sample: EncodedSample
    label: str
    similarity: float | None = None


@dataclass(frozen=True)
class ExampleSet:
    examples: tuple[Example, ...] = ()
    positives: int = 0
    negatives: int = 0
    short: bool = False

    def identity(self) -> str:
        key = [[list(sample_key(e.sample.sample_id)), e.label] for e in self.examples]
        return hashlib.sha256(json.dumps(key).encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {
            "examples": [
                {**e.sample.to_dict(), "label": e.label, "similarity": e.similarity} for e in self.examples
            ],
            "positives": self.positives,
            "negatives": self.negatives,
            "short": self.short,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExampleSet":
        examples = tuple(
            Example(EncodedSample.from_dict(e), e["label"], e.get("similarity")) for e in data.get("examples", [])
        )
        return cls(examples, data.get("positives", 0), data.get("negatives", 0), data.get("short", False))


def display_label(label: str, spec: TaskSpec) -> str:
    if spec.is_link:
        return "TRUE" if label == POSITIVE else "FALSE"
    return label


# -- Example selection --
def _example(record, sim=None) -> Example:
    return Example(EncodedSample(record.sample_id, record.kind, record.encoded_text), record.label, sim)


def select_examples(store: MemoryStore, target: EncodedSample, query_vec, spec: TaskSpec, seed: int) -> ExampleSet:
    """Retrieve in-context examples for one target.

    Node tasks take the k most similar records. Link tasks take the most
    similar positive edges plus seeded random negative edges, skipping any
    edge that touches an endpoint of the target.
    """
    policy = spec.example_policy
    if not spec.is_link:
        res = retrieve_similar(store, query_vec, policy.node_k, lambda r: r.sample_id != target.sample_id)
        ex = ExampleSet(tuple(_example(r, s) for r, s in res.hits), short=res.short)
    else:
        endpoints = set(target.sample_id)

        def allowed(r):
            if r.sample_id == target.sample_id:
                return False
            return not (policy.exclude_shared_endpoints and endpoints & set(r.sample_id))

        pos = []
        if policy.positives:
            res = retrieve_similar(store, query_vec, policy.positives, lambda r: r.label == POSITIVE and allowed(r))
            pos = [_example(r, s) for r, s in res.hits]
        pool = sorted(
            (r for r in store.records if r.label == NEGATIVE and allowed(r)), key=lambda r: sample_key(r.sample_id)
        )
        rng = SplitMix64(derive_seed(seed, target.sample_id))
        neg = [_example(r) for r in rng.sample(pool, policy.negatives)]
        short = len(pos) < policy.positives or len(neg) < policy.negatives
        ex = ExampleSet(tuple(pos + neg), len(pos), len(neg), short)
    if ex.short:
        log.warning("short example set for %r: %d examples", target.sample_id, len(ex.examples))
    return ex


def choose_fixed_examples(store: MemoryStore, spec: TaskSpec, seed: int, avoid: Iterable[str] = ()) -> ExampleSet:
    """The single seeded example set the k-shot COT baseline uses for a whole run.

    For link tasks, edges touching a node in ``avoid`` (the endpoints of every
    target in the run) are never picked.
    """
    policy = spec.example_policy
    records = sorted(store.records, key=lambda r: sample_key(r.sample_id))
    if spec.is_link and policy.exclude_shared_endpoints:
        avoid = set(avoid)
        records = [r for r in records if not avoid & set(r.sample_id)]
    if not spec.is_link:
        picked = SplitMix64(seed).sample(records, policy.node_k)
        return ExampleSet(tuple(_example(r) for r in picked), short=len(picked) < policy.node_k)
    pos = SplitMix64(derive_seed(seed, POSITIVE)).sample([r for r in records if r.label == POSITIVE], policy.positives)
    neg = SplitMix64(derive_seed(seed, NEGATIVE)).sample([r for r in records if r.label == NEGATIVE], policy.negatives)
    short = len(pos) < policy.positives or len(neg) < policy.negatives
    if short:
        log.warning("short fixed example set: %d positive, %d negative", len(pos), len(neg))
    return ExampleSet(tuple(_example(r) for r in pos + neg), len(pos), len(neg), short)


# -- Prompts --
def _examples_block(ex: ExampleSet, spec: TaskSpec) -> str:
    blocks = []
    for i, e in enumerate(ex.examples, start=1):
        blocks.append(f"Example {i}:\n{e.sample.text}\nlabel: {display_label(e.label, spec)}")
    return "\n\n".join(blocks)


def _question(target: EncodedSample, spec: TaskSpec, variant: str) -> str:
    if spec.is_link:
        x, y = target.sample_id
        return render(f"link.{variant}", node_a=x, node_b=y)
    return render(f"node.{variant}", node_a=target.sample_id, options=", ".join(spec.options))


def _compose(ex: ExampleSet | None, reasons: str | None, target: EncodedSample, spec: TaskSpec, variant: str) -> str:
    parts = []
    if ex is not None and ex.examples:
        parts.append("Examples:\n\n" + _examples_block(ex, spec))
    if reasons and reasons.strip():
        parts.append("Reasons:\n" + reasons.strip())
    parts.append("Target:\n" + target.text)
    parts.append(_question(target, spec, variant))
    return "\n\n".join(parts)


def build_inductive_prompt(ex: ExampleSet, spec: TaskSpec) -> str:
    if not ex.examples:
        raise UsageError("inductive prompt needs at least one example")
    return _examples_block(ex, spec) + "\n\n" + render("inductive")


def build_deductive_prompt(ex: ExampleSet, reasons: str, target: EncodedSample, spec: TaskSpec) -> str:
    """Examples, induced reasons, the masked target and the task question."""
    return _compose(ex, reasons, target, spec, "deductive")


def build_cot_prompt(ex: ExampleSet, target: EncodedSample, spec: TaskSpec) -> str:
    return _compose(ex, None, target, spec, "cot")


def build_simple_prompt(target: EncodedSample, spec: TaskSpec) -> str:
    return _compose(None, None, target, spec, "simple")


def induce_reasons(backend, prompt: str, chat: ChatSettings = ChatSettings()) -> str:
    return complete(backend, chat.request(prompt)).text


# -- Parsing --
def _norm(text: str) -> str:
    return text.casefold().replace("_", " ").replace("-", " ")


def parse_node_answer(response: str, options) -> str:
    """The option whose last mention comes latest in the response."""
    if not options:
        raise UsageError("no options to parse against")
    normed = [_norm(o) for o in options]
    for i, a in enumerate(normed):
        for j, b in enumerate(normed):
            if i != j and a in b:
                raise UsageError(f"option {options[i]!r} is a substring of {options[j]!r}")
    text = _norm(response)
    best, best_pos = None, -1
    for opt, n in zip(options, normed):
        for m in re.finditer(r"(?<!\w)" + re.escape(n) + r"(?!\w)", text):
            if m.start() > best_pos:
                best, best_pos = opt, m.start()
    if best is None:
        raise UnparseableResponse(response)
    return best


_TRUE_FALSE = re.compile(r"(?<!\w)(true|false)(?!\w)", re.IGNORECASE)


def parse_link_answer(response: str) -> bool:
    matches = _TRUE_FALSE.findall(response)
    if not matches:
        raise UnparseableResponse(response)
    return matches[-1].lower() == "true"


def parse_answer(response: str, spec: TaskSpec):
    return parse_link_answer(response) if spec.is_link else parse_node_answer(response, spec.options)


# -- Traces --
@dataclass
class ReasoningTrace:
    target: str | tuple[str, str]
    method: str = "graph-agent"
    example_set: ExampleSet = field(default_factory=ExampleSet)
    inductive_prompt: str = ""
    induced_reasons: str = ""
    deductive_prompt: str = ""
    deductive_response: str = ""
    parsed_answer: str | bool | None = None
    truth: str | bool | None = None
    degraded: bool = False
    error: str | None = None
    error_type: str | None = None
    fallback_top_k: int | None = None
    wall_time: float = 0.0

    @property
    def correct(self) -> bool:
        return self.error is None and self.parsed_answer is not None and self.parsed_answer == self.truth

    def to_dict(self) -> dict:
        """Serializable form; wall time is kept out so trace files are reproducible."""
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "target": list(self.target) if isinstance(self.target, tuple) else self.target,
            "method": self.method,
            "example_set": self.example_set.to_dict(),
            "inductive_prompt": self.inductive_prompt,
            "induced_reasons": self.induced_reasons,
            "deductive_prompt": self.deductive_prompt,
            "deductive_response": self.deductive_response,
            "parsed_answer": self.parsed_answer,
            "truth": self.truth,
            "degraded": self.degraded,
            "error": self.error,
            "error_type": self.error_type,
            "fallback_top_k": self.fallback_top_k,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ReasoningTrace":
        target = data["target"]
        return cls(
            target=tuple(target) if isinstance(target, list) else target,
            method=data.get("method", "graph-agent"),
            example_set=ExampleSet.from_dict(data.get("example_set", {})),
            inductive_prompt=data.get("inductive_prompt", ""),
            induced_reasons=data.get("induced_reasons", ""),
            deductive_prompt=data.get("deductive_prompt", ""),
            deductive_response=data.get("deductive_response", ""),
            parsed_answer=data.get("parsed_answer"),
            truth=data.get("truth"),
            degraded=data.get("degraded", False),
            error=data.get("error"),
            error_type=data.get("error_type"),
            fallback_top_k=data.get("fallback_top_k"),
        )


def _record_failure(trace: ReasoningTrace, e: GraphAgentError) -> None:
    trace.error = str(e)
    trace.error_type = type(e).__name__
    log.warning("sample %r failed: %s: %s", trace.target, trace.error_type, e)


# -- Pipeline --
@dataclass
class AgentContext:
    """Everything one prediction needs; shared read-only by batch workers."""

    graph: Graph
    stats: DegreeStats
    store: MemoryStore
    embedder: object
    backend: object
    spec: TaskSpec
    chat: ChatSettings = field(default_factory=ChatSettings)
    visible_labels: Collection[str] = frozenset()
    reuse_reasons: bool = False
    _reasons: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def encode(self, sample_id, cfg: EncoderConfig | None = None) -> EncodedSample:
        return encode_sample(self.graph, self.stats, sample_id, cfg or self.spec.encoder_cfg, self.visible_labels)

    def embed_query(self, target: EncodedSample):
        return api_retry(self.embedder.embed_samples, [target], retry_on=(EmbeddingProviderError,))[0]

    def reasons_for(self, ex: ExampleSet, prompt: str) -> str:
        if not self.reuse_reasons:
            return induce_reasons(self.backend, prompt, self.chat)
        key = ex.identity()
        with self._lock:
            if key in self._reasons:
                return self._reasons[key]
        text = induce_reasons(self.backend, prompt, self.chat)
        with self._lock:
            self._reasons.setdefault(key, text)
        return text


def _reason_and_deduce(ctx: AgentContext, trace: ReasoningTrace, ex: ExampleSet, target: EncodedSample):
    spec = ctx.spec
    trace.example_set = ex
    trace.inductive_prompt, trace.induced_reasons = "", ""
    if ex.examples:
        trace.inductive_prompt = build_inductive_prompt(ex, spec)
        trace.induced_reasons = ctx.reasons_for(ex, trace.inductive_prompt)
    trace.degraded = not trace.induced_reasons.strip()
    trace.deductive_prompt = build_deductive_prompt(ex, trace.induced_reasons, target, spec)
    return complete(ctx.backend, ctx.chat.request(trace.deductive_prompt))


def predict(ctx: AgentContext, target_id, seed: int, truth=None) -> ReasoningTrace:
    """Encode (masked), embed, select examples, induce reasons, deduce, parse.

    Failures are recorded on the returned trace instead of raised.
    """
    start = time.perf_counter()
    trace = ReasoningTrace(target=target_id, truth=truth)
    spec = ctx.spec
    try:
        target = ctx.encode(target_id)
        query = ctx.embed_query(target)
        ex = select_examples(ctx.store, target, query, spec, seed)
        try:
            resp = _reason_and_deduce(ctx, trace, ex, target)
        except ContextOverflow:
            smaller = spec.encoder_cfg.model_copy(update={"top_k": spec.encoder_cfg.top_k // 2})
            log.warning("context overflow for %r, retrying with top_k=%d", target_id, smaller.top_k)
            trace.fallback_top_k = smaller.top_k
            ex = replace(ex, examples=tuple(
                replace(e, sample=ctx.encode(e.sample.sample_id, smaller)) for e in ex.examples
            ))
            resp = _reason_and_deduce(ctx, trace, ex, ctx.encode(target_id, smaller))
        trace.deductive_response = resp.text
        trace.parsed_answer = parse_answer(resp.text, spec)
    except GraphAgentError as e:
        _record_failure(trace, e)
    trace.wall_time = time.perf_counter() - start
    return trace


def _single_prompt(backend, prompt, spec, chat, trace) -> ReasoningTrace:
    start = time.perf_counter()
    trace.deductive_prompt = prompt
    try:
        resp = complete(backend, chat.request(prompt))
        trace.deductive_response = resp.text
        trace.parsed_answer = parse_answer(resp.text, spec)
    except GraphAgentError as e:
        _record_failure(trace, e)
    trace.wall_time = time.perf_counter() - start
    return trace


def baseline_simple_ask(backend, target: EncodedSample, spec: TaskSpec,
                        chat: ChatSettings = ChatSettings(), truth=None) -> ReasoningTrace:
    """Encoded target plus the task question; no examples, no reasons."""
    trace = ReasoningTrace(target=target.sample_id, method="simple-ask", truth=truth)
    return _single_prompt(backend, build_simple_prompt(target, spec), spec, chat, trace)


def baseline_kshot_cot(backend, target: EncodedSample, fixed_examples: ExampleSet, spec: TaskSpec,
                       chat: ChatSettings = ChatSettings(), truth=None) -> ReasoningTrace:
    """The run's fixed examples, the target and the question; no inductive phase."""
    trace = ReasoningTrace(target=target.sample_id, method="kshot-cot", example_set=fixed_examples, truth=truth)
    return _single_prompt(backend, build_cot_prompt(fixed_examples, target, spec), spec, chat, trace)


def with_method(trace: ReasoningTrace, method: str) -> ReasoningTrace:
    return replace(trace, method=method)
