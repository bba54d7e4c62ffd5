"""Task preparation, memory building, batch prediction, metrics and reports.

A run directory holds::

    split.json      seeded train/validation/test ids
    store/          memory store plus manifest.json
    traces.jsonl    one reasoning trace per test sample, in test order
    timings.json    wall time per sample (kept out of the traces)
    report.json     metrics and config snapshot; report.txt is the same as a table
"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import pandas as pd
import sklearn.metrics as metrics

from utils.config import RunConfig, build_backend, build_embedder, chat_settings, task_spec
from utils.encoder import encode_sample
from utils.errors import BackendError, DataError, EmptySplit, GraphAgentError, StoreNotFound, UnknownSample, UsageError
from utils.graph_core import (
    NEGATIVE,
    POSITIVE,
    DegreeStats,
    Graph,
    Split,
    degree_stats,
    derive_seed,
    read_graph,
    sample_negative_edges,
    save_split,
    split_dataset,
    subset_graph,
    typed_pairs,
)
from utils.memory import MemoryStore, import_gnn_embeddings, load_store, memorize, save_store, store_digest
from utils.reasoner import (
    LINK_TASK,
    NODE_TASK,
    AgentContext,
    ReasoningTrace,
    TaskSpec,
    baseline_kshot_cot,
    baseline_simple_ask,
    choose_fixed_examples,
    predict,
)

log = logging.getLogger(__name__)

SPLIT_FILE = "split.json"
TRACES_FILE = "traces.jsonl"
TIMINGS_FILE = "timings.json"
REPORT_JSON = "report.json"
REPORT_TXT = "report.txt"
MANIFEST_FILE = "manifest.json"

UNPARSEABLE = "<unparseable>"


# -- Metrics --
def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def _ratio(num: int, den: int, name: str, undefined: list) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


@dataclass(frozen=True)
class Metrics:
    """Binary confusion counts and the four scores derived from them."""

    precision: float
    recall: float
    f1: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    unparseable: int = 0
    positive_accuracy: float = 0.0
    negative_accuracy: float = 0.0
    undefined: tuple[str, ...] = ()

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        d = asdict(self)
        d["undefined"] = list(self.undefined)
        d["total"] = self.total
        return d


def compute_metrics(predictions) -> Metrics:
    """Score (predicted, truth) pairs; a predicted None is unparseable and counts as wrong."""
    predictions = list(predictions)
    if not predictions:
        raise UsageError("no predictions to score")
    tp = fp = tn = fn = unparseable = 0
    for pred, truth in predictions:
        truth = bool(truth)
        if pred is None:
            unparseable += 1
            pred = not truth
        if pred and truth:
            tp += 1
        elif pred:
            fp += 1
        elif truth:
            fn += 1
        else:
            tn += 1
    undefined: list[str] = []
    precision = _ratio(tp, tp + fp, "precision", undefined)
    recall = _ratio(tp, tp + fn, "recall", undefined)
    return Metrics(
        precision=precision,
        recall=recall,
        f1=f1_score(precision, recall),
        accuracy=(tp + tn) / len(predictions),
        tp=tp, fp=fp, tn=tn, fn=fn,
        unparseable=unparseable,
        positive_accuracy=_ratio(tp, tp + fn, "positive_accuracy", undefined),
        negative_accuracy=_ratio(tn, tn + fp, "negative_accuracy", undefined),
        undefined=tuple(undefined),
    )


@dataclass(frozen=True)
class MulticlassMetrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class_accuracy: dict[str, float]
    correct: int
    total: int
    unparseable: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def compute_multiclass_metrics(predictions, labels=None) -> MulticlassMetrics:
    """Accuracy, macro precision/recall/F1 and per-class accuracy (the class's recall).

    Unparseable (None) predictions never match a class.
    """
    df = pd.DataFrame(list(predictions), columns=["pred", "truth"])
    if df.empty:
        raise UsageError("no predictions to score")
    classes = sorted(set(labels) if labels else set(df["truth"]))
    unparseable = df["pred"].isna()
    y_true = df["truth"].astype(str)
    y_pred = df["pred"].where(~unparseable, UNPARSEABLE).astype(str)
    precision, recall, f1, _ = metrics.precision_recall_fscore_support(
        y_true, y_pred, labels=classes, average="macro", zero_division=0
    )
    per_class_recall = metrics.recall_score(y_true, y_pred, labels=classes, average=None, zero_division=0)
    present = set(y_true)
    hits = int((y_true == y_pred).sum())
    return MulticlassMetrics(
        accuracy=float(metrics.accuracy_score(y_true, y_pred)),
        macro_precision=float(precision),
        macro_recall=float(recall),
        macro_f1=float(f1),
        per_class_accuracy={c: float(r) for c, r in zip(classes, per_class_recall) if c in present},
        correct=hits,
        total=len(df),
        unparseable=int(unparseable.sum()),
    )


def score_traces(traces, options=()):
    """Metrics for a batch; errored samples score as unparseable."""
    pairs = [(t.parsed_answer if t.error is None else None, t.truth) for t in traces]
    if pairs and isinstance(pairs[0][1], bool):
        return compute_metrics(pairs)
    return compute_multiclass_metrics(pairs, options or None)


# -- Task preparation --
@dataclass
class PreparedTask:
    graph: Graph
    stats: DegreeStats
    spec: TaskSpec
    labels: dict
    split: Split

    def truth(self, sample_id):
        label = self.labels[sample_id]
        return label == POSITIVE if self.spec.is_link else label

    @property
    def visible_labels(self) -> frozenset:
        """Nodes whose labels may appear in neighbour lists: training nodes only."""
        if self.spec.is_link:
            return frozenset()
        return frozenset(self.split.train)


def _check_split(split: Split) -> Split:
    if not split.train:
        raise EmptySplit("train split is empty; nothing to memorize")
    if not split.test:
        raise EmptySplit("test split is empty; nothing to evaluate")
    return split


def prepare_node_task(g: Graph, target_type: str | None, seed: int, ratios=(0.6, 0.2, 0.2)):
    """Labels of every labeled node (of ``target_type`` when given) and their split."""
    labels = {
        n.id: n.label for n in g.nodes.values()
        if n.label and (target_type is None or n.node_type == target_type)
    }
    split = _check_split(split_dataset(list(labels), ratios, seed))
    log.info("node task: %d labeled nodes, split %d/%d/%d",
             len(labels), len(split.train), len(split.validation), len(split.test))
    return labels, split


def prepare_link_task(g: Graph, src_type: str, dst_type: str, seed: int, ratios=(0.8, 0.1, 0.1)):
    """Positive typed pairs plus as many negatives, merged, then split."""
    positives = typed_pairs(g, src_type, dst_type)
    negatives = sample_negative_edges(g, src_type, dst_type, len(positives), derive_seed(seed, "negatives"))
    labels = {p: POSITIVE for p in positives}
    labels.update({e.pair: NEGATIVE for e in negatives})
    split = _check_split(split_dataset(list(labels), ratios, seed))
    log.info("link task: %d positive and %d negative %s-%s pairs, split %d/%d/%d",
             len(positives), len(negatives), src_type, dst_type,
             len(split.train), len(split.validation), len(split.test))
    return labels, split


def prepare(cfg: RunConfig) -> PreparedTask:
    ds = cfg.dataset
    g = read_graph(ds.nodes, ds.edges)
    if ds.node_types:
        g = subset_graph(g, ds.node_types)
    stats = degree_stats(g)
    seed = cfg.run.seed
    if ds.task == NODE_TASK:
        labels, split = prepare_node_task(g, ds.target_type, seed, ds.split_ratios())
        options = ds.options or tuple(sorted(set(labels.values())))
        unknown = set(labels.values()) - set(options)
        if unknown:
            raise UsageError(f"dataset labels {sorted(unknown)} are missing from dataset.options")
    else:
        labels, split = prepare_link_task(g, ds.src_type, ds.dst_type, seed, ds.split_ratios())
        options = ()
    return PreparedTask(g, stats, task_spec(cfg, options), labels, split)


# -- Memory --
def _fingerprint(cfg: RunConfig) -> str:
    snap = cfg.snapshot()
    key = {k: snap[k] for k in ("dataset", "encoder", "memory")}
    key["seed"] = cfg.run.seed
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode("utf-8")).hexdigest()


def build_memory(cfg: RunConfig, task: PreparedTask, embedder=None) -> MemoryStore:
    """Encode and embed the training split, persist the store and its manifest."""
    embedder = embedder or build_embedder(cfg)
    spec = task.spec
    samples = [
        encode_sample(task.graph, task.stats, sid, spec.encoder_cfg, task.visible_labels)
        for sid in task.split.train
    ]
    labels = {s.sample_id: task.labels[s.sample_id] for s in samples}
    if cfg.memory.provenance == "gnn":
        store = import_gnn_embeddings(embedder, labels, {s.sample_id: s.text for s in samples})
        save_store(store, cfg.store_dir)
    else:
        store = memorize(
            samples, labels, embedder,
            concurrency=cfg.memory.concurrency, batch_size=cfg.memory.batch_size,
            persist_dir=cfg.store_dir,
        )
    manifest = {
        "fingerprint": _fingerprint(cfg),
        "digest": store_digest(cfg.store_dir),
        "count": len(store),
        "dim": store.dim,
        "provenance": store.provenance,
        "seed": cfg.run.seed,
    }
    (cfg.store_dir / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    log.info("store written to %s", cfg.store_dir)
    return store


def load_memory(cfg: RunConfig, task: PreparedTask) -> MemoryStore:
    """Load the run's store and check it was built for this config and split."""
    manifest_path = cfg.store_dir / MANIFEST_FILE
    if not manifest_path.exists():
        raise StoreNotFound(f"no memory store in {cfg.store_dir}; run `memorize` first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("fingerprint") != _fingerprint(cfg):
        raise DataError(f"store in {cfg.store_dir} was built with different settings; rerun `memorize`")
    store = load_store(cfg.store_dir)
    if {r.sample_id for r in store.records} != set(task.split.train):
        raise DataError(f"store in {cfg.store_dir} does not match the training split; rerun `memorize`")
    return store


# -- Reports --
@dataclass
class RunReport:
    config: dict
    method: str
    task: str
    split: dict
    metrics: dict
    trace_path: str
    per_class_accuracy: dict | None = None
    options: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    errors: int = 0
    degraded: int = 0
    cache: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        return cls(**data)

    def table(self) -> pd.DataFrame:
        keys = ["accuracy", "precision", "recall", "f1", "macro_precision", "macro_recall", "macro_f1",
                "positive_accuracy", "negative_accuracy", "tp", "fp", "tn", "fn", "unparseable"]
        rows = [(k, self.metrics[k]) for k in keys if k in self.metrics]
        rows += [("errors", self.errors), ("degraded", self.degraded)]
        rows += [(f"accuracy[{c}]", v) for c, v in (self.per_class_accuracy or {}).items()]
        df = pd.DataFrame(rows, columns=["metric", "value"])
        df["value"] = df["value"].map(lambda v: f"{v:.4f}" if isinstance(v, float) else str(v))
        return df


def write_report(report: RunReport, out_dir) -> Path:
    out = Path(out_dir)
    (out / REPORT_JSON).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    header = f"{report.task} / {report.method} / {report.split['test']} test samples\n"
    (out / REPORT_TXT).write_text(header + report.table().to_string(index=False) + "\n", encoding="utf-8")
    return out / REPORT_JSON


def read_report(out_dir) -> RunReport:
    path = Path(out_dir) / REPORT_JSON
    if not path.exists():
        raise UsageError(f"no report in {out_dir}; run `evaluate` first")
    return RunReport.from_dict(json.loads(path.read_text(encoding="utf-8")))


def load_traces(path) -> list[ReasoningTrace]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"trace file not found: {path}")
    with path.open(encoding="utf-8") as f:
        return [ReasoningTrace.from_dict(json.loads(line)) for line in f if line.strip()]


def find_trace(path, sample_id) -> ReasoningTrace:
    for trace in load_traces(path):
        if trace.target == sample_id:
            return trace
    raise UnknownSample(f"no trace for sample {sample_id!r} in {path}")


def metrics_from_traces(path, options=()):
    """Recompute report metrics from a trace file; the report is never authoritative."""
    traces = load_traces(path)
    if not traces:
        raise UsageError(f"{path} holds no traces")
    return score_traces(traces, options)


# -- Batch runs --
def _runner(ctx: AgentContext, task: PreparedTask, method: str, seed: int, fixed=None):
    def run_one(sid) -> ReasoningTrace:
        truth = task.truth(sid)
        if method == "graph-agent":
            return predict(ctx, sid, seed, truth)
        try:
            target = ctx.encode(sid)
        except GraphAgentError as e:
            return ReasoningTrace(target=sid, method=method, truth=truth, error=str(e), error_type=type(e).__name__)
        if method == "simple-ask":
            return baseline_simple_ask(ctx.backend, target, task.spec, ctx.chat, truth)
        return baseline_kshot_cot(ctx.backend, target, fixed, task.spec, ctx.chat, truth)

    return run_one


def run_task(cfg: RunConfig, backend=None, embedder=None, build_store: bool = True) -> RunReport:
    """Prepare, memorize (or load memory), predict every test sample, score and report.

    Per-sample failures are kept on their traces. If every sample failed on
    something other than an unparseable answer the run is reported as aborted.
    """
    out = cfg.run.output_dir
    out.mkdir(parents=True, exist_ok=True)
    task = prepare(cfg)
    save_split(task.split, out / SPLIT_FILE)
    embedder = embedder or build_embedder(cfg)
    try:
        store = load_memory(cfg, task)
        log.info("loaded store from %s (%d records)", cfg.store_dir, len(store))
    except StoreNotFound:
        if not build_store:
            raise
        store = build_memory(cfg, task, embedder)
    backend = backend or build_backend(cfg)
    method = cfg.run.method
    ctx = AgentContext(
        graph=task.graph, stats=task.stats, store=store, embedder=embedder, backend=backend,
        spec=task.spec, chat=chat_settings(cfg), visible_labels=task.visible_labels,
        reuse_reasons=cfg.run.reuse_reasons,
    )
    fixed = None
    if method == "kshot-cot":
        avoid = {n for sid in task.split.test for n in sid} if task.spec.is_link else ()
        fixed = choose_fixed_examples(store, task.spec, cfg.run.seed, avoid)
    run_one = _runner(ctx, task, method, cfg.run.seed, fixed)

    log.info("predicting %d test samples with %s (%d workers)", len(task.split.test), method, cfg.run.workers)
    traces: list[ReasoningTrace] = []
    trace_path = out / TRACES_FILE
    with ThreadPoolExecutor(max_workers=cfg.run.workers) as pool, trace_path.open("w", encoding="utf-8") as f:
        for trace in pool.map(run_one, task.split.test):
            f.write(json.dumps(trace.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
            traces.append(trace)
            log.debug("%r -> %r (truth %r)", trace.target, trace.parsed_answer, trace.truth)

    timings = [{"target": t.to_dict()["target"], "wall_time": round(t.wall_time, 6)} for t in traces]
    (out / TIMINGS_FILE).write_text(json.dumps(timings, indent=1), encoding="utf-8")

    metrics = score_traces(traces, task.spec.options)
    cache = getattr(backend, "cache", None)
    total_time = sum(t.wall_time for t in traces)
    report = RunReport(
        config=cfg.snapshot(),
        method=method,
        task=task.spec.kind,
        split={
            "seed": task.split.seed,
            "train": len(task.split.train),
            "validation": len(task.split.validation),
            "test": len(task.split.test),
            "path": str(out / SPLIT_FILE),
        },
        metrics=metrics.to_dict(),
        trace_path=str(trace_path),
        per_class_accuracy=getattr(metrics, "per_class_accuracy", None),
        options=list(task.spec.options),
        timings={"total_wall_time": round(total_time, 3), "mean_wall_time": round(total_time / len(traces), 3)},
        errors=sum(t.error is not None for t in traces),
        degraded=sum(t.degraded for t in traces),
        cache={"hits": cache.hits, "misses": cache.misses} if cache is not None else {},
    )
    write_report(report, out)
    log.info("run finished: accuracy %.4f over %d samples, %d errors",
             report.metrics["accuracy"], len(traces), report.errors)

    failed = [t for t in traces if t.error_type and t.error_type != "UnparseableResponse"]
    if len(failed) == len(traces):
        raise BackendError(f"every sample failed; first error: {failed[0].error_type}: {failed[0].error}")
    return report


def run_node_classification(cfg: RunConfig, **kwargs) -> RunReport:
    if cfg.dataset.task != NODE_TASK:
        raise UsageError(f"config task is {cfg.dataset.task!r}, not {NODE_TASK!r}")
    return run_task(cfg, **kwargs)


def run_link_prediction(cfg: RunConfig, **kwargs) -> RunReport:
    if cfg.dataset.task != LINK_TASK:
        raise UsageError(f"config task is {cfg.dataset.task!r}, not {LINK_TASK!r}")
    return run_task(cfg, **kwargs)


def run_ablation(cfg: RunConfig, hops=(1, 2, 3), provenances=("lm", "gnn"), backend=None) -> pd.DataFrame:
    """One run per (hop depth, memory provenance); one metrics row per setting."""
    rows = []
    base = cfg.run.output_dir
    for prov in provenances:
        for h in hops:
            data = cfg.model_dump(mode="json")
            data["encoder"]["hops"] = h
            data["memory"]["provenance"] = prov
            data["run"]["output_dir"] = str(base / f"hops-{h}_{prov}")
            try:
                setting = RunConfig.model_validate(data)
            except ValueError as e:
                raise UsageError(f"ablation setting hops={h} provenance={prov}: {e}") from None
            log.info("ablation: hops=%d provenance=%s", h, prov)
            report = run_task(setting, backend=backend)
            m = report.metrics
            rows.append({
                "hops": h,
                "provenance": prov,
                "accuracy": m["accuracy"],
                "precision": m.get("precision", m.get("macro_precision")),
                "recall": m.get("recall", m.get("macro_recall")),
                "f1": m.get("f1", m.get("macro_f1")),
                "errors": report.errors,
            })
    table = pd.DataFrame(rows)
    base.mkdir(parents=True, exist_ok=True)
    table.to_csv(base / "ablation.csv", index=False)
    return table
