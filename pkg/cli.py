"""graph-agent command line: ingest, memorize, evaluate, explain, report, ablate.

Exit codes: 0 success, 1 usage, 2 data error, 3 backend error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from utils.config import apply_overrides, build_backend, build_embedder, chat_settings, load_config
from utils.encoder import dump_samples, encode_sample
from utils.errors import GraphAgentError, UsageError
from utils.evaluator import (
    REPORT_TXT,
    TRACES_FILE,
    build_memory,
    find_trace,
    load_memory,
    metrics_from_traces,
    prepare,
    read_report,
    run_ablation,
    run_task,
)
from utils.graph_core import degree_stats, edge_type_counts, graph_summary, read_graph, save_split, subset_graph
from utils.memory import store_digest
from utils.reasoner import METHODS, AgentContext, predict

log = logging.getLogger("graph_agent")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_sample_id(text: str):
    """``a,b`` names an edge (a, b); anything else is a node id."""
    if "," in text:
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 2 or not all(parts):
            raise UsageError(f"edge ids look like 'src,dst', got {text!r}")
        return tuple(parts)
    return text


def _config(args):
    cfg = load_config(args.config)
    return apply_overrides(
        cfg,
        seed=args.seed, workers=args.workers, method=args.method, output_dir=args.output_dir,
        hops=args.hops, top_k=args.top_k, provenance=args.provenance, cache_mode=args.cache_mode,
    )


# -- Commands --
def cmd_ingest(args) -> int:
    cfg = _config(args)
    g = read_graph(cfg.dataset.nodes, cfg.dataset.edges)
    if cfg.dataset.node_types:
        g = subset_graph(g, cfg.dataset.node_types)
    stats = degree_stats(g)
    print(f"{len(g.nodes):,} nodes")
    print(f"{len(g.edges):,} edges")
    summary = graph_summary(g, stats)
    if not summary.empty:
        print(summary.to_string(index=False))
        print(edge_type_counts(g).rename("edges").to_string())
    if args.dump:
        task = prepare(cfg)
        samples = (
            encode_sample(task.graph, task.stats, sid, task.spec.encoder_cfg, task.visible_labels)
            for sid in task.split.train
        )
        n = dump_samples(samples, args.dump)
        print(f"wrote {n} encoded training samples to {args.dump}")
    return 0


def cmd_memorize(args) -> int:
    cfg = _config(args)
    cfg.run.output_dir.mkdir(parents=True, exist_ok=True)
    task = prepare(cfg)
    save_split(task.split, cfg.run.output_dir / "split.json")
    store = build_memory(cfg, task)
    print(f"stored {len(store)} samples (dim {store.dim}, {store.provenance}) in {cfg.store_dir}")
    print(f"digest {store_digest(cfg.store_dir)}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    report = run_task(cfg, build_store=False)
    print(report.table().to_string(index=False))
    print(f"traces: {report.trace_path}")
    return 0


def _section(title: str, body: str) -> str:
    return f"== {title} ==\n{body.rstrip() or '(empty)'}\n"


def format_trace(trace) -> str:
    examples = "\n\n".join(
        f"[{e.label}] {e.sample.sample_id}"
        + (f" (similarity {e.similarity:.4f})" if e.similarity is not None else "")
        + f"\n{e.sample.text}"
        for e in trace.example_set.examples
    )
    answer = f"predicted: {trace.parsed_answer}\ntruth: {trace.truth}"
    if trace.error:
        answer += f"\nerror: {trace.error_type}: {trace.error}"
    if trace.degraded:
        answer += "\n(degraded: no reasons were induced)"
    return "\n".join([
        f"target: {trace.target} ({trace.method})\n",
        _section("Examples", examples),
        _section("Inductive prompt", trace.inductive_prompt),
        _section("Reasons", trace.induced_reasons),
        _section("Deductive prompt", trace.deductive_prompt + "\n\n" + trace.deductive_response),
        _section("Answer", answer),
    ])


def cmd_explain(args) -> int:
    cfg = _config(args)
    sample_id = parse_sample_id(args.sample)
    if args.live:
        task = prepare(cfg)
        if sample_id not in task.labels:
            raise UsageError(f"{sample_id!r} is not a sample of this task")
        ctx = AgentContext(
            graph=task.graph, stats=task.stats, store=load_memory(cfg, task), embedder=build_embedder(cfg),
            backend=build_backend(cfg), spec=task.spec, chat=chat_settings(cfg),
            visible_labels=task.visible_labels, reuse_reasons=cfg.run.reuse_reasons,
        )
        trace = predict(ctx, sample_id, cfg.run.seed, task.truth(sample_id))
    else:
        trace = find_trace(cfg.run.output_dir / TRACES_FILE, sample_id)
    if args.json:
        print(json.dumps(trace.to_dict(), indent=2, ensure_ascii=False))
    else:
        print(format_trace(trace))
    return 0


def cmd_report(args) -> int:
    cfg = _config(args)
    out = cfg.run.output_dir
    report = read_report(out)
    txt = out / REPORT_TXT
    print(txt.read_text(encoding="utf-8") if txt.exists() else report.table().to_string(index=False))
    if args.check:
        recomputed = metrics_from_traces(report.trace_path, report.options).to_dict()
        if recomputed != report.metrics:
            log.error("report metrics differ from the trace file %s", report.trace_path)
            return 2
        print("metrics match the trace file")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    hops = tuple(int(h) for h in args.grid_hops.split(","))
    provenances = tuple(p.strip() for p in args.grid_provenances.split(","))
    table = run_ablation(cfg, hops, provenances)
    print(table.to_string(index=False))
    return 0


# -- Parser --
def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, required=True, help="run config (TOML)")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--hops", type=int)
    common.add_argument("--top-k", type=int)
    common.add_argument("--provenance", choices=("lm", "gnn"))
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--cache-mode", choices=("record", "replay", "passthrough"))
    common.add_argument("--output-dir", type=Path)

    parser = _Parser(prog="graph-agent", description="Reason over a knowledge graph with an LLM.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="validate the dataset and print graph statistics")
    p.add_argument("--dump", type=Path, help="also write encoded training samples as JSON-lines")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("memorize", parents=[common], help="embed the training split into long-term memory")
    p.set_defaults(func=cmd_memorize)

    p = sub.add_parser("evaluate", parents=[common], help="predict the test split and write the report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", parents=[common], help="show the reasoning trace for one sample")
    p.add_argument("sample", help="node id, or 'src,dst' for an edge")
    p.add_argument("--json", action="store_true", help="print the raw trace")
    p.add_argument("--live", action="store_true", help="run the pipeline for this sample now")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", parents=[common], help="print a finished run's report")
    p.add_argument("--check", action="store_true", help="recompute metrics from the trace file")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", parents=[common], help="run the hop depth x memory provenance grid")
    p.add_argument("--grid-hops", default="1,2,3")
    p.add_argument("--grid-provenances", default="lm,gnn")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"graph-agent: {e}", file=sys.stderr)
        return e.exit_code
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except GraphAgentError as e:
        log.error("%s", e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
