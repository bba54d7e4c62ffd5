import numpy as np
import pytest

from utils.encoder import EncodedSample, EncoderConfig, encode_sample
from utils.errors import ContextOverflow, UnparseableResponse, UsageError
from utils.llm_gateway import ChatResponse, majority_label_mock, scripted_mock
from utils.memory import MemoryRecord, MemoryStore
from utils.prompts import INDUCTIVE_INSTRUCTION, LINK_QUESTION_TAIL, NODE_QUESTION_TAIL, get_template, render
from utils.reasoner import (
    AgentContext,
    ExamplePolicy,
    ExampleSet,
    ReasoningTrace,
    TaskSpec,
    baseline_kshot_cot,
    baseline_simple_ask,
    build_cot_prompt,
    build_deductive_prompt,
    build_inductive_prompt,
    choose_fixed_examples,
    parse_link_answer,
    parse_node_answer,
    predict,
    select_examples,
)

LINK = TaskSpec("link-prediction")
NODE = TaskSpec("node-classification", ("Neural_Networks", "Theory"))


def _rec(sid, vec, label):
    kind = "edge" if isinstance(sid, tuple) else "node"
    text = f"edge: {sid}" if kind == "edge" else f"node: {sid}"
    return MemoryRecord(sid, kind, np.asarray(vec, np.float32), label, text)


def _edge_store():
    return MemoryStore([
        _rec(("d1", "g7"), [1, 0, 0], "positive"),   # shares d1 with the target
        _rec(("d2", "g2"), [1, 0.1, 0], "positive"),
        _rec(("d3", "g3"), [1, 0.2, 0], "positive"),
        _rec(("d4", "g4"), [1, 0.3, 0], "positive"),
        _rec(("d5", "g5"), [0, 1, 0], "positive"),
        _rec(("d6", "g1"), [0, 0, 1], "negative"),   # shares g1 with the target
        _rec(("d7", "g8"), [0, 1, 1], "negative"),
        _rec(("d8", "g9"), [1, 1, 1], "negative"),
        _rec(("d9", "g6"), [1, 0, 1], "negative"),
    ], dim=3)


TARGET = EncodedSample(("d1", "g1"), "edge", "edge: (d1, g1)\nattributes:")


# -- Templates --
def test_templates_carry_instruction_strings():
    assert INDUCTIVE_INSTRUCTION == (
        "Given the provided examples and your existing knowledge, identify reasons why example nodes are "
        "categorized as labeled or why a connection exists in example edges. List the reasons concisely."
    )
    assert get_template("node.deductive").endswith(NODE_QUESTION_TAIL)
    assert LINK_QUESTION_TAIL in get_template("link.deductive")
    assert render("node.simple", node_a="{node_b}", options="A, B").count("{node_b}") == 1
    with pytest.raises(KeyError):
        get_template("missing")


# -- Example selection --
def test_link_examples_skip_shared_endpoints():
    ex = select_examples(_edge_store(), TARGET, [1, 0, 0], LINK, seed=1)
    ids = [e.sample.sample_id for e in ex.examples]
    assert ("d1", "g7") not in ids and ("d6", "g1") not in ids
    assert ids[:3] == [("d2", "g2"), ("d3", "g3"), ("d4", "g4")]
    assert (ex.positives, ex.negatives, ex.short) == (3, 2, False)
    assert all(not {"d1", "g1"} & set(sid) for sid in ids)


def test_negative_picks_are_seeded():
    a = select_examples(_edge_store(), TARGET, [1, 0, 0], LINK, seed=5)
    b = select_examples(_edge_store(), TARGET, [1, 0, 0], LINK, seed=5)
    assert a == b
    seen = {
        tuple(e.sample.sample_id for e in select_examples(_edge_store(), TARGET, [1, 0, 0], LINK, s).examples[3:])
        for s in range(30)
    }
    assert len(seen) > 1


def test_exactly_satisfiable_policy_selects_everything():
    store = MemoryStore([
        _rec(("a1", "b1"), [1, 0], "positive"),
        _rec(("a2", "b2"), [1, 1], "positive"),
        _rec(("a3", "b3"), [0, 1], "positive"),
        _rec(("a4", "b4"), [1, 0], "negative"),
        _rec(("a5", "b5"), [0, 1], "negative"),
    ], dim=2)
    ex = select_examples(store, TARGET, [1, 0], LINK, seed=0)
    assert len(ex.examples) == 5 and not ex.short


def test_short_example_set_is_flagged():
    store = MemoryStore([_rec(("a1", "b1"), [1, 0], "positive"), _rec(("a4", "b4"), [1, 0], "negative")], dim=2)
    ex = select_examples(store, TARGET, [1, 0], LINK, seed=0)
    assert (ex.positives, ex.negatives, ex.short) == (1, 1, True)


def test_node_examples_are_top_k():
    spec = TaskSpec("node-classification", ("A", "B"), ExamplePolicy(node_k=2))
    store = MemoryStore([_rec("n1", [1, 0], "A"), _rec("n2", [0, 1], "B"), _rec("n3", [1, 0.1], "B")], dim=2)
    ex = select_examples(store, EncodedSample("t", "node", "node: t"), [1, 0], spec, seed=0)
    assert [e.sample.sample_id for e in ex.examples] == ["n1", "n3"]


def test_task_spec_needs_two_options():
    with pytest.raises(UsageError):
        TaskSpec("node-classification", ("only",))
    with pytest.raises(UsageError):
        TaskSpec("graph-classification")


# -- Prompts --
def test_inductive_prompt_labels_and_instruction():
    ex = select_examples(_edge_store(), TARGET, [1, 0, 0], LINK, seed=1)
    prompt = build_inductive_prompt(ex, LINK)
    assert prompt.count("label: TRUE") == 3
    assert prompt.count("label: FALSE") == 2
    assert prompt.startswith("Example 1:\n")
    assert prompt.endswith(INDUCTIVE_INSTRUCTION)
    with pytest.raises(UsageError):
        build_inductive_prompt(ExampleSet(), LINK)


def test_deductive_prompts():
    ex = select_examples(_edge_store(), TARGET, [1, 0, 0], LINK, seed=1)
    link = build_deductive_prompt(ex, "1. shared pathway", TARGET, LINK)
    assert link.endswith(render("link.deductive", node_a="d1", node_b="g1"))
    assert "between d1 and g1" in link
    assert "Reasons:\n1. shared pathway" in link

    spec = TaskSpec("node-classification", ("A", "B", "C"))
    target = EncodedSample("t", "node", "node: t")
    node = build_deductive_prompt(ExampleSet(), "", target, spec)
    assert "options: [A, B, C]" in node
    assert "Reasons:" not in node


def test_graph_agent_prompt_contains_cot_structure():
    ex = select_examples(_edge_store(), TARGET, [1, 0, 0], LINK, seed=1)
    ga = build_deductive_prompt(ex, "R", TARGET, LINK)
    cot = build_cot_prompt(ex, TARGET, LINK)
    examples_block = cot.split("\n\nTarget:")[0]
    assert ga.startswith(examples_block)
    assert "Reasons:\nR" in ga and "Reasons:" not in cot


def test_simple_ask_prompt_has_no_examples():
    mock = scripted_mock({"*": "FALSE"})
    trace = baseline_simple_ask(mock, TARGET, LINK, truth=True)
    assert "Example" not in trace.deductive_prompt
    assert trace.parsed_answer is False
    assert trace.method == "simple-ask"


def test_kshot_uses_the_same_examples_for_every_target():
    store = _edge_store()
    fixed = choose_fixed_examples(store, LINK, seed=3)
    assert choose_fixed_examples(store, LINK, seed=3) == fixed
    assert (fixed.positives, fixed.negatives) == (3, 2)
    mock = scripted_mock({"*": "TRUE"})
    targets = [EncodedSample((f"x{i}", f"y{i}"), "edge", f"edge: (x{i}, y{i})") for i in range(3)]
    prompts = [baseline_kshot_cot(mock, t, fixed, LINK).deductive_prompt for t in targets]
    blocks = {p.split("\n\nTarget:")[0] for p in prompts}
    assert len(blocks) == 1
    assert all("Reasons:" not in p for p in prompts)


def test_fixed_examples_avoid_target_endpoints():
    fixed = choose_fixed_examples(_edge_store(), LINK, seed=3, avoid={"d1", "g1"})
    assert (fixed.positives, fixed.negatives) == (3, 2) and not fixed.short
    assert all(not {"d1", "g1"} & set(e.sample.sample_id) for e in fixed.examples)

    tiny = MemoryStore([_rec(("d1", "g7"), [1, 0], "positive"), _rec(("d2", "g8"), [0, 1], "negative")], dim=2)
    assert [e.sample.sample_id for e in choose_fixed_examples(tiny, LINK, seed=0).examples] == [
        ("d1", "g7"), ("d2", "g8")
    ]
    filtered = choose_fixed_examples(tiny, LINK, seed=0, avoid={"d1", "g1"})
    assert [e.sample.sample_id for e in filtered.examples] == [("d2", "g8")]
    assert filtered.short


# -- Parsing --
@pytest.mark.parametrize("response, expected", [
    ("...therefore the node is Neural_Networks", "Neural_Networks"),
    ("could be Theory or Neural_Networks... final answer: Theory", "Theory"),
    ("NEURAL NETWORKS it is", "Neural_Networks"),
])
def test_parse_node_answer(response, expected):
    assert parse_node_answer(response, NODE.options) == expected


def test_parse_node_answer_last_occurrence_single_letters():
    assert parse_node_answer("could be A or B... final answer: B", ["A", "B"]) == "B"


def test_parse_node_answer_errors():
    with pytest.raises(UnparseableResponse):
        parse_node_answer("no idea", NODE.options)
    with pytest.raises(UsageError):
        parse_node_answer("x", ["Theory", "Theory_Extended"])


@pytest.mark.parametrize("response, expected", [
    ("TRUE", True),
    ("Although it seems TRUE at first... FALSE.", False),
    ("the answer is true", True),
])
def test_parse_link_answer(response, expected):
    assert parse_link_answer(response) is expected


def test_parse_link_answer_empty():
    with pytest.raises(UnparseableResponse):
        parse_link_answer("")
    with pytest.raises(UnparseableResponse):
        parse_link_answer("untrue statements")


def test_parsing_is_idempotent():
    assert parse_node_answer(parse_node_answer("so: Theory", NODE.options), NODE.options) == "Theory"
    assert parse_link_answer(str(parse_link_answer("false")).upper()) is False


# -- Pipeline --
class _FixedEmbedder:
    def __init__(self, vec):
        self.vec = np.asarray(vec, np.float32)

    def embed_samples(self, samples):
        return np.stack([self.vec for _ in samples])


def _node_context(paper_graph, paper_stats, backend, **kw):
    store = MemoryStore([
        _rec("p0", [1, 0], "Theory"),
        _rec("p1", [1, 0.1], "Theory"),
        _rec("p2", [1, 0.2], "Theory"),
        _rec("p3", [1, 0.3], "Neural_Networks"),
        _rec("p4", [1, 0.4], "Theory"),
        _rec("p6", [0, 1], "Neural_Networks"),
    ], dim=2)
    spec = TaskSpec("node-classification", ("Neural_Networks", "Theory"))
    return AgentContext(paper_graph, paper_stats, store, _FixedEmbedder([1, 0]), backend, spec, **kw)


def test_predict_follows_majority_of_retrieved_labels(paper_graph, paper_stats):
    ctx = _node_context(paper_graph, paper_stats, majority_label_mock())
    trace = predict(ctx, "p5", seed=0, truth="Theory")
    assert [e.label for e in trace.example_set.examples].count("Theory") == 4
    assert trace.parsed_answer == "Theory"
    assert trace.correct
    assert "Most examples share the category Theory" in trace.induced_reasons
    target_block = trace.deductive_prompt.split("Target:\n")[1].split("\n\n")[0]
    assert paper_graph.node("p5").label not in target_block


def test_predict_link_with_scripted_true(synthetic_graph, synthetic_stats):
    pair = next(e.pair for e in synthetic_graph.edges if e.edge_type == "targets")
    store = _edge_store()
    ctx = AgentContext(synthetic_graph, synthetic_stats, store, _FixedEmbedder([1, 0, 0]),
                       scripted_mock({"*": "TRUE"}), LINK)
    trace = predict(ctx, pair, seed=2, truth=True)
    assert trace.parsed_answer is True
    assert trace.error is None
    assert LINK_QUESTION_TAIL in trace.deductive_prompt


def test_empty_reasons_degrade(paper_graph, paper_stats):
    backend = scripted_mock([("List the reasons concisely.", ""), ("*", "Theory")])
    trace = predict(_node_context(paper_graph, paper_stats, backend), "p5", seed=0, truth="Theory")
    assert trace.degraded
    assert "Reasons:" not in trace.deductive_prompt
    assert trace.parsed_answer == "Theory"


def test_unparseable_is_recorded_not_raised(paper_graph, paper_stats):
    backend = scripted_mock({"*": "I would rather not say."})
    trace = predict(_node_context(paper_graph, paper_stats, backend), "p5", seed=0, truth="Theory")
    assert trace.parsed_answer is None
    assert trace.error_type == "UnparseableResponse"
    assert not trace.correct


class _Overflowing:
    def __init__(self):
        self.calls = []

    def complete(self, req):
        self.calls.append(req)
        if "List the reasons concisely." in req.user_text:
            return ChatResponse("1. reasons")
        if len([c for c in self.calls if "Target:" in c.user_text]) == 1:
            raise ContextOverflow("too long")
        return ChatResponse("Theory")


def test_context_overflow_retries_with_half_top_k(paper_graph, paper_stats):
    backend = _Overflowing()
    ctx = _node_context(paper_graph, paper_stats, backend)
    ctx.spec = TaskSpec("node-classification", ("Neural_Networks", "Theory"), encoder_cfg=EncoderConfig(top_k=2))
    trace = predict(ctx, "p5", seed=0, truth="Theory")
    assert trace.fallback_top_k == 1
    assert trace.parsed_answer == "Theory"
    smaller = encode_sample(paper_graph, paper_stats, "p5", EncoderConfig(top_k=1))
    assert smaller.text in trace.deductive_prompt


class _OverflowingInduction:
    def __init__(self):
        self.inductive_calls = 0

    def complete(self, req):
        if "List the reasons concisely." in req.user_text:
            self.inductive_calls += 1
            if self.inductive_calls == 1:
                raise ContextOverflow("too long")
            return ChatResponse("1. reasons")
        return ChatResponse("Theory")


def test_inductive_overflow_retries_with_half_top_k(paper_graph, paper_stats):
    backend = _OverflowingInduction()
    ctx = _node_context(paper_graph, paper_stats, backend)
    ctx.spec = TaskSpec("node-classification", ("Neural_Networks", "Theory"), encoder_cfg=EncoderConfig(top_k=2))
    trace = predict(ctx, "p5", seed=0, truth="Theory")
    assert backend.inductive_calls == 2
    assert trace.fallback_top_k == 1
    assert trace.parsed_answer == "Theory"
    assert trace.induced_reasons == "1. reasons" and not trace.degraded
    smaller = EncoderConfig(top_k=1)
    for e in trace.example_set.examples:
        text = encode_sample(paper_graph, paper_stats, e.sample.sample_id, smaller, ctx.visible_labels).text
        assert e.sample.text == text
        assert text in trace.inductive_prompt
    assert encode_sample(paper_graph, paper_stats, "p5", smaller).text in trace.deductive_prompt


def test_reasons_reused_for_identical_example_sets(paper_graph, paper_stats):
    backend = majority_label_mock()
    ctx = _node_context(paper_graph, paper_stats, backend, reuse_reasons=True)
    predict(ctx, "p5", seed=0)
    predict(ctx, "p7", seed=0)
    inductive = [c for c in backend.calls if "List the reasons concisely." in c.user_text]
    assert len(inductive) == 1


def test_trace_dict_round_trip(paper_graph, paper_stats):
    trace = predict(_node_context(paper_graph, paper_stats, majority_label_mock()), "p5", seed=0, truth="Theory")
    data = trace.to_dict()
    assert data["schema_version"] == 1
    assert "wall_time" not in data
    assert ReasoningTrace.from_dict(data).to_dict() == data
