from pathlib import Path

import streamlit as st

from utils.errors import GraphAgentError
from utils.evaluator import TRACES_FILE, load_traces


@st.cache_data(ttl=60, show_spinner=False)
def _load(path: str):
    return [t.to_dict() for t in load_traces(path)]


def _label(t: dict) -> str:
    target = ", ".join(t["target"]) if isinstance(t["target"], list) else t["target"]
    mark = "⚠️" if t["error"] else ("✅" if t["parsed_answer"] == t["truth"] else "❌")
    return f"{mark} {target}"


def render():
    st.header("🔎 Trace Explorer")
    run_dir = st.session_state.get("run_dir", "runs/latest")
    try:
        traces = _load(str(Path(run_dir) / TRACES_FILE))
    except GraphAgentError as e:
        st.warning(str(e))
        return
    if not traces:
        st.info("No traces in this run.")
        return

    only = st.radio("Show", ["All", "Wrong", "Errors"], horizontal=True)
    if only == "Wrong":
        traces = [t for t in traces if not t["error"] and t["parsed_answer"] != t["truth"]]
    elif only == "Errors":
        traces = [t for t in traces if t["error"]]
    if not traces:
        st.info("Nothing matches.")
        return
    t = st.selectbox("Sample", traces, format_func=_label)

    c1, c2, c3 = st.columns(3)
    c1.metric("Predicted", str(t["parsed_answer"]))
    c2.metric("Truth", str(t["truth"]))
    c3.metric("Method", t["method"])
    if t["error"]:
        st.error(f"{t['error_type']}: {t['error']}")
    if t["degraded"]:
        st.warning("No reasons were induced; deduction ran on examples alone.")
    if t.get("fallback_top_k") is not None:
        st.caption(f"Context overflow; target re-encoded with top_k={t['fallback_top_k']}.")

    examples = t["example_set"]["examples"]
    with st.expander(f"📚 Examples ({len(examples)})", expanded=False):
        for e in examples:
            sim = f" · similarity {e['similarity']:.4f}" if e.get("similarity") is not None else ""
            st.markdown(f"**{e['label']}**{sim}")
            st.code(e["text"], language=None)
    if t["inductive_prompt"]:
        with st.expander("🧩 Inductive prompt", expanded=False):
            st.code(t["inductive_prompt"], language=None)
    st.markdown("#### Reasons")
    st.write(t["induced_reasons"] or "(none)")
    with st.expander("🧠 Deductive prompt", expanded=False):
        st.code(t["deductive_prompt"], language=None)
    st.markdown("#### Response")
    st.write(t["deductive_response"] or "(none)")
