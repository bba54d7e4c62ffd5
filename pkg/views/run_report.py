from pathlib import Path

import pandas as pd
import plotly.express as px
import streamlit as st

from utils.errors import GraphAgentError
from utils.evaluator import TIMINGS_FILE, read_report


@st.cache_data(ttl=60, show_spinner=False)
def _load(run_dir: str):
    report = read_report(run_dir)
    timings_path = Path(run_dir) / TIMINGS_FILE
    timings = pd.read_json(timings_path) if timings_path.exists() else pd.DataFrame()
    return report.to_dict(), timings


def _confusion(m: dict):
    st.markdown("#### Confusion counts")
    grid = pd.DataFrame(
        [[m["tp"], m["fn"]], [m["fp"], m["tn"]]],
        index=["truth TRUE", "truth FALSE"],
        columns=["predicted TRUE", "predicted FALSE"],
    )
    fig = px.imshow(grid, text_auto=True, color_continuous_scale="Blues")
    fig.update_layout(height=320, margin=dict(l=10, r=10, t=10, b=10), coloraxis_showscale=False)
    st.plotly_chart(fig, use_container_width=True)


def _per_class(acc: dict):
    st.markdown("#### Accuracy by class")
    df = pd.DataFrame({"class": list(acc), "accuracy": list(acc.values())}).sort_values("accuracy")
    fig = px.bar(df, x="accuracy", y="class", orientation="h", range_x=[0, 1])
    fig.update_layout(height=max(240, 40 * len(df)), margin=dict(l=10, r=10, t=10, b=10))
    st.plotly_chart(fig, use_container_width=True)


def render():
    st.header("📊 Run Report")
    run_dir = st.session_state.get("run_dir", "runs/latest")
    try:
        report, timings = _load(run_dir)
    except GraphAgentError as e:
        st.warning(str(e))
        return
    m = report["metrics"]
    st.caption(f"{report['task']} · {report['method']} · seed {report['split']['seed']}")

    c1, c2, c3, c4 = st.columns(4)
    c1.metric("Accuracy", f"{m['accuracy']:.3f}")
    if "f1" in m:
        c2.metric("Precision", f"{m['precision']:.3f}")
        c3.metric("Recall", f"{m['recall']:.3f}")
        c4.metric("F1", f"{m['f1']:.3f}")
    else:
        c2.metric("Macro precision", f"{m['macro_precision']:.3f}")
        c3.metric("Macro recall", f"{m['macro_recall']:.3f}")
        c4.metric("Macro F1", f"{m['macro_f1']:.3f}")

    s1, s2, s3, s4 = st.columns(4)
    s1.metric("Test samples", report["split"]["test"])
    s2.metric("Unparseable", m.get("unparseable", 0))
    s3.metric("Errors", report["errors"])
    s4.metric("Degraded", report["degraded"])
    if report["errors"]:
        st.warning(f"{report['errors']} samples failed; open them in the Trace Explorer.")
    st.divider()

    if "tp" in m:
        _confusion(m)
    if report.get("per_class_accuracy"):
        _per_class(report["per_class_accuracy"])

    if not timings.empty:
        with st.expander("⏱️ Wall time per sample", expanded=False):
            fig = px.histogram(timings, x="wall_time", nbins=30)
            fig.update_layout(height=280, margin=dict(l=10, r=10, t=10, b=10))
            st.plotly_chart(fig, use_container_width=True)

    with st.expander("⚙️ Config snapshot", expanded=False):
        st.json(report["config"])
