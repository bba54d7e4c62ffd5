import streamlit as st

# -- Graph Agent Viewer --
# Read-only browser for run directories written by `cli.py evaluate`
# Uses views/ directory for page modules (not pages/ to avoid Streamlit auto-nav)

st.set_page_config(
    page_title="Graph Agent",
    page_icon="🕸️",
    layout="wide",
    initial_sidebar_state="expanded",
)

# -- Sidebar Navigation --
with st.sidebar:
    st.markdown("# 🕸️")
    st.markdown("## Graph Agent")
    st.caption("Reasoning traces and run reports")
    st.divider()
    page = st.radio(
        "Navigate",
        [
            "📊 Run Report",
            "🔎 Trace Explorer",
            "🗺️ Graph Overview",
        ],
        label_visibility="collapsed",
    )
    st.divider()
    st.session_state.run_dir = st.text_input("Run directory", st.session_state.get("run_dir", "runs/latest"))

# -- Page Router (imports from views/ directory) --
if page == "📊 Run Report":
    from views import run_report
    run_report.render()
elif page == "🔎 Trace Explorer":
    from views import trace_explorer
    trace_explorer.render()
elif page == "🗺️ Graph Overview":
    from views import graph_overview
    graph_overview.render()
