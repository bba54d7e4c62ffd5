import plotly.express as px
import streamlit as st

from utils.errors import GraphAgentError
from utils.graph_core import degree_stats, edge_type_counts, graph_summary, read_graph


@st.cache_data(ttl=300, show_spinner="Loading graph...")
def _load(nodes: str, edges: str):
    g = read_graph(nodes, edges)
    return graph_summary(g, degree_stats(g)), edge_type_counts(g), len(g.nodes), len(g.edges)


def render():
    st.header("🗺️ Graph Overview")
    c1, c2 = st.columns(2)
    nodes = c1.text_input("Node file (JSON-lines)", st.session_state.get("nodes_path", ""))
    edges = c2.text_input("Edge file (JSON-lines)", st.session_state.get("edges_path", ""))
    if not nodes or not edges:
        st.info("Enter a node file and an edge file.")
        return
    st.session_state.nodes_path, st.session_state.edges_path = nodes, edges
    try:
        summary, etypes, n_nodes, n_edges = _load(nodes, edges)
    except (GraphAgentError, OSError) as e:
        st.error(str(e))
        return

    m1, m2, m3 = st.columns(3)
    m1.metric("Nodes", f"{n_nodes:,}")
    m2.metric("Edges", f"{n_edges:,}")
    m3.metric("Node types", len(summary))
    st.divider()

    st.markdown("#### Node types")
    st.dataframe(summary, hide_index=True, use_container_width=True)
    if not summary.empty:
        fig = px.bar(summary, x="node_type", y="avg_degree", hover_data=["nodes"])
        fig.update_layout(height=320, margin=dict(l=10, r=10, t=10, b=10))
        st.plotly_chart(fig, use_container_width=True)

    st.markdown("#### Edge types")
    st.dataframe(etypes.rename_axis("edge_type").reset_index(name="edges"), hide_index=True,
                 use_container_width=True)
