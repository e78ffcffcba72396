//! Edge-aware message passing over a retrieved knowledge subgraph.
//!
//! Each layer updates node `k` as
//! `theta_k + MLP((1 + eps) * theta_k + sum_{u in N(k)} (theta_u + a_{k,u}))`,
//! taken literally: the neighbor term adds the edge vector to the neighbor
//! vector with no inner nonlinearity, and the whole layer is residual.
//! `N(k)` contains the sources of directed edges arriving at `k`; an
//! `undirected` graph preparation adds reverse edges instead of changing the
//! aggregation.

use ndarray::Array2;

use crate::autodiff::{apply_dropout, DropoutState, Tape, Var};
use crate::embeddings::EMBED_DIM;
use crate::error::{Error, Result};
use crate::kg::Mhkg;

/// A subgraph lowered to dense features and an index-based edge list.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    /// `(|V|, 300)` raw node embeddings.
    pub node_feats: Array2<f64>,
    /// `(|E|, 300)` raw edge embeddings.
    pub edge_feats: Array2<f64>,
    /// Directed `(source, target)` index pairs aligned with `edge_feats`.
    pub edges: Vec<(usize, usize)>,
    pub node_names: Vec<String>,
}

impl PreparedGraph {
    /// Lower a graph for message passing. With `undirected`, every edge also
    /// appears reversed, sharing the forward edge's embedding.
    pub fn from_mhkg(kg: &Mhkg, undirected: bool) -> Self {
        let node_index: std::collections::HashMap<&str, usize> = kg
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut edges = Vec::new();
        let mut rows: Vec<usize> = Vec::new();
        for (e, t) in kg.edges.iter().enumerate() {
            let s = node_index[t.source.as_str()];
            let d = node_index[t.target.as_str()];
            edges.push((s, d));
            rows.push(e);
            if undirected {
                edges.push((d, s));
                rows.push(e);
            }
        }
        let mut edge_feats = Array2::zeros((edges.len(), EMBED_DIM));
        for (i, &r) in rows.iter().enumerate() {
            edge_feats.row_mut(i).assign(&kg.edge_embeddings.row(r));
        }
        Self {
            node_feats: crate::model::scale_features(&kg.node_embeddings),
            edge_feats: crate::model::scale_features(&edge_feats),
            edges,
            node_names: kg.nodes.clone(),
        }
    }
}

/// One message-passing layer: learnable scalar `eps` plus a two-affine MLP
/// with GELU between, all of width `d`.
pub struct GineLayerVars {
    pub epsilon: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Full graph encoder: shared `300 -> d` input projection for node and edge
/// embeddings, then `n` stacked layers.
pub struct GineVars {
    pub proj_w: Var,
    pub proj_b: Var,
    pub layers: Vec<GineLayerVars>,
}

/// Apply one layer to projected node features.
///
/// Nodes with no incoming edge use a zero aggregate. Invalid edge indices
/// are a caller bug and error out rather than being silently dropped.
pub fn gine_layer(
    tape: &mut Tape,
    node_feats: Var,
    edges: &[(usize, usize)],
    edge_feats: Var,
    params: &GineLayerVars,
    dropout: &mut Option<DropoutState>,
) -> Result<Var> {
    let n_nodes = tape.value(node_feats).nrows();
    let n_edges = tape.value(edge_feats).nrows();
    if edges.len() != n_edges {
        return Err(Error::Shape(format!(
            "edge list length {} != edge feature rows {n_edges}",
            edges.len()
        )));
    }
    for &(s, t) in edges {
        if s >= n_nodes || t >= n_nodes {
            return Err(Error::Shape(format!(
                "edge ({s}, {t}) out of range for {n_nodes} nodes"
            )));
        }
    }

    // Neighbor sums as constant incidence matrices: S[k, u] counts edges
    // u -> k, E_in[k, e] marks edges arriving at k.
    let mut neighbor = Array2::zeros((n_nodes, n_nodes));
    let mut incoming = Array2::zeros((n_nodes, n_edges));
    for (e, &(s, t)) in edges.iter().enumerate() {
        neighbor[[t, s]] += 1.0;
        incoming[[t, e]] = 1.0;
    }
    let neighbor = tape.leaf(neighbor);
    let incoming = tape.leaf(incoming);

    let node_msgs = tape.matmul(neighbor, node_feats);
    let edge_msgs = tape.matmul(incoming, edge_feats);
    let agg = tape.add(node_msgs, edge_msgs);

    let ones = tape.leaf(Array2::ones((n_nodes, 1)));
    let eps_col = tape.matmul(ones, params.epsilon);
    let scaled_self = tape.mul_col(node_feats, eps_col);
    let self_term = tape.add(node_feats, scaled_self);
    let pre = tape.add(self_term, agg);

    let h = tape.matmul(pre, params.w1);
    let h = tape.add_row(h, params.b1);
    let h = tape.gelu(h);
    let h = apply_dropout(tape, h, dropout);
    let h = tape.matmul(h, params.w2);
    let mlp_out = tape.add_row(h, params.b2);

    Ok(tape.add(node_feats, mlp_out))
}

/// Project raw 300-d node/edge embeddings to width `d` and run all layers,
/// returning the final `(|V|, d)` node matrix.
pub fn encode_kg(
    tape: &mut Tape,
    graph: &PreparedGraph,
    params: &GineVars,
    dropout: &mut Option<DropoutState>,
) -> Result<Var> {
    let raw_nodes = tape.leaf(graph.node_feats.clone());
    let raw_edges = tape.leaf(graph.edge_feats.clone());
    let nodes = tape.matmul(raw_nodes, params.proj_w);
    let mut nodes = tape.add_row(nodes, params.proj_b);
    let edges_projected = if graph.edges.is_empty() {
        let d = tape.value(params.proj_w).ncols();
        tape.leaf(Array2::zeros((0, d)))
    } else {
        let e = tape.matmul(raw_edges, params.proj_w);
        tape.add_row(e, params.proj_b)
    };
    for layer in &params.layers {
        nodes = gine_layer(tape, nodes, &graph.edges, edges_projected, layer, dropout)?;
    }
    Ok(nodes)
}
