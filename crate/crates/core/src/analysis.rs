//! Influence scores and attention-weight statistics of trained models.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{contract, Result};
use crate::graph::Graph;
use crate::layers::{AttentionRecord, Model};
use crate::tensor::Tape;

/// Normalized influence of every node's input features on one node's final
/// representation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceDistribution {
    pub source: usize,
    /// `scores[w]`, summing to 1 unless every raw score is 0.
    pub scores: Vec<f64>,
    /// Sum of the raw (unnormalized) scores.
    pub total: f64,
}

/// `I_v(w)`: sum of absolute entries of the Jacobian of `v`'s representation
/// entering the classifier with respect to the raw features of `w`,
/// normalized over `w`. Dropout is disabled. One backward pass is run per
/// representation coordinate.
pub fn influence_scores(model: &Model, dataset: &Dataset, v: usize) -> Result<InfluenceDistribution> {
    let n = dataset.num_nodes();
    if v >= n {
        return Err(contract(format!("node {v} out of range for {n} nodes")));
    }
    let tape = Tape::new();
    let x = tape.leaf(dataset.features.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&tape, &dataset.graph, x, &mut rng, false, false)?;
    let width = out.representation.shape()[1];
    let f = dataset.num_features();
    let mut raw = vec![0.0; n];
    for j in 0..width {
        let coord = out.representation.select(v * width + j)?;
        let grads = tape.backward(coord)?;
        if let Some(g) = grads.get(x) {
            for (w, row) in g.data().chunks(f.max(1)).enumerate() {
                raw[w] += row.iter().map(|d| d.abs()).sum::<f64>();
            }
        }
    }
    let total: f64 = raw.iter().sum();
    let scores = if total > 0.0 { raw.iter().map(|r| r / total).collect() } else { raw };
    Ok(InfluenceDistribution { source: v, scores, total })
}

/// Order statistics of a sample; quartiles interpolate linearly between
/// order statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl Stats {
    /// `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            count: sorted.len(),
            min: sorted[0],
            q1: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            q3: quantile_sorted(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        })
    }
}

/// Quantile of a non-empty ascending sample at fraction `q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionStats {
    /// 1-based index of the attended representation.
    pub position: usize,
    pub weights: Stats,
}

/// Attention statistics of one DNA layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAttentionSummary {
    /// Index of the representation the layer produced.
    pub layer: usize,
    pub positions: Vec<PositionStats>,
    /// Mass left unassigned by the slack softmax.
    pub residual: Stats,
}

/// Per-layer, per-position statistics over every `(entry, head)` pair whose
/// target node is selected by `node_mask` (all nodes when `None`).
pub fn attention_summary(records: &[AttentionRecord], node_mask: Option<&[bool]>) -> Result<Vec<LayerAttentionSummary>> {
    if records.is_empty() {
        return Err(contract("attention summary over no records"));
    }
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let entries: Vec<usize> = (0..rec.num_entries())
            .filter(|&e| node_mask.is_none_or(|m| m.get(rec.rows[e]).copied().unwrap_or(false)))
            .collect();
        if entries.is_empty() {
            return Err(contract(format!("no attention entries selected in layer {}", rec.layer)));
        }
        let mut per_position = vec![Vec::with_capacity(entries.len() * rec.heads); rec.positions];
        let mut residual = Vec::with_capacity(entries.len() * rec.heads);
        for &e in &entries {
            for h in 0..rec.heads {
                for (p, &w) in rec.weights_of(e, h).iter().enumerate() {
                    per_position[p].push(w);
                }
                residual.push(rec.residual(e, h));
            }
        }
        out.push(LayerAttentionSummary {
            layer: rec.layer,
            positions: per_position
                .iter()
                .enumerate()
                .map(|(p, ws)| PositionStats {
                    position: rec.first_position + p,
                    weights: Stats::of(ws).expect("entries are non-empty"),
                })
                .collect(),
            residual: Stats::of(&residual).expect("entries are non-empty"),
        });
    }
    Ok(out)
}

/// Attention records of one evaluation-mode forward pass over the dataset.
pub fn attention_records(model: &Model, dataset: &Dataset) -> Result<Vec<AttentionRecord>> {
    let tape = Tape::new();
    let x = tape.constant(dataset.features.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(model.forward(&tape, &dataset.graph, x, &mut rng, false, false)?.records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgraphNode {
    pub id: usize,
    pub hop: usize,
    pub score: f64,
}

/// Neighborhood of a node with influence scores, for external plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgraphExport {
    pub center: usize,
    pub hops: usize,
    /// Breadth-first order: by hop, then by id.
    pub nodes: Vec<SubgraphNode>,
    /// Induced undirected edges `(a, b)` with `a < b`, self-loops excluded.
    pub edges: Vec<(usize, usize)>,
}

/// Induced subgraph of every node within `hops` of `scores.source`.
pub fn export_subgraph_influence(graph: &Graph, hops: usize, scores: &InfluenceDistribution) -> Result<SubgraphExport> {
    let center = scores.source;
    if center >= graph.num_nodes() || scores.scores.len() != graph.num_nodes() {
        return Err(contract(format!(
            "influence for node {center} over {} nodes does not fit a graph of {} nodes",
            scores.scores.len(),
            graph.num_nodes()
        )));
    }
    let dist = graph.hop_distances(center, hops);
    let mut nodes: Vec<SubgraphNode> = dist
        .iter()
        .enumerate()
        .filter_map(|(id, d)| {
            d.map(|hop| SubgraphNode {
                id,
                hop,
                score: scores.scores[id],
            })
        })
        .collect();
    nodes.sort_by_key(|n| (n.hop, n.id));
    let edges = graph
        .undirected_edges()
        .into_iter()
        .filter(|&(a, b)| dist[a].is_some() && dist[b].is_some())
        .collect();
    Ok(SubgraphExport {
        center,
        hops,
        nodes,
        edges,
    })
}

/// Writes `value` as pretty JSON with sorted object keys.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let sorted: serde_json::Value = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&sorted)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
