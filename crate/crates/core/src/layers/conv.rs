//! Graph convolutions: plain GCN and dynamic neighborhood aggregation (DNA).

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grouped::{check_grouping, GroupedWeight};
use crate::error::{config, contract, Result};
use crate::graph::{gather_aggregate, propagate, Graph};
use crate::tensor::{edge_history_attention, EdgeAttentionOptions, Tape, Var};

/// Pre-activation GCN layer: normalized neighborhood sum, then the grouped
/// projection `theta`.
pub fn gcn_conv<'t>(graph: &Arc<Graph>, h_prev: Var<'t>, theta: Var<'t>) -> Result<Var<'t>> {
    propagate(graph, h_prev)?.grouped_linear(theta)
}

/// Checks the head/group constraints of a DNA layer of width `hidden`.
pub fn check_dna_shape(hidden: usize, heads: usize, groups: usize) -> Result<()> {
    if heads == 0 || !hidden.is_multiple_of(heads) {
        return Err(config(format!("hidden size {hidden} not divisible by {heads} heads")));
    }
    check_grouping(groups, hidden, hidden)?;
    let (hi, lo) = (heads.max(groups), heads.min(groups));
    if hi % lo != 0 {
        return Err(config(format!(
            "max(groups, heads) = {hi} must be divisible by min(groups, heads) = {lo}"
        )));
    }
    Ok(())
}

/// Trainable state and shape of one DNA layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DnaLayerParams {
    pub theta_q: GroupedWeight,
    pub theta_k: GroupedWeight,
    pub theta_v: GroupedWeight,
    pub heads: usize,
    pub groups: usize,
    /// Attend to at most this many of the latest representations.
    pub window: Option<usize>,
    /// Slack softmax when set, standard softmax otherwise.
    pub slack: bool,
}

impl DnaLayerParams {
    pub fn glorot<R: Rng + ?Sized>(
        hidden: usize,
        heads: usize,
        groups: usize,
        window: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        check_dna_shape(hidden, heads, groups)?;
        Ok(Self {
            theta_q: GroupedWeight::glorot(groups, hidden, hidden, rng)?,
            theta_k: GroupedWeight::glorot(groups, hidden, hidden, rng)?,
            theta_v: GroupedWeight::glorot(groups, hidden, hidden, rng)?,
            heads,
            groups,
            window,
            slack: true,
        })
    }

    pub fn hidden(&self) -> usize {
        self.theta_q.in_dim()
    }

    /// Projection floats: `3 d^2 / g`.
    pub fn param_count(&self) -> usize {
        self.theta_q.param_count() + self.theta_k.param_count() + self.theta_v.param_count()
    }

    pub fn validate(&self) -> Result<()> {
        check_dna_shape(self.hidden(), self.heads, self.groups)?;
        for w in [&self.theta_q, &self.theta_k, &self.theta_v] {
            if w.groups() != self.groups || w.in_dim() != self.hidden() || w.out_dim() != self.hidden() {
                return Err(config("DNA projections disagree on shape or grouping"));
            }
        }
        if self.window == Some(0) {
            return Err(config("history window must be at least 1"));
        }
        Ok(())
    }

    /// Records the three projections on `tape`, as leaves when `trainable`.
    pub fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> [Var<'t>; 3] {
        let put = |w: &GroupedWeight| {
            if trainable {
                tape.leaf(w.blocks().clone())
            } else {
                tape.constant(w.blocks().clone())
            }
        };
        [put(&self.theta_q), put(&self.theta_k), put(&self.theta_v)]
    }
}

/// Attention weights captured from one DNA layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    /// Index of the representation this layer produced (the first DNA layer
    /// produces representation 2).
    pub layer: usize,
    pub heads: usize,
    /// Number of attended history positions.
    pub positions: usize,
    /// 1-based representation index of the oldest attended position.
    pub first_position: usize,
    /// Target node of every CSR entry.
    pub rows: Vec<usize>,
    /// Attended neighbor of every CSR entry.
    pub cols: Vec<usize>,
    /// Pre-dropout weights, `[entry, head, position]`.
    pub weights: Vec<f64>,
}

impl AttentionRecord {
    pub fn num_entries(&self) -> usize {
        self.rows.len()
    }

    pub fn weights_of(&self, entry: usize, head: usize) -> &[f64] {
        let base = (entry * self.heads + head) * self.positions;
        &self.weights[base..base + self.positions]
    }

    /// Mass not assigned to any position.
    pub fn residual(&self, entry: usize, head: usize) -> f64 {
        1.0 - self.weights_of(entry, head).iter().sum::<f64>()
    }
}

/// One DNA layer (pre-activation).
///
/// Every CSR entry `(v, w)`, self-loop included, lets the projected latest
/// representation of `v` attend over the projected representations of `w`
/// in `history` (oldest first, limited to the layer's window). Per-entry
/// outputs are then summed with the GCN coefficients, without any further
/// projection. `layer` labels the returned record.
#[allow(clippy::too_many_arguments)]
pub fn dna_conv<'t, R: Rng + ?Sized>(
    graph: &Arc<Graph>,
    history: &[Var<'t>],
    params: &DnaLayerParams,
    weights: &[Var<'t>; 3],
    attn_dropout: f64,
    layer: usize,
    rng: &mut R,
    training: bool,
) -> Result<(Var<'t>, AttentionRecord)> {
    let latest = *history.last().ok_or_else(|| contract("DNA layer run on an empty history"))?;
    params.validate()?;
    let window = params.window.unwrap_or(usize::MAX).min(history.len());
    let attended = &history[history.len() - window..];

    let [theta_q, theta_k, theta_v] = *weights;
    let query = latest.grouped_linear(theta_q)?;
    let keys = attended
        .iter()
        .map(|h| h.grouped_linear(theta_k))
        .collect::<Result<Vec<_>>>()?;
    let values = attended
        .iter()
        .map(|h| h.grouped_linear(theta_v))
        .collect::<Result<Vec<_>>>()?;
    let opts = EdgeAttentionOptions {
        heads: params.heads,
        slack: params.slack,
        dropout: attn_dropout,
        training,
    };
    let (per_entry, attn) = edge_history_attention(graph, query, &keys, &values, opts, rng)?;
    let out = gather_aggregate(graph, per_entry)?;
    let record = AttentionRecord {
        layer,
        heads: params.heads,
        positions: window,
        first_position: history.len() - window + 1,
        rows: graph.entry_rows(),
        cols: graph.col_idx().to_vec(),
        weights: attn,
    };
    Ok((out, record))
}
