//! CSR graph with symmetric GCN normalization, plus seeded node splits.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config, contract, Error, Result};
use crate::tensor::{Op, Tensor, Var};

/// Undirected graph in CSR form. Every node carries exactly one self-loop
/// and column indices within a row are sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    edge_coeff: Vec<f64>,
}

impl Graph {
    /// Symmetrizes, deduplicates, strips self-loops, re-adds one self-loop per
    /// node and fills the normalization coefficients.
    pub fn build(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for (i, &(src, dst)) in edges.iter().enumerate() {
            if src >= num_nodes || dst >= num_nodes {
                return Err(Error::Validation(format!(
                    "edge {i} ({src}, {dst}) references a node outside 0..{num_nodes}"
                )));
            }
            if src != dst {
                adj[src].push(dst);
                adj[dst].push(src);
            }
        }
        let mut row_ptr = Vec::with_capacity(num_nodes + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for (v, mut nbrs) in adj.into_iter().enumerate() {
            nbrs.push(v);
            nbrs.sort_unstable();
            nbrs.dedup();
            col_idx.extend(nbrs);
            row_ptr.push(col_idx.len());
        }
        let mut graph = Self {
            num_nodes,
            row_ptr,
            col_idx,
            edge_coeff: Vec::new(),
        };
        graph.edge_coeff = graph.gcn_norm()?;
        Ok(graph)
    }

    /// `C[v,w] = 1 / sqrt(deg(v) deg(w))`, degrees counting the self-loop.
    pub fn gcn_norm(&self) -> Result<Vec<f64>> {
        let mut coeff = Vec::with_capacity(self.col_idx.len());
        for v in 0..self.num_nodes {
            if self.neighbors(v).binary_search(&v).is_err() {
                return Err(contract(format!("node {v} has no self-loop")));
            }
            let dv = self.degree(v) as f64;
            for &w in self.neighbors(v) {
                let dw = self.degree(w) as f64;
                coeff.push(1.0 / (dv * dw).sqrt());
            }
        }
        Ok(coeff)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of stored CSR entries, self-loops included.
    pub fn num_entries(&self) -> usize {
        self.col_idx.len()
    }

    /// Undirected pairs excluding self-loops.
    pub fn num_undirected_edges(&self) -> usize {
        (self.col_idx.len() - self.num_nodes) / 2
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn edge_coeff(&self) -> &[f64] {
        &self.edge_coeff
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[v]..self.row_ptr[v + 1]]
    }

    pub fn coefficients(&self, v: usize) -> &[f64] {
        &self.edge_coeff[self.row_ptr[v]..self.row_ptr[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.row_ptr[v + 1] - self.row_ptr[v]
    }

    /// CSR entry index of `(v, w)`.
    pub fn entry(&self, v: usize, w: usize) -> Option<usize> {
        self.neighbors(v)
            .binary_search(&w)
            .ok()
            .map(|i| self.row_ptr[v] + i)
    }

    /// Row (source node) of every CSR entry.
    pub fn entry_rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.col_idx.len());
        for v in 0..self.num_nodes {
            rows.extend(std::iter::repeat_n(v, self.degree(v)));
        }
        rows
    }

    /// Undirected edges with `src < dst`, lexicographically sorted.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.num_undirected_edges());
        for v in 0..self.num_nodes {
            for &w in self.neighbors(v) {
                if v < w {
                    edges.push((v, w));
                }
            }
        }
        edges
    }

    /// Hop distance from `source`, `None` beyond `max_hops` or unreachable.
    pub fn hop_distances(&self, source: usize, max_hops: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_nodes];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(v) = queue.pop_front() {
            let d = dist[v].unwrap_or(0);
            if d == max_hops {
                continue;
            }
            for &w in self.neighbors(v) {
                if dist[w].is_none() {
                    dist[w] = Some(d + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Applies `out[v] = sum_w C[v,w] x[w]` row by row on plain slices.
    pub(crate) fn propagate_rows(&self, x: &[f64], width: usize) -> Vec<f64> {
        use rayon::prelude::*;
        let mut out = vec![0.0; self.num_nodes * width];
        if width == 0 {
            return out;
        }
        out.par_chunks_mut(width).enumerate().for_each(|(v, row)| {
            for (&w, &c) in self.neighbors(v).iter().zip(self.coefficients(v)) {
                for (o, &xv) in row.iter_mut().zip(&x[w * width..(w + 1) * width]) {
                    *o += c * xv;
                }
            }
        });
        out
    }
}

/// Normalized neighborhood sum over node rows: `out[v] = sum_w C[v,w] x[w]`.
pub fn propagate<'t>(graph: &Arc<Graph>, x: Var<'t>) -> Result<Var<'t>> {
    let out = {
        let xv = x.value();
        if xv.ndim() != 2 || xv.shape()[0] != graph.num_nodes() {
            return Err(Error::Shape {
                op: "propagate",
                lhs: xv.shape().to_vec(),
                rhs: vec![graph.num_nodes()],
            });
        }
        let width = xv.shape()[1];
        Tensor::from_parts(xv.shape().to_vec(), graph.propagate_rows(xv.data(), width))
    };
    let rg = x.requires_grad();
    Ok(x.tape.push(
        out,
        Op::Propagate {
            x: x.id,
            graph: Arc::clone(graph),
        },
        rg,
    ))
}

/// Combines per-entry vectors (CSR order) into node rows:
/// `out[v] = sum over entries (v,w) of C[v,w] * edges[(v,w)]`.
pub fn gather_aggregate<'t>(graph: &Arc<Graph>, per_edge: Var<'t>) -> Result<Var<'t>> {
    let out = {
        let ev = per_edge.value();
        if ev.ndim() != 2 || ev.shape()[0] != graph.num_entries() {
            return Err(contract(format!(
                "gather_aggregate expects [{}, d] per-entry vectors, got {:?}",
                graph.num_entries(),
                ev.shape()
            )));
        }
        let width = ev.shape()[1];
        let mut out = vec![0.0; graph.num_nodes() * width];
        for v in 0..graph.num_nodes() {
            let row = &mut out[v * width..(v + 1) * width];
            for e in graph.row_ptr()[v]..graph.row_ptr()[v + 1] {
                let c = graph.edge_coeff()[e];
                for (o, &x) in row.iter_mut().zip(ev.row(e)) {
                    *o += c * x;
                }
            }
        }
        Tensor::from_parts(vec![graph.num_nodes(), width], out)
    };
    let rg = per_edge.requires_grad();
    Ok(per_edge.tape.push(
        out,
        Op::GatherAggregate {
            edges: per_edge.id,
            graph: Arc::clone(graph),
        },
        rg,
    ))
}

/// Disjoint train/validation/test node masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMasks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl SplitMasks {
    pub fn sizes(&self) -> (usize, usize, usize) {
        let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
        (count(&self.train), count(&self.val), count(&self.test))
    }

    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }
}

/// Default node split ratios: train, validation, test.
pub const DEFAULT_SPLIT: [f64; 3] = [0.2, 0.2, 0.6];

/// Seeded shuffle of node ids, partitioned by largest-remainder counts.
pub fn random_split(num_nodes: usize, ratios: [f64; 3], seed: u64) -> Result<SplitMasks> {
    if num_nodes < 3 {
        return Err(config(format!("cannot split {num_nodes} nodes into three parts")));
    }
    if ratios.iter().any(|&r| r.is_nan() || r <= 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(config(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let counts = largest_remainder(num_nodes, &ratios);
    let mut order: Vec<usize> = (0..num_nodes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut masks = SplitMasks {
        train: vec![false; num_nodes],
        val: vec![false; num_nodes],
        test: vec![false; num_nodes],
    };
    let (train, rest) = order.split_at(counts[0]);
    let (val, test) = rest.split_at(counts[1]);
    for &v in train {
        masks.train[v] = true;
    }
    for &v in val {
        masks.val[v] = true;
    }
    for &v in test {
        masks.test[v] = true;
    }
    Ok(masks)
}

/// Integer apportionment of `total` by `ratios`; leftover units go to the
/// largest fractional parts, earlier parts winning ties.
fn largest_remainder(total: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}
