//! Reference implementations shared by the integration tests. Everything
//! here works on plain nested vectors and never calls into the tape.

#![allow(dead_code)]

use std::collections::BTreeSet;

use dna_gnn::tensor::{Tape, Tensor, Var};
use dna_gnn::Result;
use rand::Rng;

pub type Matrix = Vec<Vec<f64>>;

pub fn to_matrix(t: &Tensor) -> Matrix {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Undirected neighbor sets with self-loops, built straight from an edge list.
pub fn neighbor_sets(n: usize, edges: &[(usize, usize)]) -> Vec<BTreeSet<usize>> {
    let mut sets: Vec<BTreeSet<usize>> = (0..n).map(|v| BTreeSet::from([v])).collect();
    for &(a, b) in edges {
        sets[a].insert(b);
        sets[b].insert(a);
    }
    sets
}

/// `1 / sqrt(deg(v) deg(w))` with self-loops counted in the degree.
pub fn gcn_coeff(sets: &[BTreeSet<usize>], v: usize, w: usize) -> f64 {
    1.0 / ((sets[v].len() * sets[w].len()) as f64).sqrt()
}

/// Dense expansion of `[g, c/g, d/g]` grouped blocks.
pub fn dense_from_blocks(blocks: &Tensor) -> Matrix {
    let (g, cg, dg) = (blocks.shape()[0], blocks.shape()[1], blocks.shape()[2]);
    let mut out = vec![vec![0.0; g * dg]; g * cg];
    for grp in 0..g {
        for k in 0..cg {
            for o in 0..dg {
                out[grp * cg + k][grp * dg + o] = blocks.data()[grp * cg * dg + k * dg + o];
            }
        }
    }
    out
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

pub fn softmax_ref(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Softmax with an extra logit fixed at zero that is dropped from the output.
pub fn slack_softmax_ref(x: &[f64]) -> Vec<f64> {
    let mut ext = x.to_vec();
    ext.push(0.0);
    let full = softmax_ref(&ext);
    full[..x.len()].to_vec()
}

/// Per-node, per-neighbor, per-head, per-timestep DNA layer.
///
/// `history[t][node][channel]`, oldest first; the latest entry supplies the
/// query. `window` keeps only the last `window` positions for keys/values.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_dna(
    n: usize,
    edges: &[(usize, usize)],
    history: &[Matrix],
    theta_q: &Matrix,
    theta_k: &Matrix,
    theta_v: &Matrix,
    heads: usize,
    slack: bool,
    window: Option<usize>,
) -> Matrix {
    let sets = neighbor_sets(n, edges);
    let d = theta_q[0].len();
    let dh = d / heads;
    let latest = history.last().unwrap();
    let start = history.len() - window.unwrap_or(history.len()).min(history.len());
    let attended = &history[start..];
    let project = |x: &[f64], theta: &Matrix| -> Vec<f64> {
        (0..d).map(|j| x.iter().zip(theta).map(|(a, row)| a * row[j]).sum()).collect()
    };
    let mut out = vec![vec![0.0; d]; n];
    for v in 0..n {
        let q = project(&latest[v], theta_q);
        for &w in &sets[v] {
            let c = gcn_coeff(&sets, v, w);
            let keys: Vec<Vec<f64>> = attended.iter().map(|h| project(&h[w], theta_k)).collect();
            let vals: Vec<Vec<f64>> = attended.iter().map(|h| project(&h[w], theta_v)).collect();
            for head in 0..heads {
                let lo = head * dh;
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|k| (lo..lo + dh).map(|j| q[j] * k[j]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let a = if slack { slack_softmax_ref(&scores) } else { softmax_ref(&scores) };
                for (t, val) in vals.iter().enumerate() {
                    for j in lo..lo + dh {
                        out[v][j] += c * a[t] * val[j];
                    }
                }
            }
        }
    }
    out
}

/// `sum_w C[v,w] (x[w] theta)` from the edge list.
pub fn brute_force_gcn(n: usize, edges: &[(usize, usize)], x: &Matrix, theta: &Matrix) -> Matrix {
    let sets = neighbor_sets(n, edges);
    let xt = matmul(x, theta);
    (0..n)
        .map(|v| {
            let mut row = vec![0.0; xt[0].len()];
            for &w in &sets[v] {
                let c = gcn_coeff(&sets, v, w);
                for (r, x) in row.iter_mut().zip(&xt[w]) {
                    *r += c * x;
                }
            }
            row
        })
        .collect()
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Random simple graph on `n` nodes, each pair present with probability `p`.
pub fn random_edges<R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen::<f64>() < p {
                edges.push((a, b));
            }
        }
    }
    edges
}

/// Largest `|tape - central difference| / max(1, |central difference|)` over
/// every coordinate of every input.
pub fn gradient_error<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&tape, &vars)?;
        let grads = tape.backward(root)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max((grad.data()[j] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Contracts `x` with a fixed tensor of random weights to get a scalar.
pub fn weighted_sum<'t>(x: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    let w = x.tape().constant(weights.clone());
    Ok(x.mul(w)?.sum())
}
