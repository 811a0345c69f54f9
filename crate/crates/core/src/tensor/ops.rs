use std::sync::Arc;

use rand::Rng;

use super::kernels;
use super::tape::{GradAccumulator, NodeId, Op};
use super::{Tensor, Var};
use crate::error::{config, contract, Error, Result};
use crate::graph::Graph;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn same_tape(a: &Var<'_>, b: &Var<'_>) {
    assert!(std::ptr::eq(a.tape, b.tape), "operands recorded on different tapes");
}

// Fallible shape checks rule out the operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn unary(self, out: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(out, op, rg)
    }

    fn binary(self, other: Var<'t>, out: Tensor, op: Op) -> Var<'t> {
        same_tape(&self, &other);
        let rg = self.tape.requires_grad(&[self.id, other.id]);
        self.tape.push(out, op, rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
        };
        Ok(self.binary(other, out, Op::MatMul { a: self.id, b: other.id }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            a.expect_rank(2, "transpose")?;
            let (r, c) = (a.shape()[0], a.shape()[1]);
            Tensor::from_parts(vec![c, r], kernels::transpose(a.data(), r, c))
        };
        Ok(self.unary(out, Op::Transpose { a: self.id }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().clone().reshaped(shape)?;
        Ok(self.unary(out, Op::Reshape { a: self.id }))
    }

    /// Block-diagonal projection of `x[n, c]` by `w[g, c/g, d/g]` into `[n, d]`.
    pub fn grouped_linear(self, weight: Var<'t>) -> Result<Var<'t>> {
        let (out, groups) = {
            let (x, w) = (self.value(), weight.value());
            if x.ndim() != 2 || w.ndim() != 3 {
                return Err(shape_err("grouped_linear", x.shape(), w.shape()));
            }
            let (g, cg, dg) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let (n, c) = (x.shape()[0], x.shape()[1]);
            if g == 0 || c != g * cg {
                return Err(shape_err("grouped_linear", x.shape(), w.shape()));
            }
            let d = g * dg;
            (
                Tensor::from_parts(vec![n, d], kernels::grouped_forward(x.data(), w.data(), n, c, d, g)),
                g,
            )
        };
        Ok(self.binary(
            weight,
            out,
            Op::GroupedLinear {
                x: self.id,
                w: weight.id,
                groups,
            },
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(shape_err("add", a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        Ok(self.binary(other, out, Op::Add { a: self.id, b: other.id }))
    }

    /// Adds `bias[d]` to every row of `self[n, d]`.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (x, b) = (self.value(), bias.value());
            if x.ndim() != 2 || b.ndim() != 1 || x.shape()[1] != b.shape()[0] {
                return Err(shape_err("add_bias", x.shape(), b.shape()));
            }
            let d = b.numel();
            let mut data = x.data().to_vec();
            if d > 0 {
                for row in data.chunks_mut(d) {
                    for (o, bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        Ok(self.binary(bias, out, Op::AddBias { x: self.id, bias: bias.id }))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(shape_err("mul", a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        Ok(self.binary(other, out, Op::Mul { a: self.id, b: other.id }))
    }

    pub fn mul_scalar(self, factor: f64) -> Var<'t> {
        let out = {
            let a = self.value();
            Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x * factor).collect())
        };
        self.unary(out, Op::Scale { a: self.id, factor })
    }

    pub fn relu(self) -> Var<'t> {
        let out = {
            let a = self.value();
            Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| x.max(0.0)).collect())
        };
        self.unary(out, Op::Relu { a: self.id })
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`.
    /// Evaluation mode, and `p == 0`, return `self` unchanged.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, rng: &mut R, training: bool) -> Result<Var<'t>> {
        check_dropout_rate(p)?;
        if !training || p == 0.0 {
            return Ok(self);
        }
        let mask = dropout_mask(self.value().numel(), p, rng);
        Ok(self.mask_mul(mask))
    }

    pub(crate) fn mask_mul(self, mask: Vec<f64>) -> Var<'t> {
        let out = {
            let a = self.value();
            let data = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.unary(out, Op::MaskMul { a: self.id, mask })
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Var<'t> {
        self.softmax_impl(false)
    }

    /// `exp(x_i) / (1 + sum_j exp(x_j))` along the last axis: a softmax with an
    /// extra logit pinned at zero. Rows sum to less than one; the remainder is
    /// the mass assigned to attending to nothing.
    pub fn slack_softmax(self) -> Var<'t> {
        self.softmax_impl(true)
    }

    fn softmax_impl(self, slack: bool) -> Var<'t> {
        let out = {
            let a = self.value();
            let mut data = a.data().to_vec();
            kernels::softmax_rows(&mut data, a.last_dim(), slack);
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.unary(out, Op::Softmax { a: self.id })
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::Sum { a: self.id })
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().data().iter().map(|x| x * x).sum());
        self.unary(out, Op::SumSquares { a: self.id })
    }

    /// Scalar view of one flat entry.
    pub fn select(self, index: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let v = *a
                .data()
                .get(index)
                .ok_or_else(|| contract(format!("index {index} out of range for {:?}", a.shape())))?;
            Tensor::scalar(v)
        };
        Ok(self.unary(out, Op::Select { a: self.id, index }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(self)` over the
    /// rows selected by `mask`.
    pub fn log_softmax_nll(self, labels: &[usize], mask: &[bool]) -> Result<Var<'t>> {
        let (out, probs, rows) = {
            let logits = self.value();
            logits.expect_rank(2, "log_softmax_nll")?;
            let (n, c) = (logits.shape()[0], logits.shape()[1]);
            if labels.len() != n || mask.len() != n {
                return Err(shape_err("log_softmax_nll", logits.shape(), &[labels.len(), mask.len()]));
            }
            let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
            if rows.is_empty() {
                return Err(contract("log_softmax_nll over an empty mask"));
            }
            let mut probs = Vec::with_capacity(rows.len() * c);
            let mut total = 0.0;
            for &i in &rows {
                let y = labels[i];
                if y >= c {
                    return Err(contract(format!("label {y} of node {i} outside 0..{c}")));
                }
                let row = logits.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
                probs.extend(row.iter().map(|x| (x - lse).exp()));
            }
            (Tensor::scalar(total / rows.len() as f64), probs, rows)
        };
        Ok(self.unary(
            out,
            Op::Nll {
                logits: self.id,
                probs,
                labels: labels.to_vec(),
                rows,
            },
        ))
    }
}

pub(crate) fn check_dropout_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(config(format!("dropout rate {p} outside [0, 1)")));
    }
    Ok(())
}

pub(crate) fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// Concatenates matrices with equal row counts along the last axis.
pub fn concat_last_axis<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| contract("concat of an empty list"))?;
    let tape = first.tape;
    let out = {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let lead = values[0].shape()[..values[0].ndim() - 1].to_vec();
        for v in &values {
            if v.ndim() != lead.len() + 1 || v.shape()[..lead.len()] != lead[..] {
                return Err(shape_err("concat_last_axis", values[0].shape(), v.shape()));
            }
        }
        let rows = values[0].outer_len();
        let total: usize = values.iter().map(|v| v.last_dim()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        Tensor::from_parts(shape, data)
    };
    let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
    let rg = tape.requires_grad(&ids);
    Ok(tape.push(out, Op::Concat { parts: ids }, rg))
}

/// Elementwise maximum over equally shaped tensors; ties go to the earliest.
pub fn max_of<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| contract("max over an empty list"))?;
    let tape = first.tape;
    let (out, argmax) = {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let shape = values[0].shape().to_vec();
        for v in &values {
            if v.shape() != &shape[..] {
                return Err(shape_err("max_of", &shape, v.shape()));
            }
        }
        let mut data = values[0].data().to_vec();
        let mut argmax = vec![0u32; data.len()];
        for (k, v) in values.iter().enumerate().skip(1) {
            for ((best, arg), &x) in data.iter_mut().zip(argmax.iter_mut()).zip(v.data()) {
                if x > *best {
                    *best = x;
                    *arg = k as u32;
                }
            }
        }
        (Tensor::from_parts(shape, data), argmax)
    };
    let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
    let rg = tape.requires_grad(&ids);
    Ok(tape.push(out, Op::MaxOf { parts: ids, argmax }, rg))
}

/// `Attention(q, K, V) = norm(q K^T / sqrt(d)) V` for a single query, where
/// `norm` is the slack softmax when `slack` is set and the standard softmax
/// otherwise.
///
/// An empty key set is an error for the standard softmax; with slack every
/// bit of mass goes to the implicit null logit and the output is zero.
pub fn scaled_dot_attention<'t>(q: Var<'t>, keys: Var<'t>, values: Var<'t>, slack: bool) -> Result<Var<'t>> {
    let (d, n) = {
        let (qv, kv, vv) = (q.value(), keys.value(), values.value());
        qv.expect_rank(1, "scaled_dot_attention")?;
        kv.expect_rank(2, "scaled_dot_attention")?;
        vv.expect_rank(2, "scaled_dot_attention")?;
        let d = qv.shape()[0];
        if kv.shape()[1] != d || vv.shape()[1] != d || kv.shape()[0] != vv.shape()[0] {
            return Err(shape_err("scaled_dot_attention", kv.shape(), vv.shape()));
        }
        (d, kv.shape()[0])
    };
    if n == 0 {
        if !slack {
            return Err(contract("attention over an empty key set"));
        }
        // Keeps the result connected to the tape with a zero gradient.
        return Ok(q.mul_scalar(0.0));
    }
    let scores = q
        .reshape(&[1, d])?
        .matmul(keys.transpose()?)?
        .mul_scalar(1.0 / (d as f64).sqrt());
    let weights = if slack { scores.slack_softmax() } else { scores.softmax() };
    weights.matmul(values)?.reshape(&[d])
}

/// State kept by [`edge_history_attention`] for its backward pass.
pub(crate) struct EdgeAttentionSaved {
    pub(crate) query: NodeId,
    pub(crate) keys: Vec<NodeId>,
    pub(crate) values: Vec<NodeId>,
    pub(crate) graph: Arc<Graph>,
    pub(crate) heads: usize,
    /// Normalized weights before dropout, laid out `[entry, head, position]`.
    pub(crate) weights: Vec<f64>,
    pub(crate) dropout: Option<Vec<f64>>,
}

/// Options for [`edge_history_attention`].
#[derive(Clone, Copy, Debug)]
pub struct EdgeAttentionOptions {
    pub heads: usize,
    pub slack: bool,
    pub dropout: f64,
    pub training: bool,
}

/// Multi-head attention for every CSR entry `(v, w)`: the query row of `v`
/// attends over the key rows of `w` at each history position, and mixes the
/// matching value rows. Returns per-entry outputs `[E, d]` and the attention
/// weights before dropout, laid out `[entry, head, position]`.
pub fn edge_history_attention<'t, R: Rng + ?Sized>(
    graph: &Arc<Graph>,
    query: Var<'t>,
    keys: &[Var<'t>],
    values: &[Var<'t>],
    opts: EdgeAttentionOptions,
    rng: &mut R,
) -> Result<(Var<'t>, Vec<f64>)> {
    check_dropout_rate(opts.dropout)?;
    let positions = keys.len();
    if positions == 0 || values.len() != positions {
        return Err(contract(format!(
            "edge attention needs a non-empty history with matching keys and values ({} keys, {} values)",
            positions,
            values.len()
        )));
    }
    let tape = query.tape;
    let n = graph.num_nodes();
    let (out, weights, dropout) = {
        let q = query.value();
        let d = q.last_dim();
        if q.shape() != [n, d] {
            return Err(shape_err("edge_history_attention", q.shape(), &[n, d]));
        }
        if opts.heads == 0 || !d.is_multiple_of(opts.heads) {
            return Err(config(format!("hidden size {d} not divisible by {} heads", opts.heads)));
        }
        let ks: Vec<_> = keys.iter().map(|k| k.value()).collect();
        let vs: Vec<_> = values.iter().map(|v| v.value()).collect();
        for t in ks.iter().chain(vs.iter()) {
            if t.shape() != q.shape() {
                return Err(shape_err("edge_history_attention", q.shape(), t.shape()));
            }
        }
        let heads = opts.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let entries = graph.num_entries();
        let mut weights = vec![0.0; entries * heads * positions];
        let mut out = vec![0.0; entries * d];
        let mut e = 0;
        for v in 0..n {
            let qrow = q.row(v);
            for &w in graph.neighbors(v) {
                for h in 0..heads {
                    let span = h * dh..(h + 1) * dh;
                    let wslot = &mut weights[(e * heads + h) * positions..(e * heads + h + 1) * positions];
                    for (s, k) in ks.iter().enumerate() {
                        let krow = &k.row(w)[span.clone()];
                        wslot[s] = scale * qrow[span.clone()].iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    kernels::softmax_in_place(wslot, opts.slack);
                }
                e += 1;
            }
        }
        let dropout = (opts.training && opts.dropout > 0.0)
            .then(|| dropout_mask(weights.len(), opts.dropout, rng));
        for (e, &w) in graph.col_idx().iter().enumerate() {
            let orow = &mut out[e * d..(e + 1) * d];
            for h in 0..heads {
                let base = (e * heads + h) * positions;
                for (s, vt) in vs.iter().enumerate() {
                    let mut a = weights[base + s];
                    if let Some(mask) = &dropout {
                        a *= mask[base + s];
                    }
                    if a == 0.0 {
                        continue;
                    }
                    let vrow = &vt.row(w)[h * dh..(h + 1) * dh];
                    for (o, &x) in orow[h * dh..(h + 1) * dh].iter_mut().zip(vrow) {
                        *o += a * x;
                    }
                }
            }
        }
        (Tensor::from_parts(vec![entries, d], out), weights, dropout)
    };
    let mut ids = vec![query.id];
    ids.extend(keys.iter().map(|k| k.id));
    ids.extend(values.iter().map(|v| v.id));
    let rg = tape.requires_grad(&ids);
    let saved = EdgeAttentionSaved {
        query: query.id,
        keys: keys.iter().map(|k| k.id).collect(),
        values: values.iter().map(|v| v.id).collect(),
        graph: Arc::clone(graph),
        heads: opts.heads,
        weights: weights.clone(),
        dropout,
    };
    Ok((tape.push(out, Op::EdgeAttention(Box::new(saved)), rg), weights))
}

pub(crate) fn backward(op: &Op, out: &Tensor, g: &[f64], acc: &mut GradAccumulator<'_>) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (av, bv) = (acc.value(*a), acc.value(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if acc.wants(*a) {
                let bt = kernels::transpose(bv.data(), k, n);
                let da = kernels::matmul(g, &bt, m, n, k);
                acc.add(*a, &da);
            }
            if acc.wants(*b) {
                let at = kernels::transpose(av.data(), m, k);
                let db = kernels::matmul(&at, g, k, m, n);
                acc.add(*b, &db);
            }
        }
        Op::Transpose { a } => {
            let shape = out.shape();
            let ga = kernels::transpose(g, shape[0], shape[1]);
            acc.add(*a, &ga);
        }
        Op::Reshape { a } => acc.add(*a, g),
        Op::Add { a, b } => {
            acc.add(*a, g);
            acc.add(*b, g);
        }
        Op::AddBias { x, bias } => {
            acc.add(*x, g);
            let d = acc.value(*bias).numel();
            if d > 0 {
                acc.with_grad(*bias, |buf| {
                    for row in g.chunks(d) {
                        for (b, r) in buf.iter_mut().zip(row) {
                            *b += r;
                        }
                    }
                });
            }
        }
        Op::GroupedLinear { x, w, groups } => {
            let (xv, wv) = (acc.value(*x), acc.value(*w));
            let (n, c) = (xv.shape()[0], xv.shape()[1]);
            let d = out.shape()[1];
            if acc.wants(*x) {
                let dx = kernels::grouped_backward_input(g, wv.data(), n, c, d, *groups);
                acc.add(*x, &dx);
            }
            if acc.wants(*w) {
                let dw = kernels::grouped_backward_weight(xv.data(), g, n, c, d, *groups);
                acc.add(*w, &dw);
            }
        }
        Op::Mul { a, b } => {
            if acc.wants(*a) {
                let da: Vec<f64> = g.iter().zip(acc.value(*b).data()).map(|(x, y)| x * y).collect();
                acc.add(*a, &da);
            }
            if acc.wants(*b) {
                let db: Vec<f64> = g.iter().zip(acc.value(*a).data()).map(|(x, y)| x * y).collect();
                acc.add(*b, &db);
            }
        }
        Op::Scale { a, factor } => {
            let da: Vec<f64> = g.iter().map(|x| x * factor).collect();
            acc.add(*a, &da);
        }
        Op::Relu { a } => {
            let da: Vec<f64> = g
                .iter()
                .zip(out.data())
                .map(|(&gi, &y)| if y > 0.0 { gi } else { 0.0 })
                .collect();
            acc.add(*a, &da);
        }
        Op::MaskMul { a, mask } => {
            let da: Vec<f64> = g.iter().zip(mask).map(|(x, m)| x * m).collect();
            acc.add(*a, &da);
        }
        Op::Softmax { a } => {
            let width = out.last_dim();
            if width == 0 {
                return;
            }
            acc.with_grad(*a, |buf| {
                for ((y, dy), dx) in out.data().chunks(width).zip(g.chunks(width)).zip(buf.chunks_mut(width)) {
                    kernels::softmax_vjp(y, dy, dx);
                }
            });
        }
        Op::Concat { parts } => {
            let widths: Vec<usize> = parts.iter().map(|&p| acc.value(p).last_dim()).collect();
            let total: usize = widths.iter().sum();
            let rows = out.outer_len();
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                if acc.wants(p) {
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    acc.add(p, &gp);
                }
                offset += w;
            }
        }
        Op::MaxOf { parts, argmax } => {
            for (k, &p) in parts.iter().enumerate() {
                acc.with_grad(p, |buf| {
                    for ((b, &arg), &gi) in buf.iter_mut().zip(argmax).zip(g) {
                        if arg as usize == k {
                            *b += gi;
                        }
                    }
                });
            }
        }
        Op::Sum { a } => {
            let g0 = g[0];
            acc.with_grad(*a, |buf| buf.iter_mut().for_each(|b| *b += g0));
        }
        Op::SumSquares { a } => {
            let g0 = g[0];
            let da: Vec<f64> = acc.value(*a).data().iter().map(|x| 2.0 * x * g0).collect();
            acc.add(*a, &da);
        }
        Op::Select { a, index } => {
            let g0 = g[0];
            acc.with_grad(*a, |buf| buf[*index] += g0);
        }
        Op::Nll {
            logits,
            probs,
            labels,
            rows,
        } => {
            let c = acc.value(*logits).last_dim();
            let scale = g[0] / rows.len() as f64;
            acc.with_grad(*logits, |buf| {
                for (k, &i) in rows.iter().enumerate() {
                    let dst = &mut buf[i * c..(i + 1) * c];
                    for (j, (o, &p)) in dst.iter_mut().zip(&probs[k * c..(k + 1) * c]).enumerate() {
                        let target = if j == labels[i] { 1.0 } else { 0.0 };
                        *o += scale * (p - target);
                    }
                }
            });
        }
        Op::Propagate { x, graph } => {
            // The normalized adjacency is symmetric, so the adjoint is the same sum.
            let dx = graph.propagate_rows(g, out.last_dim());
            acc.add(*x, &dx);
        }
        Op::GatherAggregate { edges, graph } => {
            let width = out.last_dim();
            let mut de = vec![0.0; graph.num_entries() * width];
            for v in 0..graph.num_nodes() {
                let gv = &g[v * width..(v + 1) * width];
                for e in graph.row_ptr()[v]..graph.row_ptr()[v + 1] {
                    let c = graph.edge_coeff()[e];
                    for (o, &x) in de[e * width..(e + 1) * width].iter_mut().zip(gv) {
                        *o = c * x;
                    }
                }
            }
            acc.add(*edges, &de);
        }
        Op::EdgeAttention(saved) => edge_attention_backward(saved, out, g, acc),
    }
}

fn edge_attention_backward(saved: &EdgeAttentionSaved, out: &Tensor, g: &[f64], acc: &mut GradAccumulator<'_>) {
    let graph = &saved.graph;
    let heads = saved.heads;
    let positions = saved.keys.len();
    let n = graph.num_nodes();
    let d = out.last_dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = acc.value(saved.query);
    let ks: Vec<&Tensor> = saved.keys.iter().map(|&k| acc.value(k)).collect();
    let vs: Vec<&Tensor> = saved.values.iter().map(|&v| acc.value(v)).collect();

    let mut dq = vec![0.0; n * d];
    let mut dk = vec![vec![0.0; n * d]; positions];
    let mut dv = vec![vec![0.0; n * d]; positions];
    let mut dweight = vec![0.0; positions];
    let mut dscore = vec![0.0; positions];

    let mut e = 0;
    for v in 0..n {
        for &w in graph.neighbors(v) {
            let grow = &g[e * d..(e + 1) * d];
            for h in 0..heads {
                let span = h * dh..(h + 1) * dh;
                let base = (e * heads + h) * positions;
                let weights = &saved.weights[base..base + positions];
                let gh = &grow[span.clone()];
                for s in 0..positions {
                    let keep = saved.dropout.as_ref().map_or(1.0, |m| m[base + s]);
                    let applied = weights[s] * keep;
                    let vrow = &vs[s].row(w)[span.clone()];
                    dweight[s] = keep * gh.iter().zip(vrow).map(|(a, b)| a * b).sum::<f64>();
                    if applied != 0.0 {
                        for (o, &x) in dv[s][w * d..(w + 1) * d][span.clone()].iter_mut().zip(gh) {
                            *o += applied * x;
                        }
                    }
                }
                dscore.iter_mut().for_each(|x| *x = 0.0);
                kernels::softmax_vjp(weights, &dweight, &mut dscore);
                let qrow = &q.row(v)[span.clone()];
                for s in 0..positions {
                    let ds = dscore[s] * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &ks[s].row(w)[span.clone()];
                    for (o, &x) in dq[v * d..(v + 1) * d][span.clone()].iter_mut().zip(krow) {
                        *o += ds * x;
                    }
                    for (o, &x) in dk[s][w * d..(w + 1) * d][span.clone()].iter_mut().zip(qrow) {
                        *o += ds * x;
                    }
                }
            }
            e += 1;
        }
    }
    acc.add(saved.query, &dq);
    for (s, (&k, &v)) in saved.keys.iter().zip(&saved.values).enumerate() {
        acc.add(k, &dk[s]);
        acc.add(v, &dv[s]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        assert_eq!(i2.matmul(m).unwrap().to_tensor(), m.to_tensor());
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        assert_eq!(a.matmul(b).unwrap().to_tensor().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![0.0, 0.0])).softmax().to_tensor();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = tape.constant(Tensor::vector(vec![1000.0, 1000.0])).softmax().to_tensor();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = tape
            .constant(Tensor::vector(vec![1f64.ln(), 3f64.ln()]))
            .softmax()
            .to_tensor();
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn slack_softmax_examples() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![0.0])).slack_softmax().to_tensor();
        assert_eq!(s.data(), &[0.5]);
        let s = tape.constant(Tensor::vector(vec![0.0, 0.0])).slack_softmax().to_tensor();
        assert!(s.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let s = tape.constant(Tensor::vector(vec![2f64.ln()])).slack_softmax().to_tensor();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        let s = tape.constant(Tensor::vector(vec![800.0, 800.0])).slack_softmax().to_tensor();
        assert!(s.is_finite());
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = rand::thread_rng();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        assert_eq!(x.dropout(0.0, &mut rng, true).unwrap().id, x.id);
        assert_eq!(x.dropout(0.5, &mut rng, false).unwrap().id, x.id);
        assert!(x.dropout(1.0, &mut rng, true).is_err());
        assert!(x.dropout(-0.1, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut rng = rand::thread_rng();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1000]));
        let y = x.dropout(0.8, &mut rng, true).unwrap().to_tensor();
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn relu_and_nll() {
        let tape = Tape::new();
        let r = tape.constant(Tensor::vector(vec![-1.0, 2.0])).relu().to_tensor();
        assert_eq!(r.data(), &[0.0, 2.0]);
        let logits = tape.constant(Tensor::zeros(&[1, 2]));
        let loss = logits.log_softmax_nll(&[0], &[true]).unwrap();
        assert!((loss.item() - 2f64.ln()).abs() < 1e-15);
        assert!(logits.log_softmax_nll(&[0], &[false]).is_err());
    }

    #[test]
    fn backward_of_simple_roots() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let grads = tape.backward(x.sum()).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0]));
        let root = x.mul(x).unwrap().sum();
        assert_eq!(tape.backward(root).unwrap().wrt(x).data(), &[4.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_and_constant_nodes_get_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.leaf(Tensor::vector(vec![5.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let root = x.mul(c).unwrap().sum();
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.wrt(y).data(), &[0.0]);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.wrt(x).data(), &[3.0, 4.0]);
    }

    #[test]
    fn attention_examples() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]).unwrap());
        let q = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let out = scaled_dot_attention(q, k, v, false).unwrap().to_tensor();
        assert_eq!(out.data(), &[2.0, 4.0]);

        let q = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let eye = tape.constant(Tensor::identity(2));
        let out = scaled_dot_attention(q, eye, eye, false).unwrap().to_tensor();
        assert!((out.data()[0] - 0.6698).abs() < 1e-4 && (out.data()[1] - 0.3302).abs() < 1e-4);

        let q = tape.constant(Tensor::vector(vec![9.0, -3.0]));
        let k1 = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        let v1 = tape.constant(Tensor::from_rows(&[vec![7.0, -2.0]]).unwrap());
        let out = scaled_dot_attention(q, k1, v1, false).unwrap().to_tensor();
        assert_eq!(out.data(), &[7.0, -2.0]);
    }

    #[test]
    fn attention_over_nothing() {
        let tape = Tape::new();
        let q = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(scaled_dot_attention(q, empty, empty, false).is_err());
        let out = scaled_dot_attention(q, empty, empty, true).unwrap().to_tensor();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }
}
