//! Raw slice kernels shared by the forward and backward passes.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 15;

/// `a[m,k] · b[k,n]`. Zero entries of `a` are skipped, which keeps
/// bag-of-words feature matrices cheap.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Block-diagonal projection: `x[n, c]` by `w[g, c/g, d/g]`.
pub(crate) fn grouped_forward(x: &[f64], w: &[f64], n: usize, c: usize, d: usize, g: usize) -> Vec<f64> {
    let (cg, dg) = (c / g, d / g);
    let mut out = vec![0.0; n * d];
    if d == 0 {
        return out;
    }
    let row = |(i, out_row): (usize, &mut [f64])| {
        let x_row = &x[i * c..(i + 1) * c];
        for grp in 0..g {
            let block = &w[grp * cg * dg..(grp + 1) * cg * dg];
            let out_grp = &mut out_row[grp * dg..(grp + 1) * dg];
            for (k, &xv) in x_row[grp * cg..(grp + 1) * cg].iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (o, &wv) in out_grp.iter_mut().zip(&block[k * dg..(k + 1) * dg]) {
                    *o += xv * wv;
                }
            }
        }
    };
    if n * c * d / g >= PAR_THRESHOLD {
        out.par_chunks_mut(d).enumerate().for_each(row);
    } else {
        out.chunks_mut(d).enumerate().for_each(row);
    }
    out
}

/// Gradient of the grouped projection with respect to its input.
pub(crate) fn grouped_backward_input(grad: &[f64], w: &[f64], n: usize, c: usize, d: usize, g: usize) -> Vec<f64> {
    let (cg, dg) = (c / g, d / g);
    let mut out = vec![0.0; n * c];
    if c == 0 {
        return out;
    }
    let row = |(i, dx_row): (usize, &mut [f64])| {
        let g_row = &grad[i * d..(i + 1) * d];
        for grp in 0..g {
            let block = &w[grp * cg * dg..(grp + 1) * cg * dg];
            let g_grp = &g_row[grp * dg..(grp + 1) * dg];
            for k in 0..cg {
                let w_row = &block[k * dg..(k + 1) * dg];
                dx_row[grp * cg + k] += g_grp.iter().zip(w_row).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    };
    if n * c * d / g >= PAR_THRESHOLD {
        out.par_chunks_mut(c).enumerate().for_each(row);
    } else {
        out.chunks_mut(c).enumerate().for_each(row);
    }
    out
}

/// Gradient of the grouped projection with respect to its weight blocks.
pub(crate) fn grouped_backward_weight(x: &[f64], grad: &[f64], n: usize, c: usize, d: usize, g: usize) -> Vec<f64> {
    let (cg, dg) = (c / g, d / g);
    let mut out = vec![0.0; g * cg * dg];
    if cg * dg == 0 {
        return out;
    }
    let block = |(grp, dw): (usize, &mut [f64])| {
        for i in 0..n {
            let x_grp = &x[i * c + grp * cg..i * c + (grp + 1) * cg];
            let g_grp = &grad[i * d + grp * dg..i * d + (grp + 1) * dg];
            for (k, &xv) in x_grp.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (o, &gv) in dw[k * dg..(k + 1) * dg].iter_mut().zip(g_grp) {
                    *o += xv * gv;
                }
            }
        }
    };
    if n * c * d / g >= PAR_THRESHOLD {
        out.par_chunks_mut(cg * dg).enumerate().for_each(block);
    } else {
        out.chunks_mut(cg * dg).enumerate().for_each(block);
    }
    out
}

/// Row-wise softmax in place. With `slack`, an implicit extra logit fixed
/// at zero joins the normalizer, so rows sum to less than one.
pub(crate) fn softmax_rows(data: &mut [f64], width: usize, slack: bool) {
    if width == 0 {
        return;
    }
    for row in data.chunks_mut(width) {
        softmax_in_place(row, slack);
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64], slack: bool) {
    let mut max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if slack {
        max = max.max(0.0);
    }
    let mut denom = if slack { (-max).exp() } else { 0.0 };
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    for v in row.iter_mut() {
        *v /= denom;
    }
}

/// Vector-Jacobian product shared by both softmax variants:
/// `dx_i = y_i (dy_i - sum_j y_j dy_j)`.
pub(crate) fn softmax_vjp(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((o, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *o += yi * (gi - dot);
    }
}
