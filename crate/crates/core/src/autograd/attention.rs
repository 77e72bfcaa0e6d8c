//! Multi-head scaled dot-product attention with a causal mask.
//!
//! Rows are laid out batch-major: row `b * seq_len + t` holds step `t` of
//! sequence `b`. Query `t` attends to keys `0..=t` of its own sequence only.

use ndarray::{s, Array2, ArrayView2};

pub(crate) struct AttentionCache {
    /// One lower-triangular `seq_len x seq_len` probability matrix per (sequence, head).
    pub probs: Vec<Array2<f64>>,
}

pub(crate) fn forward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
    seq_len: usize,
) -> (Array2<f64>, AttentionCache) {
    let (n, d) = q.dim();
    let batch = n / seq_len;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        let rows = b * seq_len..(b + 1) * seq_len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qb = q.slice(s![rows.clone(), cols.clone()]);
            let kb = k.slice(s![rows.clone(), cols.clone()]);
            let vb = v.slice(s![rows.clone(), cols.clone()]);
            let mut p = qb.dot(&kb.t());
            for i in 0..seq_len {
                let mut row = p.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    row[j] *= scale;
                    max = max.max(row[j]);
                }
                let mut z = 0.0;
                for j in 0..=i {
                    row[j] = (row[j] - max).exp();
                    z += row[j];
                }
                for j in 0..=i {
                    row[j] /= z;
                }
                for j in i + 1..seq_len {
                    row[j] = 0.0;
                }
            }
            out.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vb));
            probs.push(p);
        }
    }
    (out, AttentionCache { probs })
}

/// Returns gradients with respect to (q, k, v).
pub(crate) fn backward(
    g: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    cache: &AttentionCache,
    heads: usize,
    seq_len: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (n, d) = q.dim();
    let batch = n / seq_len;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for b in 0..batch {
        let rows = b * seq_len..(b + 1) * seq_len;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &cache.probs[b * heads + h];
            let gb: ArrayView2<f64> = g.slice(s![rows.clone(), cols.clone()]);
            let qb = q.slice(s![rows.clone(), cols.clone()]);
            let kb = k.slice(s![rows.clone(), cols.clone()]);
            let vb = v.slice(s![rows.clone(), cols.clone()]);
            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&gb));
            let mut ds = gb.dot(&vb.t());
            for i in 0..seq_len {
                let pr = p.row(i);
                let mut row = ds.row_mut(i);
                let dot: f64 = (0..=i).map(|j| pr[j] * row[j]).sum();
                for j in 0..=i {
                    row[j] = pr[j] * (row[j] - dot) * scale;
                }
                for j in i + 1..seq_len {
                    row[j] = 0.0;
                }
            }
            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kb));
            dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qb));
        }
    }
    (dq, dk, dv)
}
