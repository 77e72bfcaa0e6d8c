//! Building blocks shared by every model.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{ParamId, ParamStore, RowMap, Tape, Var};

/// `y = x W + b`, with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let w = store.add_uniform(format!("{name}.weight"), in_dim, out_dim, in_dim, rng);
        let b = store.add_uniform(format!("{name}.bias"), 1, out_dim, in_dim, rng);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.affine(x, w, b)
    }

    /// Same map with parameters bound as constants.
    pub fn forward_frozen(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.frozen_param(store, self.w);
        let b = tape.frozen_param(store, self.b);
        tape.affine(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Causal 1-D convolution over batch-major token rows.
///
/// Output at step `t` mixes inputs at `t, t - d, ..., t - (k-1) d`; steps
/// before the sequence start read zeros (left padding of `(k-1) d`).
/// The weight stacks one `in x out` block per lag, lag 0 first.
#[derive(Clone, Debug)]
pub struct CausalConv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub dilation: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl CausalConv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_dim * kernel;
        let w = store.add_uniform(format!("{name}.weight"), fan_in, out_dim, fan_in, rng);
        let b = store.add_uniform(format!("{name}.bias"), 1, out_dim, fan_in, rng);
        Self { w, b, kernel, dilation, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize, seq_len: usize) -> Var {
        let mut lags = Vec::with_capacity(self.kernel);
        for j in 0..self.kernel {
            let shift = j * self.dilation;
            if shift == 0 {
                lags.push(x);
            } else if shift < seq_len {
                lags.push(tape.map_rows(x, Rc::new(RowMap::causal_shift(batch, seq_len, shift))));
            } else {
                let z = tape.constant(Array2::zeros((batch * seq_len, self.in_dim)));
                lags.push(z);
            }
        }
        let stacked = tape.concat_cols(&lags);
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.affine(stacked, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.kernel * self.in_dim * self.out_dim + self.out_dim
    }
}

/// Stack of `Linear -> ReLU -> dropout` layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub dropout: f64,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, widths: &[usize], dropout: f64, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = in_dim;
        for (i, w) in widths.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), d, *w, rng));
            d = *w;
        }
        Self { layers, dropout }
    }

    /// ReLU after every layer, dropout between layers.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Var {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, store, x);
            x = tape.relu(x);
            if i + 1 < self.layers.len() {
                x = tape.dropout(x, self.dropout);
            }
        }
        x
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }
}

/// Mean squared error over entries where `mask` is 1; `pred`, `target`, `mask` share a shape.
pub fn masked_mse(tape: &mut Tape, pred: Var, target: &Array2<f64>, mask: &Array2<f64>) -> Var {
    let count = mask.sum().max(1.0);
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t);
    let sq = tape.square(d);
    let m = tape.constant(mask.clone());
    let masked = tape.mul(sq, m);
    let s = tape.sum(masked);
    tape.scale(s, 1.0 / count)
}

/// One-hot matrix with optional per-row weights.
pub fn one_hot(labels: &[usize], classes: usize, weights: Option<&[f64]>) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (i, l) in labels.iter().enumerate() {
        out[[i, *l]] = weights.map_or(1.0, |w| w[i]);
    }
    out
}

/// Weighted mean cross-entropy of row logits against class labels.
/// Rows with zero weight do not contribute; the mean is over the total weight.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], weights: Option<&[f64]>) -> Var {
    let classes = tape.shape(logits).1;
    let total: f64 = weights.map_or(labels.len() as f64, |w| w.iter().sum());
    let ls = tape.log_softmax(logits);
    let oh = tape.constant(one_hot(labels, classes, weights));
    let picked = tape.mul(ls, oh);
    let s = tape.sum(picked);
    tape.scale(s, -1.0 / total.max(1e-12))
}

/// Sinusoidal position code for steps `0..seq_len`, repeated for each sequence.
pub fn sinusoidal_positions(batch: usize, seq_len: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((batch * seq_len, dim));
    for t in 0..seq_len {
        for i in 0..dim {
            let k = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * k / dim as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            for b in 0..batch {
                pe[[b * seq_len + t, i]] = v;
            }
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::max_param_grad_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn causal_conv_reads_only_past() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = CausalConv::new(&mut store, "c", 2, 3, 3, 2, &mut rng);
        let run = |x: Array2<f64>| {
            let mut t = Tape::new();
            let xv = t.constant(x);
            let y = conv.forward(&mut t, &store, xv, 1, 8);
            t.value(y).clone()
        };
        let x = Array2::from_shape_fn((8, 2), |(i, j)| (i * 2 + j) as f64 * 0.1);
        let mut x2 = x.clone();
        x2.row_mut(5).fill(7.0);
        let (a, b) = (run(x), run(x2));
        for t in 0..5 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(5), b.row(5));
        assert_eq!(conv.num_params(), 3 * 2 * 3 + 3);
    }

    #[test]
    fn cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
        let x = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let labels = [0, 1, 1, 0, 1];
        let w = [1.0, 0.0, 2.0, 1.0, 0.5];
        let err = max_param_grad_error(&store, 1e-6, 1e-6, |t, s| {
            let xv = t.constant(x.clone());
            let y = lin.forward(t, s, xv);
            cross_entropy(t, y, &labels, Some(&w))
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn uniform_logits_give_log_two() {
        let mut t = Tape::new();
        let z = t.constant(Array2::zeros((4, 2)));
        let l = cross_entropy(&mut t, z, &[0, 1, 0, 1], None);
        assert!((t.scalar(l) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_mse_ignores_masked() {
        let mut t = Tape::new();
        let p = t.constant(ndarray::array![[3.0, 100.0], [4.0, -50.0]]);
        let target = Array2::zeros((2, 2));
        let mask = ndarray::array![[1.0, 0.0], [1.0, 0.0]];
        let l = masked_mse(&mut t, p, &target, &mask);
        assert!((t.scalar(l) - 12.5).abs() < 1e-12);
    }
}
