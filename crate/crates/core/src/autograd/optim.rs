use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    AdaptiveMoment,
    PlainSgd,
}

/// First-order optimiser over one [`ParamStore`].
///
/// Parameters without a gradient in a step are left untouched, including
/// their moment estimates.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_norm: Option<f64>,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: Vec<u32>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store.ids().map(|id| Array2::zeros(store.get(id).dim())).collect();
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            m: zeros.clone(),
            v: zeros,
            t: vec![0; store.len()],
        }
    }

    pub fn adam(lr: f64, store: &ParamStore) -> Self {
        Self::new(OptimizerKind::AdaptiveMoment, lr, store)
    }

    /// Rescale the joint gradient so its L2 norm does not exceed `max_norm`.
    pub fn with_clip_norm(mut self, max_norm: f64) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Array2<f64>>]) {
        assert_eq!(grads.len(), store.len(), "gradient table does not match store");
        let factor = match self.clip_norm {
            Some(max) => {
                let norm = grads.iter().flatten().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = store.ids().nth(i).expect("index in range");
            let p = store.get_mut(id);
            match self.kind {
                OptimizerKind::PlainSgd => p.scaled_add(-self.lr * factor, g),
                OptimizerKind::AdaptiveMoment => {
                    self.t[i] += 1;
                    let t = self.t[i] as i32;
                    let (b1, b2) = (self.beta1, self.beta2);
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    ndarray::Zip::from(m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        let g = g * factor;
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                    });
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    let (lr, eps) = (self.lr, self.eps);
                    ndarray::Zip::from(p).and(&self.m[i]).and(&self.v[i]).for_each(|p, &m, &v| {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use ndarray::array;

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[3.0, -2.0]]);
        let mut opt = Optimizer::adam(0.05, &store);
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let wv = tape.param(&store, w);
            let sq = tape.square(wv);
            let loss = tape.sum(sq);
            let g = tape.backward(loss).for_store(&store);
            opt.step(&mut store, &g);
        }
        assert!(store.get(w).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[1.5]]);
        let mut opt = Optimizer::new(OptimizerKind::PlainSgd, 0.0, &store);
        opt.step(&mut store, &[Some(array![[4.0]])]);
        assert_eq!(store.get(w)[[0, 0]], 1.5);
    }
}
