//! Finite-difference gradient oracle.

use ndarray::Array2;

use super::{ParamStore, Tape, Var};

/// Worst relative error between analytic and central-difference gradients
/// over every scalar of every parameter in `store`.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn max_param_grad_error<F>(store: &ParamStore, h: f64, floor: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    let grads = tape.backward(loss).for_store(store);
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for id in store.ids() {
        let zero = Array2::zeros(store.get(id).dim());
        let analytic = grads[id.index()].clone().unwrap_or(zero).as_standard_layout().into_owned();
        for idx in 0..store.get(id).len() {
            let orig = store.get(id).as_slice().unwrap()[idx];
            probe.get_mut(id).as_slice_mut().unwrap()[idx] = orig + h;
            let mut t1 = Tape::new();
            let l = f(&mut t1, &probe);
            let up = t1.scalar(l);
            probe.get_mut(id).as_slice_mut().unwrap()[idx] = orig - h;
            let mut t2 = Tape::new();
            let l = f(&mut t2, &probe);
            let down = t2.scalar(l);
            probe.get_mut(id).as_slice_mut().unwrap()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}
