use std::rc::Rc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::check::max_param_grad_error;

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

fn check<F>(store: &ParamStore, f: F)
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let err = max_param_grad_error(store, 1e-6, 1e-6, f);
    assert!(err < 1e-6, "gradient mismatch: relative error {err:e}");
}

#[test]
fn elementwise_and_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_mat(&mut rng, 4, 3));
    let b = store.add("b", rand_mat(&mut rng, 3, 5));
    let r = store.add("r", rand_mat(&mut rng, 1, 5));
    let c = store.add("c", rand_mat(&mut rng, 4, 5));
    check(&store, |t, s| {
        let (a, b, r, c) = (t.param(s, a), t.param(s, b), t.param(s, r), t.param(s, c));
        let y = t.matmul(a, b);
        let y = t.add_row(y, r);
        let y = t.mul_row(y, r);
        let s1 = t.sigmoid(y);
        let s2 = t.tanh(c);
        let e = t.exp(s2);
        let m = t.mul(s1, e);
        let d = t.sub(m, c);
        let l = t.leaky_relu(d, 0.1);
        let sq = t.square(l);
        let k = t.scale(sq, 0.7);
        let k = t.add_scalar(k, 2.0);
        let rs = t.row_sum(k);
        t.sum(rs)
    });
}

#[test]
fn structural_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_mat(&mut rng, 6, 3));
    let b = store.add("b", rand_mat(&mut rng, 6, 2));
    let map = Rc::new(RowMap::weighted(6, vec![vec![(0, 0.5), (5, 2.0)], vec![], vec![(3, -1.0)]]));
    check(&store, |t, s| {
        let (a, b) = (t.param(s, a), t.param(s, b));
        let c = t.concat_cols(&[a, b]);
        let sl = t.slice_cols(c, 1, 3);
        let rows = t.concat_rows(&[sl, a]);
        let top = t.map_rows(a, map.clone());
        let ls = t.log_softmax(rows);
        let ln = t.layer_norm(top, 1e-5);
        let w = t.square(ln);
        let s1 = t.sum(ls);
        let s2 = t.mean(w);
        let r = t.relu(sl);
        let s3 = t.sum(r);
        let r1 = t.slice_rows(b, 1, 3);
        let r2 = t.slice_rows(b, 2, 4);
        let e = t.exp(r1);
        let s4 = t.sum(e);
        let q = t.square(r2);
        let s5 = t.sum(q);
        let x = t.add(s1, s2);
        let x = t.add(x, s4);
        let x = t.add(x, s5);
        t.add(x, s3)
    });
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let q = store.add("q", rand_mat(&mut rng, 10, 4));
    let k = store.add("k", rand_mat(&mut rng, 10, 4));
    let v = store.add("v", rand_mat(&mut rng, 10, 4));
    let w = rand_mat(&mut rng, 10, 4);
    check(&store, |t, s| {
        let (q, k, v) = (t.param(s, q), t.param(s, k), t.param(s, v));
        let o = t.causal_attention(q, k, v, 2, 5);
        let wc = t.constant(w.clone());
        let m = t.mul(o, wc);
        t.sum(m)
    });
}

#[test]
fn attention_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_mat(&mut rng, 6, 4);
    let mut y = x.clone();
    y.row_mut(2).fill(9.0);
    let run = |x: &Array2<f64>| {
        let mut t = Tape::new();
        let a = t.constant(x.clone());
        let o = t.causal_attention(a, a, a, 2, 3);
        t.value(o).clone()
    };
    let (ox, oy) = (run(&x), run(&y));
    assert_eq!(ox.row(0), oy.row(0));
    assert_eq!(ox.row(1), oy.row(1));
    assert_eq!(ox.slice(s![3.., ..]), oy.slice(s![3.., ..]));
    assert_ne!(ox.row(2), oy.row(2));
}

#[test]
fn clamp_blocks_gradient_outside_bounds() {
    let mut tape = Tape::new();
    let x = tape.variable(ndarray::array![[-20.0, 0.5, 20.0]]);
    let c = tape.clamp(x, -10.0, 10.0);
    let s = tape.sum(c);
    let g = tape.backward(s);
    assert_eq!(g.wrt(x).unwrap(), &ndarray::array![[0.0, 1.0, 0.0]]);
}

#[test]
fn shared_parameter_accumulates() {
    let mut store = ParamStore::new();
    let w = store.add("w", ndarray::array![[2.0]]);
    let mut tape = Tape::new();
    let a = tape.param(&store, w);
    let b = tape.param(&store, w);
    assert_eq!(a, b);
    let p = tape.mul(a, b);
    let s = tape.sum(p);
    let g = tape.backward(s).for_store(&store);
    assert_eq!(g[0].as_ref().unwrap()[[0, 0]], 4.0);
}

#[test]
fn dropout_is_identity_in_eval_mode() {
    let mut tape = Tape::new();
    let x = tape.constant(Array2::ones((3, 3)));
    assert_eq!(tape.dropout(x, 0.5), x);
    let mut train = Tape::training(ChaCha8Rng::seed_from_u64(0));
    let x = train.constant(Array2::ones((50, 50)));
    let y = train.dropout(x, 0.5);
    let kept = train.value(y).iter().filter(|v| **v > 0.0).count();
    assert!(kept > 1000 && kept < 1500);
    assert!(train.value(y).iter().all(|v| *v == 0.0 || *v == 2.0));
}
