use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::EncoderConfig;
use crate::autograd::{ParamId, ParamStore, RowMap, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
struct LstmLayer {
    w_ih: ParamId,
    w_hh: ParamId,
    b: ParamId,
}

/// Stacked unidirectional LSTM. Gate blocks are ordered input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmEncoder {
    layers: Vec<LstmLayer>,
    pub hidden: usize,
    pub in_dim: usize,
    pub dropout: f64,
}

impl LstmEncoder {
    pub fn new(cfg: &EncoderConfig, in_dim: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let hidden = cfg.width(cfg.lstm.hidden)?;
        let mut layers = Vec::with_capacity(cfg.lstm.layers);
        let mut d = in_dim;
        for l in 0..cfg.lstm.layers {
            let w_ih = store.add_uniform(format!("lstm.{l}.w_ih"), d, 4 * hidden, hidden, rng);
            let w_hh = store.add_uniform(format!("lstm.{l}.w_hh"), hidden, 4 * hidden, hidden, rng);
            let b = store.add_uniform(format!("lstm.{l}.bias"), 1, 4 * hidden, hidden, rng);
            layers.push(LstmLayer { w_ih, w_hh, b });
            d = hidden;
        }
        Ok(Self { layers, hidden, in_dim, dropout: cfg.lstm.dropout })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize, seq_len: usize) -> Var {
        let n = batch * seq_len;
        // batch-major row b*T+t <-> time-major row t*B+b
        let to_time: Vec<Option<usize>> = (0..n).map(|r| Some((r % batch) * seq_len + r / batch)).collect();
        let to_batch: Vec<Option<usize>> = (0..n).map(|r| Some((r % seq_len) * batch + r / seq_len)).collect();
        let mut h_seq = tape.map_rows(x, Rc::new(RowMap::gather(n, &to_time)));
        let hd = self.hidden;
        for (l, layer) in self.layers.iter().enumerate() {
            let w_ih = tape.param(store, layer.w_ih);
            let w_hh = tape.param(store, layer.w_hh);
            let b = tape.param(store, layer.b);
            let gx = tape.affine(h_seq, w_ih, b);
            let mut outs = Vec::with_capacity(seq_len);
            let mut state: Option<(Var, Var)> = None;
            for t in 0..seq_len {
                let mut g = tape.slice_rows(gx, t * batch, batch);
                if let Some((h, _)) = state {
                    let gh = tape.matmul(h, w_hh);
                    g = tape.add(g, gh);
                }
                let i = tape.slice_cols(g, 0, hd);
                let i = tape.sigmoid(i);
                let gc = tape.slice_cols(g, 2 * hd, hd);
                let gc = tape.tanh(gc);
                let o = tape.slice_cols(g, 3 * hd, hd);
                let o = tape.sigmoid(o);
                let mut c = tape.mul(i, gc);
                if let Some((_, c_prev)) = state {
                    let f = tape.slice_cols(g, hd, hd);
                    let f = tape.sigmoid(f);
                    let kept = tape.mul(f, c_prev);
                    c = tape.add(c, kept);
                }
                let tc = tape.tanh(c);
                let h = tape.mul(o, tc);
                outs.push(h);
                state = Some((h, c));
            }
            h_seq = tape.concat_rows(&outs);
            if l + 1 < self.layers.len() {
                h_seq = tape.dropout(h_seq, self.dropout);
            }
        }
        tape.map_rows(h_seq, Rc::new(RowMap::gather(n, &to_batch)))
    }
}
