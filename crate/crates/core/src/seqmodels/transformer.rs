use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::EncoderConfig;
use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::nn::{sinusoidal_positions, Linear};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Array2::ones((1, d)));
        let bias = store.add_zeros(format!("{name}.bias"), 1, d);
        Self { gain, bias }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let y = tape.layer_norm(x, LN_EPS);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul_row(y, g);
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm1: Norm,
    ff1: Linear,
    ff2: Linear,
    norm2: Norm,
}

/// Post-norm transformer encoder with causal self-attention.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    input: Linear,
    layers: Vec<EncoderLayer>,
    pub d_model: usize,
    pub heads: usize,
    pub in_dim: usize,
    pub dropout: f64,
}

impl TransformerEncoder {
    pub fn new(cfg: &EncoderConfig, in_dim: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.width(cfg.transformer.d_model)?;
        let ffn = cfg.width(cfg.transformer.ffn)?;
        let input = Linear::new(store, "transformer.input", in_dim, d, rng);
        let layers = (0..cfg.transformer.layers)
            .map(|l| {
                let n = format!("transformer.{l}");
                EncoderLayer {
                    q: Linear::new(store, &format!("{n}.q"), d, d, rng),
                    k: Linear::new(store, &format!("{n}.k"), d, d, rng),
                    v: Linear::new(store, &format!("{n}.v"), d, d, rng),
                    out: Linear::new(store, &format!("{n}.out"), d, d, rng),
                    norm1: Norm::new(store, &format!("{n}.norm1"), d),
                    ff1: Linear::new(store, &format!("{n}.ff1"), d, ffn, rng),
                    ff2: Linear::new(store, &format!("{n}.ff2"), ffn, d, rng),
                    norm2: Norm::new(store, &format!("{n}.norm2"), d),
                }
            })
            .collect();
        Ok(Self { input, layers, d_model: d, heads: cfg.transformer.heads, in_dim, dropout: cfg.transformer.dropout })
    }

    pub fn hidden_dim(&self) -> usize {
        self.d_model
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize, seq_len: usize) -> Var {
        let h = self.input.forward(tape, store, x);
        let pe = tape.constant(sinusoidal_positions(batch, seq_len, self.d_model));
        let mut h = tape.add(h, pe);
        h = tape.dropout(h, self.dropout);
        for l in &self.layers {
            let q = l.q.forward(tape, store, h);
            let k = l.k.forward(tape, store, h);
            let v = l.v.forward(tape, store, h);
            let a = tape.causal_attention(q, k, v, self.heads, seq_len);
            let a = l.out.forward(tape, store, a);
            let a = tape.dropout(a, self.dropout);
            let s = tape.add(h, a);
            h = l.norm1.forward(tape, store, s);
            let f = l.ff1.forward(tape, store, h);
            let f = tape.relu(f);
            let f = tape.dropout(f, self.dropout);
            let f = l.ff2.forward(tape, store, f);
            let f = tape.dropout(f, self.dropout);
            let s = tape.add(h, f);
            h = l.norm2.forward(tape, store, s);
        }
        h
    }
}
