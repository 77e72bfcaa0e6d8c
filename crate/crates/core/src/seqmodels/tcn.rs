use rand_chacha::ChaCha8Rng;

use super::EncoderConfig;
use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{CausalConv, Linear};

/// Two dilated causal convolutions with a residual connection.
#[derive(Clone, Debug)]
pub struct TemporalBlock {
    pub conv1: CausalConv,
    pub conv2: CausalConv,
    /// 1x1 projection on the residual path when widths differ.
    pub downsample: Option<Linear>,
    /// Width of the residual input, excluding fused extra columns.
    pub in_dim: usize,
    pub extra_dim: usize,
}

impl TemporalBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        extra_dim: usize,
        out_dim: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 = CausalConv::new(store, &format!("{name}.conv1"), in_dim + extra_dim, out_dim, kernel, dilation, rng);
        let conv2 = CausalConv::new(store, &format!("{name}.conv2"), out_dim, out_dim, kernel, dilation, rng);
        let downsample = (in_dim != out_dim).then(|| Linear::new(store, &format!("{name}.downsample"), in_dim, out_dim, rng));
        Self { conv1, conv2, downsample, in_dim, extra_dim }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        extra: Option<Var>,
        dropout: f64,
        batch: usize,
        seq_len: usize,
    ) -> Var {
        let input = match extra {
            Some(e) => tape.concat_cols(&[x, e]),
            None => x,
        };
        let y = self.conv1.forward(tape, store, input, batch, seq_len);
        let y = tape.relu(y);
        let y = tape.dropout(y, dropout);
        let y = self.conv2.forward(tape, store, y, batch, seq_len);
        let y = tape.relu(y);
        let y = tape.dropout(y, dropout);
        let res = match &self.downsample {
            Some(d) => d.forward(tape, store, x),
            None => x,
        };
        let sum = tape.add(y, res);
        tape.relu(sum)
    }
}

/// Temporal convolutional network: residual blocks with dilation `2^i`,
/// then a fully connected stack whose output is the hidden representation.
///
/// Extra per-step inputs can be concatenated at `blocks + 1` points: the
/// input of each block and the input of the fully connected stack.
#[derive(Clone, Debug)]
pub struct TcnEncoder {
    pub blocks: Vec<TemporalBlock>,
    pub fc: Vec<Linear>,
    pub in_dim: usize,
    pub extra_dims: Vec<usize>,
    pub dropout: f64,
}

impl TcnEncoder {
    /// `extra_dims[i]` is the width fused at point `i`; missing entries are zero.
    pub fn new(
        cfg: &EncoderConfig,
        in_dim: usize,
        extra_dims: &[usize],
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::named("tcn", cfg, in_dim, extra_dims, store, rng)
    }

    /// Like [`TcnEncoder::new`] with parameter names under `prefix`.
    pub fn named(
        prefix: &str,
        cfg: &EncoderConfig,
        in_dim: usize,
        extra_dims: &[usize],
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = cfg.width(cfg.tcn.channels)?;
        let n_blocks = cfg.tcn.blocks;
        if extra_dims.len() > n_blocks + 1 {
            return Err(Error::config(format!("{} fusion points for a {n_blocks}-block network", extra_dims.len())));
        }
        let mut extra = extra_dims.to_vec();
        extra.resize(n_blocks + 1, 0);
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut d = in_dim;
        for (i, e) in extra.iter().take(n_blocks).enumerate() {
            let dilation = 1 << i;
            blocks.push(TemporalBlock::new(store, &format!("{prefix}.block{i}"), d, *e, c, cfg.tcn.kernel_size, dilation, rng));
            d = c;
        }
        let mut fc = Vec::with_capacity(cfg.tcn.fc.len());
        d += extra[n_blocks];
        for (i, w) in cfg.tcn.fc.iter().enumerate() {
            let w = cfg.width(*w)?;
            fc.push(Linear::new(store, &format!("{prefix}.fc{i}"), d, w, rng));
            d = w;
        }
        Ok(Self { blocks, fc, in_dim, extra_dims: extra, dropout: cfg.tcn.dropout })
    }

    pub fn hidden_dim(&self) -> usize {
        match self.fc.last() {
            Some(l) => l.out_dim,
            None => self.blocks.last().map_or(self.in_dim, |b| b.conv2.out_dim) + self.extra_dims[self.blocks.len()],
        }
    }

    /// `extras[i]`, when present, is concatenated at fusion point `i`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        extras: &[Option<Var>],
        batch: usize,
        seq_len: usize,
    ) -> Var {
        let extra = |i: usize| extras.get(i).copied().flatten();
        let mut h = x;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(tape, store, h, extra(i), self.dropout, batch, seq_len);
        }
        if let Some(e) = extra(self.blocks.len()) {
            h = tape.concat_cols(&[h, e]);
        }
        for (i, l) in self.fc.iter().enumerate() {
            if i > 0 {
                h = tape.dropout(h, self.dropout);
            }
            h = l.forward(tape, store, h);
            h = tape.relu(h);
        }
        h
    }
}
