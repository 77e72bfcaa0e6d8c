//! Causal sequence encoders (LSTM, TCN, transformer) with task heads.
//!
//! Every encoder maps batch-major token rows `(batch * seq_len) x m` to
//! hidden rows `(batch * seq_len) x d_hidden`, and the output at step `t`
//! depends on inputs `0..=t` only. Padding sits after each sequence's last
//! observed step, so causality also makes outputs invariant to padding.

mod lstm;
mod tcn;
mod transformer;

use std::rc::Rc;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, RowMap, Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::Linear;

pub use lstm::LstmEncoder;
pub use tcn::{TcnEncoder, TemporalBlock};
pub use transformer::TransformerEncoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Lstm,
    Tcn,
    Transformer,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Lstm => "lstm",
            Self::Tcn => "tcn",
            Self::Transformer => "transformer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmConfig {
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self { hidden: 512, layers: 3, dropout: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcnConfig {
    pub blocks: usize,
    pub channels: usize,
    pub fc: Vec<usize>,
    pub dropout: f64,
    pub kernel_size: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self { blocks: 4, channels: 256, fc: vec![128, 128], dropout: 0.2, kernel_size: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { d_model: 256, heads: 8, ffn: 1024, layers: 2, dropout: 0.1 }
    }
}

/// Encoder hyperparameters. Widths are multiplied by `scale` (rounded) before use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub lstm: LstmConfig,
    pub tcn: TcnConfig,
    pub transformer: TransformerConfig,
    pub scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Tcn,
            lstm: LstmConfig::default(),
            tcn: TcnConfig::default(),
            transformer: TransformerConfig::default(),
            scale: 0.125,
        }
    }
}

/// Smallest admissible scaled width.
pub const MIN_WIDTH: usize = 8;

impl EncoderConfig {
    pub fn of_kind(kind: EncoderKind) -> Self {
        Self { kind, ..Default::default() }
    }

    pub fn width(&self, w: usize) -> Result<usize> {
        let scaled = (w as f64 * self.scale).round() as usize;
        if scaled < MIN_WIDTH {
            return Err(Error::config(format!("width {w} x scale {} = {scaled} is below {MIN_WIDTH}", self.scale)));
        }
        Ok(scaled)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::config("scale must be positive"));
        }
        match self.kind {
            EncoderKind::Lstm => {
                self.width(self.lstm.hidden)?;
                if self.lstm.layers == 0 {
                    return Err(Error::config("lstm.layers must be at least 1"));
                }
            }
            EncoderKind::Tcn => {
                self.width(self.tcn.channels)?;
                for w in &self.tcn.fc {
                    self.width(*w)?;
                }
                if self.tcn.blocks == 0 || self.tcn.kernel_size == 0 {
                    return Err(Error::config("tcn.blocks and tcn.kernel_size must be at least 1"));
                }
            }
            EncoderKind::Transformer => {
                let d = self.width(self.transformer.d_model)?;
                self.width(self.transformer.ffn)?;
                if self.transformer.heads == 0 || d % self.transformer.heads != 0 {
                    return Err(Error::config(format!(
                        "scaled d_model {d} must be divisible by heads {}",
                        self.transformer.heads
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ihm,
    Sofa,
}

impl Task {
    pub fn output_dim(self) -> usize {
        match self {
            Self::Ihm => 2,
            Self::Sofa => 1,
        }
    }
}

/// Encoder of one of the three architectures.
#[derive(Clone, Debug)]
pub enum Encoder {
    Lstm(LstmEncoder),
    Tcn(TcnEncoder),
    Transformer(TransformerEncoder),
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, in_dim: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            EncoderKind::Lstm => Self::Lstm(LstmEncoder::new(cfg, in_dim, store, rng)?),
            EncoderKind::Tcn => Self::Tcn(TcnEncoder::new(cfg, in_dim, &[], store, rng)?),
            EncoderKind::Transformer => Self::Transformer(TransformerEncoder::new(cfg, in_dim, store, rng)?),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            Self::Lstm(e) => e.hidden_dim(),
            Self::Tcn(e) => e.hidden_dim(),
            Self::Transformer(e) => e.hidden_dim(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Self::Lstm(e) => e.in_dim,
            Self::Tcn(e) => e.in_dim,
            Self::Transformer(e) => e.in_dim,
        }
    }

    /// Hidden rows for batch-major token rows `x`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize, seq_len: usize) -> Var {
        match self {
            Self::Lstm(e) => e.forward(tape, store, x, batch, seq_len),
            Self::Tcn(e) => e.forward(tape, store, x, &[], batch, seq_len),
            Self::Transformer(e) => e.forward(tape, store, x, batch, seq_len),
        }
    }
}

/// Hidden activations of one record: `h` is `T x d_hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenSequence {
    pub h: Array2<f64>,
    pub mask: Vec<bool>,
}

/// Encoder plus linear output layer for one clinical task.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub cfg: EncoderConfig,
    pub task: Task,
    pub seed: u64,
    pub encoder: Encoder,
    pub head: Linear,
    pub params: ParamStore,
}

impl TaskModel {
    pub fn new(cfg: &EncoderConfig, task: Task, in_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(cfg, in_dim, &mut params, &mut rng)?;
        let head = Linear::new(&mut params, "head", encoder.hidden_dim(), task.output_dim(), &mut rng);
        Ok(Self { cfg: cfg.clone(), task, seed, encoder, head, params })
    }

    pub fn check_input(&self, batch: &Batch) -> Result<()> {
        if batch.channels() != self.encoder.in_dim() {
            return Err(Error::shape(format!(
                "model expects {} channels, batch has {}",
                self.encoder.in_dim(),
                batch.channels()
            )));
        }
        Ok(())
    }

    /// Hidden rows at the extraction point.
    pub fn hidden(&self, tape: &mut Tape, batch: &Batch) -> Var {
        let x = tape.constant(batch.tokens());
        self.encoder.forward(tape, &self.params, x, batch.size(), batch.t_max())
    }

    /// Per-step outputs, `(batch * t_max) x out_dim`.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Var {
        let h = self.hidden(tape, batch);
        task_head(tape, &self.params, &self.head, h)
    }

    /// IHM logits at each record's last observed step, `batch x 2`.
    pub fn ihm_logits(&self, tape: &mut Tape, batch: &Batch) -> Var {
        let out = self.forward(tape, batch);
        reduce_last_step(tape, out, batch)
    }

    /// Evaluation-mode hidden sequences, one per record.
    pub fn encode(&self, batch: &Batch) -> Result<Vec<HiddenSequence>> {
        self.check_input(batch)?;
        let mut tape = Tape::new();
        let h = self.hidden(&mut tape, batch);
        Ok(split_sequences(tape.value(h), batch))
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }
}

/// Linear output layer applied at every step.
pub fn task_head(tape: &mut Tape, store: &ParamStore, head: &Linear, h: Var) -> Var {
    head.forward(tape, store, h)
}

/// Rows at each sequence's last observed step.
pub fn reduce_last_step(tape: &mut Tape, rows: Var, batch: &Batch) -> Var {
    tape.map_rows(rows, Rc::new(RowMap::last_step(batch.t_max(), &batch.lengths)))
}

/// Cut batch-major rows into per-record sequences.
pub fn split_sequences(rows: &Array2<f64>, batch: &Batch) -> Vec<HiddenSequence> {
    let t = batch.t_max();
    (0..batch.size())
        .map(|b| HiddenSequence {
            h: rows.slice(s![b * t..(b + 1) * t, ..]).to_owned(),
            mask: (0..t).map(|i| i < batch.lengths[b]).collect(),
        })
        .collect()
}
