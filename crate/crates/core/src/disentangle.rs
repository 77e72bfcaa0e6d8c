//! Variational autoencoder with a partitioned latent space.
//!
//! The latent space splits into a non-sensitive part `z` and a sensitive
//! part `b`. Training pushes the static attributes into `b` (a classifier
//! on `b`), keeps `z` and `b` statistically independent (a total-correlation
//! adversary), and trains the clinical head on `z` alone. Afterwards `b` can
//! be dropped or replaced by noise without touching clinical outputs.
//!
//! Minimised objective, per batch:
//!
//! ```text
//! total = -β·s·(recon - kl) - α·pred + γ·tc + θ·l_ctp
//! ```
//!
//! with `s = 1/T` per record when `scale_elbo_by_t` is set.

use std::fmt::Write as _;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::optim::Optimizer;
use crate::autograd::{ParamStore, RowMap, Tape, Var};
use crate::data::{make_batches, Batch, BatchTargets, BinaryLabels, TaskSample};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, masked_mse, Linear};
use crate::probing::{train_probe, ProbeConfig};
use crate::seqmodels::{reduce_last_step, EncoderConfig, EncoderKind, Task, TcnEncoder};
use crate::training::{
    auc_report, epoch_batches, mean_target, restore, rmse_report, sofa_tallies, MetricReport, TrainConfig,
};

/// Logvar outputs are clamped to this range.
pub const LOGVAR_BOUND: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    /// `z` is `Nz x T`, `b` is `S x T`.
    #[default]
    PerTimestep,
    /// One `z` and one `b` vector per record.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerHyperparams {
    pub beta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub theta: f64,
    pub scale_elbo_by_t: bool,
    pub nz: usize,
    pub sensitive_dim: usize,
    pub latent_mode: LatentMode,
}

impl Default for SteerHyperparams {
    fn default() -> Self {
        Self {
            beta: 1e-4,
            gamma: 0.5,
            alpha: 0.5,
            theta: 5.0,
            scale_elbo_by_t: true,
            nz: 8,
            sensitive_dim: 1,
            latent_mode: LatentMode::PerTimestep,
        }
    }
}

impl SteerHyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("alpha", self.alpha), ("theta", self.theta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.nz == 0 || self.sensitive_dim == 0 {
            return Err(Error::config("nz and sensitive_dim must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerConfig {
    /// Backbone; always built as a TCN.
    pub encoder: EncoderConfig,
    pub hyper: SteerHyperparams,
    /// One sensitive attribute per `b` channel.
    pub attributes: Vec<String>,
    pub decoder_blocks: usize,
    pub disc_width: usize,
    pub disc_layers: usize,
    pub disc_slope: f64,
    /// Discriminator updates per training batch.
    pub disc_steps: usize,
    pub predictor_hidden: usize,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            hyper: SteerHyperparams::default(),
            attributes: vec!["sex".into()],
            decoder_blocks: 2,
            disc_width: 128,
            disc_layers: 4,
            disc_slope: 0.2,
            disc_steps: 1,
            predictor_hidden: 16,
        }
    }
}

impl SteerConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let mut enc = self.encoder.clone();
        enc.kind = EncoderKind::Tcn;
        enc.validate()?;
        if self.attributes.len() != self.hyper.sensitive_dim {
            return Err(Error::config(format!(
                "{} sensitive attributes for sensitive_dim {}",
                self.attributes.len(),
                self.hyper.sensitive_dim
            )));
        }
        if self.decoder_blocks == 0 || self.disc_layers < 2 || self.disc_width == 0 || self.disc_steps == 0 || self.predictor_hidden == 0 {
            return Err(Error::config("decoder_blocks >= 1, disc_layers >= 2, disc_width and predictor_hidden >= 1"));
        }
        Ok(())
    }
}

/// One term of the objective, or the whole of it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Recon,
    Kl,
    Predictiveness,
    Tc,
    LCtp,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] =
        [Self::Recon, Self::Kl, Self::Predictiveness, Self::Tc, Self::LCtp, Self::Total];

    pub fn name(self) -> &'static str {
        match self {
            Self::Recon => "recon",
            Self::Kl => "kl",
            Self::Predictiveness => "predictiveness",
            Self::Tc => "tc",
            Self::LCtp => "l_ctp",
            Self::Total => "total",
        }
    }
}

/// Sensitive labels of one record, one entry per `b` channel.
pub type SensitiveLabels = Vec<Option<bool>>;

/// Task samples with their sensitive labels.
#[derive(Clone, Debug, Default)]
pub struct SteerSet {
    pub samples: Vec<TaskSample>,
    pub sensitive: Vec<SensitiveLabels>,
}

impl SteerSet {
    pub fn new(samples: Vec<TaskSample>, labels: &BinaryLabels, attributes: &[String]) -> Result<Self> {
        for a in attributes {
            if !labels.has_attribute(a) {
                return Err(Error::config(format!("no labels for sensitive attribute {a:?}")));
            }
        }
        let sensitive =
            samples.iter().map(|s| attributes.iter().map(|a| labels.get(a, &s.record_id)).collect()).collect();
        Ok(Self { samples, sensitive })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Labels of attribute `j` for the listed positions: (class, weight).
    fn column(&self, indices: &[usize], j: usize) -> (Vec<usize>, Vec<f64>) {
        indices
            .iter()
            .map(|i| match self.sensitive[*i][j] {
                Some(v) => (v as usize, 1.0),
                None => (0, 0.0),
            })
            .unzip()
    }
}

/// Posterior parameters and samples of one batch, on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub z_mu: Var,
    pub z_logvar: Var,
    pub b_mu: Var,
    pub b_logvar: Var,
    pub z: Var,
    pub b: Var,
}

/// Posterior of one record. Rows are time steps (one row in pooled mode).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPartition {
    pub z_mu: Array2<f64>,
    pub z_logvar: Array2<f64>,
    pub b_mu: Array2<f64>,
    pub b_logvar: Array2<f64>,
    pub z_sample: Array2<f64>,
    pub b_sample: Array2<f64>,
}

/// Random inputs of one step, drawn up front so a forward pass is a pure
/// function of parameters and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    pub eps_z: Array2<f64>,
    pub eps_b: Array2<f64>,
    /// One permutation of the discriminator rows per sensitive channel.
    pub perms: Vec<Vec<usize>>,
}

/// Loss parts of one batch or an epoch mean.
///
/// `recon` is the unit-variance Gaussian log-likelihood (≤ 0) and
/// `predictiveness` the attribute log-likelihood (≤ 0); both enter `total`
/// with a minus sign. `kl` (≥ 0), `tc` and `l_ctp` enter with a plus sign.
/// `recon` and `kl` are already divided by each record's length when the
/// ELBO is scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub predictiveness: f64,
    pub tc: f64,
    pub l_ctp: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.recon, self.kl, self.predictiveness, self.tc, self.l_ctp, self.total].iter().all(|v| v.is_finite())
    }

    /// `total` recomputed from the parts.
    pub fn recombine(&self, h: &SteerHyperparams) -> f64 {
        steer_loss(self, h, 1.0)
    }

    fn add_scaled(&mut self, o: &LossBreakdown, w: f64) {
        self.recon += w * o.recon;
        self.kl += w * o.kl;
        self.predictiveness += w * o.predictiveness;
        self.tc += w * o.tc;
        self.l_ctp += w * o.l_ctp;
        self.total += w * o.total;
    }
}

/// Minimised objective from loss parts; `elbo_scale` multiplies the ELBO
/// (pass `1/T` for unscaled parts of a length-`T` record, 1 otherwise).
pub fn steer_loss(parts: &LossBreakdown, h: &SteerHyperparams, elbo_scale: f64) -> f64 {
    -h.beta * elbo_scale * (parts.recon - parts.kl) - h.alpha * parts.predictiveness
        + h.gamma * parts.tc
        + h.theta * parts.l_ctp
}

/// `KL(N(mu, exp(logvar)) || N(0, 1))` summed over entries.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter().zip(logvar).map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv)).sum()
}

/// `(recon, kl)` of one record from plain values.
///
/// `x` and `x_hat` are `T x m`; `recon` sums over steps where `mask` is set,
/// `kl` over every row of the partition. Both are divided by `T` when
/// `scale_by_t`.
pub fn elbo_terms(x: &Array2<f64>, x_hat: &Array2<f64>, part: &LatentPartition, mask: &[bool], scale_by_t: bool) -> (f64, f64) {
    let mut recon = 0.0;
    for ((xr, hr), m) in x.rows().into_iter().zip(x_hat.rows()).zip(mask) {
        if *m {
            recon -= 0.5 * xr.iter().zip(hr).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
    }
    let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
    let kl = gaussian_kl(&flat(&part.z_mu), &flat(&part.z_logvar)) + gaussian_kl(&flat(&part.b_mu), &flat(&part.b_logvar));
    let s = if scale_by_t { 1.0 / x.nrows().max(1) as f64 } else { 1.0 };
    (s * recon, s * kl)
}

/// `mu + exp(logvar / 2) * eps` with standard-normal `eps` drawn from `seed`.
pub fn reparameterize(mu: &Array2<f64>, logvar: &Array2<f64>, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Array2::from_shape_simple_fn(mu.dim(), || rng.sample::<f64, _>(StandardNormal));
    let lv = logvar.mapv(|v| v.clamp(-LOGVAR_BOUND, LOGVAR_BOUND));
    mu + &(lv.mapv(|v| (0.5 * v).exp()) * eps)
}

/// Per-epoch loss history.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SteerHistory {
    pub train: Vec<LossBreakdown>,
    pub val: Vec<LossBreakdown>,
    pub disc_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl SteerHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,recon,kl,predictiveness,tc,l_ctp,total,disc_loss\n");
        for (split, rows) in [("train", &self.train), ("val", &self.val)] {
            for (e, r) in rows.iter().enumerate() {
                let d = if split == "train" { self.disc_loss.get(e).copied().unwrap_or(f64::NAN) } else { f64::NAN };
                let _ = writeln!(
                    out,
                    "{e},{split},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{d:.6}",
                    r.recon, r.kl, r.predictiveness, r.tc, r.l_ctp, r.total
                );
            }
        }
        out
    }
}

struct Forward {
    lat: LatentVars,
    x_hat: Var,
    clinical: Var,
    pooled_b: Var,
    /// Joint `(z, b)` rows seen by the discriminator.
    joint: Var,
}

struct TermVars {
    recon: Var,
    kl: Var,
    pred: Var,
    tc: Var,
    l_ctp: Var,
}

#[derive(Clone, Debug)]
pub struct SteerModel {
    pub cfg: SteerConfig,
    pub task: Task,
    pub in_dim: usize,
    pub params: ParamStore,
    pub encoder: TcnEncoder,
    pub z_mu: Linear,
    pub z_logvar: Linear,
    pub b_mu: Linear,
    pub b_logvar: Linear,
    pub decoder: TcnEncoder,
    pub decoder_out: Linear,
    pub clinical: Linear,
    /// Hidden and output layer per sensitive channel.
    pub predictors: Vec<(Linear, Linear)>,
    pub disc_params: ParamStore,
    pub disc: Vec<Linear>,
}

impl SteerModel {
    pub fn new(cfg: &SteerConfig, task: Task, in_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let h = &cfg.hyper;
        let mut enc_cfg = cfg.encoder.clone();
        enc_cfg.kind = EncoderKind::Tcn;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = TcnEncoder::named("enc", &enc_cfg, in_dim, &[], &mut params, &mut rng)?;
        let hd = encoder.hidden_dim();
        let z_mu = Linear::new(&mut params, "z_mu", hd, h.nz, &mut rng);
        let z_logvar = zero_linear(&mut params, "z_logvar", hd, h.nz);
        let b_mu = Linear::new(&mut params, "b_mu", hd, h.sensitive_dim, &mut rng);
        let b_logvar = zero_linear(&mut params, "b_logvar", hd, h.sensitive_dim);
        let mut dec_cfg = enc_cfg.clone();
        dec_cfg.tcn.blocks = cfg.decoder_blocks;
        dec_cfg.tcn.fc = vec![];
        let latent = h.nz + h.sensitive_dim;
        let decoder = TcnEncoder::named("dec", &dec_cfg, latent, &[], &mut params, &mut rng)?;
        let decoder_out = Linear::new(&mut params, "dec.out", decoder.hidden_dim(), in_dim, &mut rng);
        let clinical = Linear::new(&mut params, "clinical", h.nz, task.output_dim(), &mut rng);
        let predictors = (0..h.sensitive_dim)
            .map(|j| {
                (
                    Linear::new(&mut params, &format!("pred{j}.0"), 1, cfg.predictor_hidden, &mut rng),
                    Linear::new(&mut params, &format!("pred{j}.1"), cfg.predictor_hidden, 2, &mut rng),
                )
            })
            .collect();
        let mut disc_params = ParamStore::new();
        let mut disc = Vec::with_capacity(cfg.disc_layers);
        let mut d = latent;
        for i in 0..cfg.disc_layers {
            let out = if i + 1 == cfg.disc_layers { 2 } else { cfg.disc_width };
            disc.push(Linear::new(&mut disc_params, &format!("disc.{i}"), d, out, &mut rng));
            d = out;
        }
        Ok(Self {
            cfg: cfg.clone(),
            task,
            in_dim,
            params,
            encoder,
            z_mu,
            z_logvar,
            b_mu,
            b_logvar,
            decoder,
            decoder_out,
            clinical,
            predictors,
            disc_params,
            disc,
        })
    }

    fn hyper(&self) -> &SteerHyperparams {
        &self.cfg.hyper
    }

    fn pooled(&self) -> bool {
        self.hyper().latent_mode == LatentMode::Pooled
    }

    fn check(&self, batch: &Batch) -> Result<()> {
        if batch.channels() != self.in_dim {
            return Err(Error::shape(format!("model expects {} channels, batch has {}", self.in_dim, batch.channels())));
        }
        Ok(())
    }

    /// Rows of the latent matrices: all tokens, or one per record when pooled.
    fn latent_rows(&self, batch: &Batch) -> usize {
        if self.pooled() {
            batch.size()
        } else {
            batch.size() * batch.t_max()
        }
    }

    /// Latent rows the discriminator sees: valid tokens, or all records.
    fn disc_rows(&self, batch: &Batch) -> Vec<usize> {
        if self.pooled() {
            return (0..batch.size()).collect();
        }
        let t = batch.t_max();
        (0..batch.size()).flat_map(|b| (0..batch.lengths[b]).map(move |s| b * t + s)).collect()
    }

    /// Standard-normal draws and channel permutations for one batch.
    pub fn draw_noise<R: Rng>(&self, batch: &Batch, rng: &mut R) -> StepNoise {
        let rows = self.latent_rows(batch);
        let h = self.hyper();
        let eps_z = Array2::from_shape_simple_fn((rows, h.nz), || rng.sample(StandardNormal));
        let eps_b = Array2::from_shape_simple_fn((rows, h.sensitive_dim), || rng.sample(StandardNormal));
        let n = self.disc_rows(batch).len();
        let perms = (0..h.sensitive_dim)
            .map(|_| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        StepNoise { eps_z, eps_b, perms }
    }

    /// Zero noise: samples equal the means and permutations are identities.
    pub fn zero_noise(&self, batch: &Batch) -> StepNoise {
        let rows = self.latent_rows(batch);
        let n = self.disc_rows(batch).len();
        StepNoise {
            eps_z: Array2::zeros((rows, self.hyper().nz)),
            eps_b: Array2::zeros((rows, self.hyper().sensitive_dim)),
            perms: vec![(0..n).collect(); self.hyper().sensitive_dim],
        }
    }

    fn encode_vars(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, noise: &StepNoise) -> LatentVars {
        let (bs, t) = (batch.size(), batch.t_max());
        let x = tape.constant(batch.tokens());
        let mut h = self.encoder.forward(tape, store, x, &[], bs, t);
        if self.pooled() {
            h = tape.map_rows(h, Rc::new(RowMap::masked_mean(t, &batch.lengths)));
        }
        let head = |tape: &mut Tape, mu: &Linear, lv: &Linear, eps: &Array2<f64>| {
            let m = mu.forward(tape, store, h);
            let l = lv.forward(tape, store, h);
            let l = tape.clamp(l, -LOGVAR_BOUND, LOGVAR_BOUND);
            let half = tape.scale(l, 0.5);
            let sd = tape.exp(half);
            let e = tape.constant(eps.clone());
            let noise = tape.mul(sd, e);
            let sample = tape.add(m, noise);
            (m, l, sample)
        };
        let (z_mu, z_logvar, z) = head(tape, &self.z_mu, &self.z_logvar, &noise.eps_z);
        let (b_mu, b_logvar, b) = head(tape, &self.b_mu, &self.b_logvar, &noise.eps_b);
        LatentVars { z_mu, z_logvar, b_mu, b_logvar, z, b }
    }

    fn forward_with(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, noise: &StepNoise) -> Forward {
        let (bs, t) = (batch.size(), batch.t_max());
        let lat = self.encode_vars(tape, store, batch, noise);
        let joint = tape.concat_cols(&[lat.z, lat.b]);
        let tile = |tape: &mut Tape, v: Var| tape.map_rows(v, Rc::new(RowMap::tile(bs, t)));
        let (dec_in, z_rows) = if self.pooled() { (tile(tape, joint), tile(tape, lat.z)) } else { (joint, lat.z) };
        let d = self.decoder.forward(tape, store, dec_in, &[], bs, t);
        let x_hat = self.decoder_out.forward(tape, store, d);
        let clinical = self.clinical.forward(tape, store, z_rows);
        let pooled_b =
            if self.pooled() { lat.b } else { tape.map_rows(lat.b, Rc::new(RowMap::masked_mean(t, &batch.lengths))) };
        let rows = self.disc_rows(batch);
        let joint = if self.pooled() {
            joint
        } else {
            let n = tape.shape(joint).0;
            let idx: Vec<Option<usize>> = rows.iter().map(|r| Some(*r)).collect();
            tape.map_rows(joint, Rc::new(RowMap::gather(n, &idx)))
        };
        Forward { lat, x_hat, clinical, pooled_b, joint }
    }

    /// Per-latent-row ELBO weights: valid steps (or records), divided by
    /// the record length when scaling.
    fn row_weights(&self, batch: &Batch) -> Array2<f64> {
        let (bs, t) = (batch.size(), batch.t_max());
        let scale = |b: usize| if self.hyper().scale_elbo_by_t { 1.0 / batch.lengths[b].max(1) as f64 } else { 1.0 };
        if self.pooled() {
            Array2::from_shape_fn((bs, 1), |(b, _)| scale(b))
        } else {
            Array2::from_shape_fn((bs * t, 1), |(r, _)| if r % t < batch.lengths[r / t] { scale(r / t) } else { 0.0 })
        }
    }

    fn token_weights(&self, batch: &Batch) -> Array2<f64> {
        let t = batch.t_max();
        let scale = |b: usize| if self.hyper().scale_elbo_by_t { 1.0 / batch.lengths[b].max(1) as f64 } else { 1.0 };
        let mut w = batch.token_mask();
        for (r, v) in w.column_mut(0).iter_mut().enumerate() {
            *v *= scale(r / t);
        }
        w
    }

    fn elbo_vars(&self, tape: &mut Tape, f: &Forward, batch: &Batch) -> (Var, Var) {
        let inv_b = 1.0 / batch.size() as f64;
        let x = tape.constant(batch.tokens());
        let d = tape.sub(f.x_hat, x);
        let sq = tape.square(d);
        let per_row = tape.row_sum(sq);
        let tw = tape.constant(self.token_weights(batch));
        let weighted = tape.mul(per_row, tw);
        let s = tape.sum(weighted);
        let recon = tape.scale(s, -0.5 * inv_b);
        let rw = tape.constant(self.row_weights(batch));
        let mut kl_rows = Vec::new();
        for (mu, lv) in [(f.lat.z_mu, f.lat.z_logvar), (f.lat.b_mu, f.lat.b_logvar)] {
            kl_rows.push(kl_per_row(tape, mu, lv));
        }
        let k = tape.add(kl_rows[0], kl_rows[1]);
        let kw = tape.mul(k, rw);
        let ks = tape.sum(kw);
        let kl = tape.scale(ks, inv_b);
        (recon, kl)
    }

    fn predictiveness_var(&self, tape: &mut Tape, store: &ParamStore, f: &Forward, set: &SteerSet, batch: &Batch) -> Var {
        let mut total: Option<Var> = None;
        for (j, (l0, l1)) in self.predictors.iter().enumerate() {
            let col = tape.slice_cols(f.pooled_b, j, 1);
            let h = l0.forward(tape, store, col);
            let h = tape.relu(h);
            let logits = l1.forward(tape, store, h);
            let (labels, weights) = set.column(&batch.indices, j);
            let ce = cross_entropy(tape, logits, &labels, Some(&weights));
            let ll = tape.neg(ce);
            total = Some(match total {
                Some(t) => tape.add(t, ll),
                None => ll,
            });
        }
        total.expect("sensitive_dim >= 1")
    }

    fn disc_logits(&self, tape: &mut Tape, disc: &ParamStore, x: Var, frozen: bool) -> Var {
        let mut h = x;
        for (i, l) in self.disc.iter().enumerate() {
            if i > 0 {
                h = tape.leaky_relu(h, self.cfg.disc_slope);
            }
            h = if frozen { l.forward_frozen(tape, disc, h) } else { l.forward(tape, disc, h) };
        }
        h
    }

    /// Mean over joint rows of `logit_real - logit_fake`.
    fn tc_var(&self, tape: &mut Tape, disc: &ParamStore, joint: Var) -> Var {
        let logits = self.disc_logits(tape, disc, joint, true);
        let real = tape.slice_cols(logits, 0, 1);
        let fake = tape.slice_cols(logits, 1, 1);
        let d = tape.sub(real, fake);
        tape.mean(d)
    }

    fn l_ctp_var(&self, tape: &mut Tape, f: &Forward, batch: &Batch) -> Result<Var> {
        match (&batch.targets, self.task) {
            (BatchTargets::Sofa { values, mask }, Task::Sofa) => {
                let n = values.len();
                let y = values.clone().into_shape_with_order((n, 1)).expect("contiguous");
                let m = mask.clone().into_shape_with_order((n, 1)).expect("contiguous");
                Ok(masked_mse(tape, f.clinical, &y, &m))
            }
            (BatchTargets::Ihm { labels }, Task::Ihm) => {
                let logits = reduce_last_step(tape, f.clinical, batch);
                Ok(cross_entropy(tape, logits, labels, None))
            }
            (_, task) => Err(Error::data(format!("batch targets do not match task {task:?}"))),
        }
    }

    fn terms_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        disc: &ParamStore,
        f: &Forward,
        set: &SteerSet,
        batch: &Batch,
    ) -> Result<TermVars> {
        let (recon, kl) = self.elbo_vars(tape, f, batch);
        let pred = self.predictiveness_var(tape, store, f, set, batch);
        let tc = self.tc_var(tape, disc, f.joint);
        let l_ctp = self.l_ctp_var(tape, f, batch)?;
        Ok(TermVars { recon, kl, pred, tc, l_ctp })
    }

    fn total_var(&self, tape: &mut Tape, t: &TermVars) -> Var {
        let h = self.hyper();
        let elbo = tape.sub(t.recon, t.kl);
        let a = tape.scale(elbo, -h.beta);
        let b = tape.scale(t.pred, -h.alpha);
        let c = tape.scale(t.tc, h.gamma);
        let d = tape.scale(t.l_ctp, h.theta);
        let ab = tape.add(a, b);
        let cd = tape.add(c, d);
        tape.add(ab, cd)
    }

    fn breakdown(tape: &Tape, t: &TermVars, total: Var) -> LossBreakdown {
        LossBreakdown {
            recon: tape.scalar(t.recon),
            kl: tape.scalar(t.kl),
            predictiveness: tape.scalar(t.pred),
            tc: tape.scalar(t.tc),
            l_ctp: tape.scalar(t.l_ctp),
            total: tape.scalar(total),
        }
    }

    /// Real joint rows and their per-channel permutation.
    fn real_and_fake(&self, joint: &Array2<f64>, noise: &StepNoise) -> (Array2<f64>, Array2<f64>) {
        let nz = self.hyper().nz;
        let mut fake = joint.clone();
        for (j, perm) in noise.perms.iter().enumerate() {
            let col = joint.column(nz + j);
            for (r, p) in perm.iter().enumerate() {
                fake[[r, nz + j]] = col[*p];
            }
        }
        (joint.clone(), fake)
    }

    fn disc_loss_with(&self, tape: &mut Tape, disc: &ParamStore, real: &Array2<f64>, fake: &Array2<f64>) -> Var {
        let r = tape.constant(real.clone());
        let f = tape.constant(fake.clone());
        let lr = self.disc_logits(tape, disc, r, false);
        let lf = self.disc_logits(tape, disc, f, false);
        let a = cross_entropy(tape, lr, &vec![0; real.nrows()], None);
        let b = cross_entropy(tape, lf, &vec![1; fake.nrows()], None);
        let s = tape.add(a, b);
        tape.scale(s, 0.5)
    }

    /// Loss parts of one batch in evaluation mode with the given noise.
    pub fn batch_breakdown(&self, set: &SteerSet, batch: &Batch, noise: &StepNoise) -> Result<LossBreakdown> {
        self.check(batch)?;
        let mut tape = Tape::new();
        let f = self.forward_with(&mut tape, &self.params, batch, noise);
        let t = self.terms_with(&mut tape, &self.params, &self.disc_params, &f, set, batch)?;
        let total = self.total_var(&mut tape, &t);
        Ok(Self::breakdown(&tape, &t, total))
    }

    /// One objective term of a batch on `tape`, as a function of the main
    /// parameters in `store` (the discriminator is held fixed).
    pub fn term_var(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        set: &SteerSet,
        batch: &Batch,
        noise: &StepNoise,
        term: LossTerm,
    ) -> Result<Var> {
        self.check(batch)?;
        let f = self.forward_with(tape, store, batch, noise);
        let t = self.terms_with(tape, store, &self.disc_params, &f, set, batch)?;
        Ok(match term {
            LossTerm::Recon => t.recon,
            LossTerm::Kl => t.kl,
            LossTerm::Predictiveness => t.pred,
            LossTerm::Tc => t.tc,
            LossTerm::LCtp => t.l_ctp,
            LossTerm::Total => self.total_var(tape, &t),
        })
    }

    /// Discriminator loss of a batch as a function of the discriminator
    /// parameters in `disc`, on real versus permuted latents.
    pub fn disc_loss_var(&self, tape: &mut Tape, disc: &ParamStore, batch: &Batch, noise: &StepNoise) -> Result<Var> {
        self.check(batch)?;
        let mut scratch = Tape::new();
        let f = self.forward_with(&mut scratch, &self.params, batch, noise);
        let (real, fake) = self.real_and_fake(scratch.value(f.joint), noise);
        Ok(self.disc_loss_with(tape, disc, &real, &fake))
    }

    /// Mean loss parts over `set`, with noise drawn from `seed`.
    pub fn dataset_breakdown(&self, set: &SteerSet, batch_size: usize, seed: u64) -> Result<LossBreakdown> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = LossBreakdown::default();
        let mut n = 0.0;
        for batch in make_batches(&set.samples, batch_size, None)? {
            if self.disc_rows(&batch).len() < 2 {
                continue;
            }
            let noise = self.draw_noise(&batch, &mut rng);
            let w = batch.size() as f64;
            acc.add_scaled(&self.batch_breakdown(set, &batch, &noise)?, w);
            n += w;
        }
        if n == 0.0 {
            return Err(Error::data("no batch with at least two discriminator rows"));
        }
        let mut out = LossBreakdown::default();
        out.add_scaled(&acc, 1.0 / n);
        Ok(out)
    }

    /// Posterior of every record in a batch (evaluation mode).
    pub fn encode_batch(&self, batch: &Batch, noise: &StepNoise) -> Result<Vec<LatentPartition>> {
        self.check(batch)?;
        let mut tape = Tape::new();
        let lat = self.encode_vars(&mut tape, &self.params, batch, noise);
        let t = batch.t_max();
        let cut = |v: Var, b: usize| {
            let m = tape.value(v);
            if self.pooled() {
                m.slice(s![b..b + 1, ..]).to_owned()
            } else {
                m.slice(s![b * t..b * t + batch.lengths[b], ..]).to_owned()
            }
        };
        Ok((0..batch.size())
            .map(|b| LatentPartition {
                z_mu: cut(lat.z_mu, b),
                z_logvar: cut(lat.z_logvar, b),
                b_mu: cut(lat.b_mu, b),
                b_logvar: cut(lat.b_logvar, b),
                z_sample: cut(lat.z, b),
                b_sample: cut(lat.b, b),
            })
            .collect())
    }

    /// Posterior means of every sample, in sample order.
    pub fn encode(&self, samples: &[TaskSample], batch_size: usize) -> Result<Vec<LatentPartition>> {
        let mut out = vec![None; samples.len()];
        for batch in make_batches(samples, batch_size, None)? {
            let noise = self.zero_noise(&batch);
            for (i, p) in batch.indices.iter().zip(self.encode_batch(&batch, &noise)?) {
                out[*i] = Some(p);
            }
        }
        Ok(out.into_iter().map(|p| p.expect("every sample batched")).collect())
    }

    /// Clinical-head outputs from `z` rows alone.
    pub fn clinical_from_z(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(z.clone());
        let o = self.clinical.forward(&mut tape, &self.params, v);
        tape.value(o).clone()
    }

    /// Per-step SOFA predictions, or one mortality probability per record.
    pub fn predict(&self, samples: &[TaskSample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        self.encode(samples, batch_size)?
            .iter()
            .zip(samples)
            .map(|(p, s)| {
                let z = if self.pooled() {
                    p.z_mu.broadcast((s.len(), self.hyper().nz)).expect("one row").to_owned()
                } else {
                    p.z_mu.clone()
                };
                let out = self.clinical_from_z(&z);
                Ok(match self.task {
                    Task::Sofa => out.column(0).to_vec(),
                    Task::Ihm => {
                        let last = out.row(out.nrows() - 1);
                        vec![crate::autograd::sigmoid(last[1] - last[0])]
                    }
                })
            })
            .collect()
    }

    /// Test utility of the `z` head: RMSE for SOFA, AUC for IHM.
    pub fn utility(&self, samples: &[TaskSample], batch_size: usize, n_boot: usize, seed: u64) -> Result<MetricReport> {
        let preds = self.predict(samples, batch_size)?;
        match self.task {
            Task::Sofa => rmse_report("rmse", &sofa_tallies(samples, &preds), n_boot, seed),
            Task::Ihm => {
                let probs: Vec<f64> = preds.iter().map(|p| p[0]).collect();
                let labels: Vec<bool> =
                    samples.iter().map(|s| matches!(s.target, crate::data::Target::Ihm(true))).collect();
                auc_report("auc", &probs, &labels, n_boot, seed)
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars() + self.disc_params.num_scalars()
    }
}

fn zero_linear(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Linear {
    let w = store.add_zeros(format!("{name}.weight"), in_dim, out_dim);
    let b = store.add_zeros(format!("{name}.bias"), 1, out_dim);
    Linear { w, b, in_dim, out_dim }
}

/// `½ Σ_d (μ² + exp(lv) - 1 - lv)` per row.
fn kl_per_row(tape: &mut Tape, mu: Var, logvar: Var) -> Var {
    let d = tape.shape(mu).1 as f64;
    let m2 = tape.square(mu);
    let v = tape.exp(logvar);
    let a = tape.add(m2, v);
    let a = tape.sub(a, logvar);
    let s = tape.row_sum(a);
    let s = tape.add_scalar(s, -d);
    tape.scale(s, 0.5)
}

/// One-stage training: per batch a discriminator step on real versus
/// permuted latents, then a main step on the full objective with the
/// discriminator frozen. Early stopping monitors the validation total.
pub fn train_steer(model: &mut SteerModel, train: &SteerSet, val: &SteerSet, cfg: &TrainConfig) -> Result<SteerHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    if model.task == Task::Sofa {
        if let Some(mean) = mean_target(&train.samples) {
            let b = model.clinical.b;
            model.params.get_mut(b).fill(mean);
        }
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.params);
    let mut disc_opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.disc_params);
    if let Some(c) = cfg.clip_norm {
        opt = opt.with_clip_norm(c);
        disc_opt = disc_opt.with_clip_norm(c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_seed = cfg.seed ^ 0x5eed;
    let mut history = SteerHistory::default();
    let mut best: Option<(f64, ParamStore, ParamStore)> = None;
    let mut since_best = 0;
    let mut step = 0;
    let diverged = |epoch: usize, step: usize, b: &LossBreakdown, h: &SteerHistory| {
        let mut detail = format!("loss breakdown {b:?}; epoch trace:\n");
        detail.push_str(&h.to_csv());
        Error::Diverged { epoch, step, detail }
    };
    for epoch in 0..cfg.epochs {
        let mut acc = LossBreakdown::default();
        let (mut n, mut disc_total) = (0.0, 0.0);
        for batch in epoch_batches(&train.samples, cfg, rng.random())? {
            model.check(&batch)?;
            if model.disc_rows(&batch).len() < 2 {
                continue;
            }
            let noise = model.draw_noise(&batch, &mut rng);
            let mut tape = Tape::training(ChaCha8Rng::seed_from_u64(rng.random()));
            let f = model.forward_with(&mut tape, &model.params, &batch, &noise);

            let (real, fake) = model.real_and_fake(tape.value(f.joint), &noise);
            let mut dv = 0.0;
            for k in 0..model.cfg.disc_steps {
                let mut dt = Tape::new();
                let dl = model.disc_loss_with(&mut dt, &model.disc_params, &real, &fake);
                if k == 0 {
                    dv = dt.scalar(dl);
                }
                let grads = dt.backward(dl).for_store(&model.disc_params);
                disc_opt.step(&mut model.disc_params, &grads);
            }

            let t = model.terms_with(&mut tape, &model.params, &model.disc_params, &f, train, &batch)?;
            let total = model.total_var(&mut tape, &t);
            let b = SteerModel::breakdown(&tape, &t, total);
            if !b.is_finite() || !dv.is_finite() {
                return Err(diverged(epoch, step, &b, &history));
            }
            let grads = tape.backward(total).for_store(&model.params);
            opt.step(&mut model.params, &grads);
            let w = batch.size() as f64;
            acc.add_scaled(&b, w);
            disc_total += w * dv;
            n += w;
            step += 1;
        }
        let mut mean = LossBreakdown::default();
        mean.add_scaled(&acc, 1.0 / n.max(f64::MIN_POSITIVE));
        history.train.push(mean);
        history.disc_loss.push(disc_total / n.max(f64::MIN_POSITIVE));
        if val.is_empty() {
            history.best_epoch = epoch;
            continue;
        }
        let v = model.dataset_breakdown(val, cfg.batch_size, val_seed)?;
        if !v.is_finite() {
            return Err(diverged(epoch, step, &v, &history));
        }
        history.val.push(v);
        if best.as_ref().is_none_or(|(b, _, _)| v.total < *b) {
            best = Some((v.total, model.params.clone(), model.disc_params.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, p, d)) = best {
        restore(&mut model.params, &p);
        restore(&mut model.disc_params, &d);
    }
    Ok(history)
}

/// Masked-mean pooled posterior means, one row per sample: `(z, b)`.
pub fn pooled_latents(model: &SteerModel, samples: &[TaskSample], batch_size: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let parts = model.encode(samples, batch_size)?;
    let pool = |f: fn(&LatentPartition) -> &Array2<f64>, d: usize| {
        let mut out = Array2::zeros((parts.len(), d));
        for (i, p) in parts.iter().enumerate() {
            out.row_mut(i).assign(&f(p).mean_axis(Axis(0)).expect("non-empty"));
        }
        out
    };
    let h = model.hyper();
    Ok((pool(|p| &p.z_mu, h.nz), pool(|p| &p.b_mu, h.sensitive_dim)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SanitizeMode {
    /// Replace `b` with zeros.
    Discard,
    /// Replace `b` with standard-normal draws.
    Noise,
}

/// Posterior means with the sensitive part removed.
#[derive(Clone, Debug, PartialEq)]
pub struct SanitizedLatents {
    pub z: Vec<Array2<f64>>,
    pub b: Vec<Array2<f64>>,
}

/// Discard or noise out `b`; `z` is returned unchanged.
pub fn noise_out_sensitive(
    model: &SteerModel,
    samples: &[TaskSample],
    mode: SanitizeMode,
    seed: u64,
    batch_size: usize,
) -> Result<SanitizedLatents> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = model.encode(samples, batch_size)?;
    let b = parts
        .iter()
        .map(|p| match mode {
            SanitizeMode::Discard => Array2::zeros(p.b_mu.dim()),
            SanitizeMode::Noise => Array2::from_shape_simple_fn(p.b_mu.dim(), || rng.sample(StandardNormal)),
        })
        .collect();
    Ok(SanitizedLatents { z: parts.into_iter().map(|p| p.z_mu).collect(), b })
}

impl SanitizedLatents {
    /// Per-record mean of the `b` rows.
    pub fn pooled_b(&self) -> Array2<f64> {
        let d = self.b.first().map_or(0, |b| b.ncols());
        let mut out = Array2::zeros((self.b.len(), d));
        for (i, b) in self.b.iter().enumerate() {
            out.row_mut(i).assign(&b.mean_axis(Axis(0)).expect("non-empty"));
        }
        out
    }
}

/// Probe AUCs from `b` and from `z` per attribute, plus `z`-head utility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub attributes: Vec<String>,
    pub auc_from_b: Vec<MetricReport>,
    pub auc_from_z: Vec<MetricReport>,
    pub utility: MetricReport,
}

impl DisentanglementReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,attribute,metric,point,ci_low,ci_high\n");
        for (src, rows) in [("b", &self.auc_from_b), ("z", &self.auc_from_z)] {
            for (a, m) in self.attributes.iter().zip(rows.iter()) {
                let _ = writeln!(out, "{src},{a},auc,{:.4},{:.4},{:.4}", m.point, m.ci_low, m.ci_high);
            }
        }
        let u = &self.utility;
        let _ = writeln!(out, "z-head,task,{},{:.4},{:.4},{:.4}", u.metric_name, u.point, u.ci_low, u.ci_high);
        out
    }
}

/// Probe rows of one attribute: representations of labelled samples.
fn labelled(reps: &Array2<f64>, set: &SteerSet, j: usize) -> (Array2<f64>, Vec<bool>) {
    let keep: Vec<usize> = (0..set.len()).filter(|i| set.sensitive[*i][j].is_some()).collect();
    let y = keep.iter().map(|i| set.sensitive[*i][j].expect("filtered")).collect();
    (reps.select(Axis(0), &keep), y)
}

/// Fit a probe on `train` rows of `reps_tr` and report test AUC.
pub fn probe_auc(
    reps_tr: &Array2<f64>,
    train: &SteerSet,
    reps_te: &Array2<f64>,
    test: &SteerSet,
    j: usize,
    cfg: &ProbeConfig,
) -> Result<MetricReport> {
    let (xtr, ytr) = labelled(reps_tr, train, j);
    let (xte, yte) = labelled(reps_te, test, j);
    let probe = train_probe(&xtr, &ytr, cfg)?;
    auc_report("auc", &probe.predict(&xte), &yte, cfg.n_boot, cfg.seed)
}

/// Fresh probes on pooled `b` and pooled `z` (trained on `train`, scored
/// on `test`) and the `z`-head test utility.
pub fn disentanglement_eval(
    model: &SteerModel,
    train: &SteerSet,
    test: &SteerSet,
    probe: &ProbeConfig,
    batch_size: usize,
) -> Result<DisentanglementReport> {
    let (ztr, btr) = pooled_latents(model, &train.samples, batch_size)?;
    let (zte, bte) = pooled_latents(model, &test.samples, batch_size)?;
    let mut auc_from_b = Vec::new();
    let mut auc_from_z = Vec::new();
    for j in 0..model.cfg.attributes.len() {
        auc_from_b.push(probe_auc(&btr, train, &bte, test, j, probe)?);
        auc_from_z.push(probe_auc(&ztr, train, &zte, test, j, probe)?);
    }
    let utility = model.utility(&test.samples, batch_size, probe.n_boot, probe.seed)?;
    Ok(DisentanglementReport { attributes: model.cfg.attributes.clone(), auc_from_b, auc_from_z, utility })
}

#[cfg(test)]
mod tests;
