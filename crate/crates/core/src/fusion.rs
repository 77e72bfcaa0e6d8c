//! Static-feature fusion into a TCN task model and penalty analysis.
//!
//! Fusion points follow the TCN block layout:
//!
//! ```text
//! x ─(I)─ TB1 ─(II)─ TB2 ─(III)─ TB3 ─(IV)─ TB4 ─(V)─ FC stack ─(VI)─ head
//! ```
//!
//! Point I concatenates the raw static vector to the input channels. Every
//! other point passes the statics through its own MLP first. The static
//! vector (or its embedding) is repeated across time steps and concatenated
//! on the feature axis, so the layer right after the point gets wider.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::rc::Rc;
use std::str::FromStr;

use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, RowMap, Tape, Var};
use crate::data::{partition_hash, Batch, TaskSample, STATIC_FEATURE_DIM};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::seqmodels::{Encoder, EncoderConfig, EncoderKind, Task, TaskModel, TcnEncoder};
use crate::training::{evaluate, train_supervised, MetricReport, Supervised, TrainConfig, TrainHistory, DEFAULT_N_BOOT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FusionPoint {
    I,
    II,
    III,
    IV,
    V,
    VI,
}

impl FusionPoint {
    pub const ALL: [FusionPoint; 6] = [Self::I, Self::II, Self::III, Self::IV, Self::V, Self::VI];

    pub fn label(self) -> &'static str {
        match self {
            Self::I => "I",
            Self::II => "II",
            Self::III => "III",
            Self::IV => "IV",
            Self::V => "V",
            Self::VI => "VI",
        }
    }

    /// Index into the TCN's fusion slots (block inputs, then the FC input); `None` for VI.
    fn tcn_slot(self) -> Option<usize> {
        match self {
            Self::I => Some(0),
            Self::II => Some(1),
            Self::III => Some(2),
            Self::IV => Some(3),
            Self::V => Some(4),
            Self::VI => None,
        }
    }
}

impl fmt::Display for FusionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FusionPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.label() == s)
            .ok_or_else(|| Error::config(format!("unknown fusion point {s:?}; expected one of I, II, III, IV, V, VI")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Regularization {
    #[default]
    None,
    L1 { lambda: f64 },
    L2 { lambda: f64 },
}

impl Regularization {
    pub fn l1() -> Self {
        Self::L1 { lambda: 0.001 }
    }

    pub fn l2() -> Self {
        Self::L2 { lambda: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSpec {
    pub points: BTreeSet<FusionPoint>,
    /// Static MLP widths before scaling.
    pub mlp_widths: Vec<usize>,
    pub mlp_dropout: f64,
    pub regularization: Regularization,
}

impl Default for FusionSpec {
    fn default() -> Self {
        Self { points: BTreeSet::new(), mlp_widths: vec![256; 3], mlp_dropout: 0.2, regularization: Regularization::None }
    }
}

impl FusionSpec {
    pub fn with_points(points: &[FusionPoint]) -> Self {
        Self { points: points.iter().copied().collect(), ..Default::default() }
    }

    /// Points label such as `I+V+VI`, or `none`.
    pub fn name(&self) -> String {
        if self.points.is_empty() {
            return "none".into();
        }
        self.points.iter().map(|p| p.label()).collect::<Vec<_>>().join("+")
    }

    /// Parse `none` or a `+`-separated list of point labels.
    pub fn parse_points(s: &str) -> Result<BTreeSet<FusionPoint>> {
        if s.trim() == "none" || s.trim().is_empty() {
            return Ok(BTreeSet::new());
        }
        s.split('+').map(|p| p.trim().parse()).collect()
    }
}

/// A TCN task model with static features fused at selected points.
#[derive(Clone, Debug)]
pub struct FusedModel {
    pub cfg: EncoderConfig,
    pub spec: FusionSpec,
    pub task: Task,
    pub encoder: TcnEncoder,
    pub mlps: BTreeMap<FusionPoint, Mlp>,
    pub head: Linear,
    pub params: ParamStore,
}

/// Copy `src` into the leading rows of each of `blocks` row blocks of `dst`.
fn copy_blocks(dst: &mut ndarray::Array2<f64>, src: &ndarray::Array2<f64>, blocks: usize) {
    let (dr, sr) = (dst.nrows() / blocks, src.nrows() / blocks);
    for j in 0..blocks {
        dst.slice_mut(s![j * dr..j * dr + sr, ..]).assign(&src.slice(s![j * sr..(j + 1) * sr, ..]));
    }
}

/// Fused copy of a trained or untrained TCN task model.
///
/// Base weights are copied; weight rows that read fused columns start at
/// zero, so the fused model initially computes exactly what the base does.
pub fn build_fused_model(base: &TaskModel, spec: &FusionSpec, seed: u64) -> Result<FusedModel> {
    let Encoder::Tcn(base_enc) = &base.encoder else {
        return Err(Error::config(format!("fusion needs a TCN base model, got {}", base.cfg.kind.name())));
    };
    let mut cfg = base.cfg.clone();
    cfg.kind = EncoderKind::Tcn;
    let widths: Vec<usize> = spec.mlp_widths.iter().map(|w| cfg.width(*w)).collect::<Result<_>>()?;
    let emb = widths.last().copied().unwrap_or(STATIC_FEATURE_DIM);
    let width_at = |p: FusionPoint| if p == FusionPoint::I { STATIC_FEATURE_DIM } else { emb };
    let mut extra = vec![0; base_enc.blocks.len() + 1];
    for p in &spec.points {
        match p.tcn_slot() {
            Some(i) if i < extra.len() => extra[i] = width_at(*p),
            Some(_) => return Err(Error::config(format!("point {p} needs a {}-block TCN", base_enc.blocks.len()))),
            None => {}
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let encoder = TcnEncoder::new(&cfg, base_enc.in_dim, &extra, &mut params, &mut rng)?;
    let head_in = encoder.hidden_dim() + if spec.points.contains(&FusionPoint::VI) { emb } else { 0 };
    let head = Linear::new(&mut params, "head", head_in, base.head.out_dim, &mut rng);
    let mut mlps = BTreeMap::new();
    for p in spec.points.iter().filter(|p| **p != FusionPoint::I) {
        let mlp = Mlp::new(&mut params, &format!("fusion.{p}"), STATIC_FEATURE_DIM, &widths, spec.mlp_dropout, &mut rng);
        mlps.insert(*p, mlp);
    }
    for (_, name, value) in base.params.iter() {
        let id = params.id(name).ok_or_else(|| Error::config(format!("fused model lacks base parameter {name}")))?;
        let dst = params.get_mut(id);
        if dst.dim() == value.dim() {
            dst.assign(value);
        } else {
            dst.fill(0.0);
            let blocks = if name.ends_with("conv1.weight") { cfg.tcn.kernel_size } else { 1 };
            copy_blocks(dst, value, blocks);
        }
    }
    Ok(FusedModel { cfg, spec: spec.clone(), task: base.task, encoder, mlps, head, params })
}

impl FusedModel {
    fn embed(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, point: FusionPoint, raw: Var) -> Var {
        let per_record = match self.mlps.get(&point) {
            Some(mlp) => mlp.forward(tape, store, raw),
            None => raw,
        };
        tape.map_rows(per_record, Rc::new(RowMap::tile(batch.size(), batch.t_max())))
    }

    /// Hidden rows after the FC stack, with the point VI embedding appended.
    pub fn hidden(&self, tape: &mut Tape, batch: &Batch) -> Var {
        self.hidden_with(tape, &self.params, batch)
    }

    /// [`Self::hidden`] with parameters read from `store`.
    pub fn hidden_with(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Var {
        let raw = tape.constant(batch.statics.clone());
        let mut extras = vec![None; self.encoder.blocks.len() + 1];
        for p in &self.spec.points {
            if let Some(i) = p.tcn_slot() {
                extras[i] = Some(self.embed(tape, store, batch, *p, raw));
            }
        }
        let x = tape.constant(batch.tokens());
        let h = self.encoder.forward(tape, store, x, &extras, batch.size(), batch.t_max());
        if self.spec.points.contains(&FusionPoint::VI) {
            let e = self.embed(tape, store, batch, FusionPoint::VI, raw);
            tape.concat_cols(&[h, e])
        } else {
            h
        }
    }

    /// Weight matrices of the fusion MLPs (points II to VI).
    pub fn fusion_weights(&self) -> Vec<ParamId> {
        self.mlps.values().flat_map(|m| m.layers.iter().map(|l| l.w)).collect()
    }

    /// Weight matrices outside the fusion MLPs.
    pub fn main_weights(&self) -> Vec<ParamId> {
        let fusion: BTreeSet<ParamId> = self.mlps.values().flat_map(Mlp::params).collect();
        self.params
            .iter()
            .filter(|(id, name, _)| !fusion.contains(id) && name.ends_with(".weight"))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Weight penalty on the fusion MLPs, `None` when unregularised.
    pub fn penalty_with(&self, tape: &mut Tape, store: &ParamStore) -> Option<Var> {
        let (lambda, l1) = match self.spec.regularization {
            Regularization::None => return None,
            Regularization::L1 { lambda } => (lambda, true),
            Regularization::L2 { lambda } => (lambda, false),
        };
        let mut terms = Vec::new();
        for id in self.fusion_weights() {
            let w = tape.param(store, id);
            let t = if l1 {
                // |w| = relu(w) + relu(-w)
                let pos = tape.relu(w);
                let nw = tape.neg(w);
                let neg = tape.relu(nw);
                let a = tape.add(pos, neg);
                tape.sum(a)
            } else {
                let sq = tape.square(w);
                tape.sum(sq)
            };
            terms.push(t);
        }
        let mut total = *terms.first()?;
        for t in &terms[1..] {
            total = tape.add(total, *t);
        }
        Some(tape.scale(total, lambda))
    }
}

impl Supervised for FusedModel {
    fn task(&self) -> Task {
        self.task
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn outputs(&self, tape: &mut Tape, batch: &Batch) -> Var {
        let h = self.hidden(tape, batch);
        self.head.forward(tape, &self.params, h)
    }

    fn output_bias(&self) -> ParamId {
        self.head.b
    }

    /// Penalty on the fusion MLP weights only.
    fn penalty(&self, tape: &mut Tape) -> Option<Var> {
        self.penalty_with(tape, &self.params)
    }
}

/// Mean absolute value over a set of weight matrices.
pub fn mean_abs(store: &ParamStore, ids: &[ParamId]) -> f64 {
    let (sum, n) = ids.iter().fold((0.0, 0usize), |(s, n), id| {
        let w = store.get(*id);
        (s + w.iter().map(|x| x.abs()).sum::<f64>(), n + w.len())
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeRow {
    pub block: String,
    pub before: f64,
    pub after: f64,
    /// `log10(before) - log10(after)`.
    pub reduction: f64,
}

impl MagnitudeRow {
    fn new(block: String, before: f64, after: f64) -> Self {
        Self { block, before, after, reduction: before.log10() - after.log10() }
    }
}

/// Mean |w| of a penalised model against an unpenalised twin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMagnitudeReport {
    pub regularization: Regularization,
    /// One row per fusion MLP (points II to VI).
    pub fusion: Vec<MagnitudeRow>,
    /// All non-fusion weight matrices pooled.
    pub main: MagnitudeRow,
}

impl WeightMagnitudeReport {
    pub fn min_fusion_reduction(&self) -> f64 {
        self.fusion.iter().map(|r| r.reduction).fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,before,after,reduction_orders\n");
        for r in self.fusion.iter().chain(std::iter::once(&self.main)) {
            let _ = writeln!(out, "{},{:.6e},{:.6e},{:.4}", r.block, r.before, r.after, r.reduction);
        }
        out
    }
}

/// Compare a penalised model's weight magnitudes with its unpenalised twin.
/// Both must share the same fusion points.
pub fn weight_magnitudes(twin: &FusedModel, penalised: &FusedModel) -> Result<WeightMagnitudeReport> {
    if twin.spec.points != penalised.spec.points {
        return Err(Error::config("twin and penalised models fuse at different points"));
    }
    let fusion = twin
        .mlps
        .iter()
        .map(|(p, m)| {
            let ids: Vec<ParamId> = m.layers.iter().map(|l| l.w).collect();
            let other: Vec<ParamId> = penalised.mlps[p].layers.iter().map(|l| l.w).collect();
            MagnitudeRow::new(format!("fusion.{p}"), mean_abs(&twin.params, &ids), mean_abs(&penalised.params, &other))
        })
        .collect();
    let main = MagnitudeRow::new(
        "main".into(),
        mean_abs(&twin.params, &twin.main_weights()),
        mean_abs(&penalised.params, &penalised.main_weights()),
    );
    Ok(WeightMagnitudeReport { regularization: penalised.spec.regularization, fusion, main })
}

/// The six configurations of the fusion study.
pub fn study_specs() -> Vec<BTreeSet<FusionPoint>> {
    use FusionPoint::*;
    [vec![], vec![I], vec![V], vec![VI], vec![I, V, VI], FusionPoint::ALL.to_vec()]
        .into_iter()
        .map(|p| p.into_iter().collect())
        .collect()
}

/// Shared settings for every run of a fusion study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub mlp_widths: Vec<usize>,
    pub mlp_dropout: f64,
    pub n_boot: usize,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        let spec = FusionSpec::default();
        Self {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            mlp_widths: spec.mlp_widths,
            mlp_dropout: spec.mlp_dropout,
            n_boot: DEFAULT_N_BOOT,
            seed: 0,
        }
    }
}

impl StudyConfig {
    pub fn spec(&self, points: &BTreeSet<FusionPoint>, regularization: Regularization) -> FusionSpec {
        FusionSpec { points: points.clone(), mlp_widths: self.mlp_widths.clone(), mlp_dropout: self.mlp_dropout, regularization }
    }
}

/// SOFA samples of one split.
#[derive(Clone, Copy, Debug)]
pub struct StudyData<'a> {
    pub train: &'a [TaskSample],
    pub val: &'a [TaskSample],
    pub test: &'a [TaskSample],
}

impl StudyData<'_> {
    fn in_dim(&self) -> Result<usize> {
        self.train.first().map(|s| s.x.nrows()).ok_or_else(|| Error::data("empty training set"))
    }
}

/// Build and train one fused model. Every spec starts from the same base
/// initialisation and sees the same batch order.
pub fn train_fused(data: StudyData<'_>, cfg: &StudyConfig, spec: &FusionSpec) -> Result<(FusedModel, TrainHistory)> {
    let mut enc = cfg.encoder.clone();
    enc.kind = EncoderKind::Tcn;
    let base = TaskModel::new(&enc, Task::Sofa, data.in_dim()?, cfg.seed)?;
    let mut model = build_fused_model(&base, spec, cfg.seed.wrapping_add(1))?;
    let train = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let history = train_supervised(&mut model, data.train, data.val, &train)?;
    Ok((model, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionRun {
    pub config: String,
    pub rmse: MetricReport,
    pub history: TrainHistory,
}

/// Test RMSE per fusion configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionTable {
    pub test_partition_hash: String,
    pub runs: Vec<FusionRun>,
}

impl FusionTable {
    pub fn get(&self, config: &str) -> Option<&MetricReport> {
        self.runs.iter().find(|r| r.config == config).map(|r| &r.rmse)
    }

    /// Configurations whose interval does not overlap the no-fusion one.
    pub fn non_overlapping(&self) -> Vec<&str> {
        let Some(base) = self.get("none") else { return vec![] };
        self.runs.iter().filter(|r| !r.rmse.overlaps(base)).map(|r| r.config.as_str()).collect()
    }

    /// Largest relative RMSE reduction against no fusion.
    pub fn best_improvement(&self) -> Option<f64> {
        let base = self.get("none")?.point;
        self.runs.iter().filter(|r| r.config != "none").map(|r| 1.0 - r.rmse.point / base).reduce(f64::max)
    }

    /// One column per configuration; rows are rmse, ci_low, ci_high.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for r in &self.runs {
            let _ = write!(out, ",{}", r.config);
        }
        out.push('\n');
        for (name, f) in [
            ("rmse", (|m: &MetricReport| m.point) as fn(&MetricReport) -> f64),
            ("ci_low", |m| m.ci_low),
            ("ci_high", |m| m.ci_high),
        ] {
            out.push_str(name);
            for r in &self.runs {
                let _ = write!(out, ",{:.4}", f(&r.rmse));
            }
            out.push('\n');
        }
        out
    }
}

pub fn fusion_study(data: StudyData<'_>, cfg: &StudyConfig, specs: &[BTreeSet<FusionPoint>]) -> Result<FusionTable> {
    let ids: Vec<&str> = data.test.iter().map(|s| s.record_id.as_str()).collect();
    let mut runs = Vec::with_capacity(specs.len());
    for points in specs {
        let spec = cfg.spec(points, Regularization::None);
        let (model, history) = train_fused(data, cfg, &spec)?;
        let rmse = evaluate(&model, data.test, cfg.train.batch_size, cfg.n_boot, cfg.seed)?;
        runs.push(FusionRun { config: spec.name(), rmse, history });
    }
    Ok(FusionTable { test_partition_hash: partition_hash(ids), runs })
}

/// Train an unpenalised twin and a penalised copy of the all-level fusion
/// model and compare their weight magnitudes.
///
/// Both runs use the full epoch budget with no validation selection, so
/// the final weights are compared.
pub fn regularization_analysis(data: StudyData<'_>, cfg: &StudyConfig, reg: Regularization) -> Result<WeightMagnitudeReport> {
    let data = StudyData { val: &[], ..data };
    let all: BTreeSet<FusionPoint> = FusionPoint::ALL.into_iter().collect();
    let (twin, _) = train_fused(data, cfg, &cfg.spec(&all, Regularization::None))?;
    let (penalised, _) = train_fused(data, cfg, &cfg.spec(&all, reg))?;
    weight_magnitudes(&twin, &penalised)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BatchTargets, Target};
    use crate::seqmodels::TcnConfig;
    use crate::autograd::check::max_param_grad_error;
    use ndarray::Array2;
    use rand::Rng;

    fn base_cfg() -> EncoderConfig {
        EncoderConfig {
            kind: EncoderKind::Tcn,
            tcn: TcnConfig { blocks: 4, channels: 8, fc: vec![8, 8], dropout: 0.0, kernel_size: 2 },
            scale: 1.0,
            ..Default::default()
        }
    }

    fn spec(points: &[FusionPoint]) -> FusionSpec {
        FusionSpec { mlp_widths: vec![8, 8, 8], mlp_dropout: 0.0, ..FusionSpec::with_points(points) }
    }

    fn batch(seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<TaskSample> = [6, 4]
            .iter()
            .map(|len| TaskSample {
                record_id: format!("r{len}"),
                x: Array2::from_shape_fn((3, *len), |_| rng.random_range(-1.0..1.0)),
                target: Target::Sofa(vec![5.0; *len]),
                statics: (0..STATIC_FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        Batch::from_samples(&samples, &[0, 1])
    }

    fn outputs<M: Supervised>(m: &M, b: &Batch) -> Array2<f64> {
        let mut t = Tape::new();
        let o = m.outputs(&mut t, b);
        t.value(o).clone()
    }

    #[test]
    fn empty_spec_is_the_base_model() {
        let base = TaskModel::new(&base_cfg(), Task::Sofa, 3, 1).unwrap();
        let fused = build_fused_model(&base, &spec(&[]), 2).unwrap();
        assert_eq!(fused.params, base.params);
        let b = batch(0);
        assert_eq!(outputs(&fused, &b), outputs(&base, &b));
    }

    #[test]
    fn fresh_fusion_starts_at_the_base_function() {
        let base = TaskModel::new(&base_cfg(), Task::Sofa, 3, 1).unwrap();
        let b = batch(1);
        let expected = outputs(&base, &b);
        for points in [vec![FusionPoint::VI], FusionPoint::ALL.to_vec(), vec![FusionPoint::I, FusionPoint::III]] {
            let fused = build_fused_model(&base, &spec(&points), 3).unwrap();
            let got = outputs(&fused, &b);
            for (x, y) in got.iter().zip(&expected) {
                assert!((x - y).abs() < 1e-12, "{points:?}");
            }
        }
    }

    #[test]
    fn parameter_count_for_all_points() {
        let base = TaskModel::new(&base_cfg(), Task::Sofa, 3, 1).unwrap();
        let fused = build_fused_model(&base, &spec(&FusionPoint::ALL), 3).unwrap();
        let (k, e, s) = (2, 8, STATIC_FEATURE_DIM);
        let mlp = (s * 8 + 8) + 2 * (8 * 8 + 8);
        // point I widens block0 conv1 by s inputs per lag; II-IV widen conv1 of blocks 1-3 by e;
        // V widens fc0 by e; VI widens the head by e
        let widened = k * s * 8 + 3 * (k * e * 8) + e * 8 + e;
        assert_eq!(fused.num_params(), base.num_params() + 5 * mlp + widened);
    }

    #[test]
    fn tiled_embedding_is_constant_over_time() {
        let base = TaskModel::new(&base_cfg(), Task::Sofa, 3, 1).unwrap();
        let fused = build_fused_model(&base, &spec(&[FusionPoint::VI]), 3).unwrap();
        let b = batch(2);
        let mut t = Tape::new();
        let raw = t.constant(b.statics.clone());
        let e = fused.embed(&mut t, &fused.params, &b, FusionPoint::VI, raw);
        let v = t.value(e);
        let tm = b.t_max();
        for r in 0..2 {
            for step in 1..tm {
                assert_eq!(v.row(r * tm + step), v.row(r * tm));
            }
        }
    }

    #[test]
    fn penalty_touches_only_fusion_mlps() {
        let base = TaskModel::new(&base_cfg(), Task::Sofa, 3, 1).unwrap();
        for reg in [Regularization::l1(), Regularization::l2()] {
            let mut s = spec(&FusionPoint::ALL);
            s.regularization = reg;
            let fused = build_fused_model(&base, &s, 3).unwrap();
            let mut t = Tape::new();
            let p = fused.penalty(&mut t).unwrap();
            let grads = t.backward(p).for_store(&fused.params);
            let fusion: BTreeSet<ParamId> = fused.fusion_weights().into_iter().collect();
            for id in fused.params.ids() {
                let g = grads[id.index()].as_ref().map_or(0.0, |g| g.iter().map(|x| x.abs()).sum());
                assert_eq!(g > 0.0, fusion.contains(&id), "{}", fused.params.name(id));
            }
        }
    }

    #[test]
    fn fused_gradients_match_finite_differences() {
        let base = TaskModel::new(&base_cfg(), Task::Sofa, 3, 1).unwrap();
        let mut s = spec(&FusionPoint::ALL);
        s.regularization = Regularization::l2();
        let mut fused = build_fused_model(&base, &s, 3).unwrap();
        // move zero-initialised rows off zero so every weight is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for id in fused.params.ids().collect::<Vec<_>>() {
            fused.params.get_mut(id).mapv_inplace(|v| v + rng.random_range(-0.05..0.05));
        }
        let b = batch(3);
        let BatchTargets::Sofa { values, mask } = &b.targets else { unreachable!() };
        let n = values.len();
        let (y, m) = (values.clone().into_shape_with_order((n, 1)).unwrap(), mask.clone().into_shape_with_order((n, 1)).unwrap());
        let err = max_param_grad_error(&fused.params, 1e-5, 1e-4, |t, store| {
            let h = fused.hidden_with(t, store, &b);
            let out = fused.head.forward(t, store, h);
            let loss = crate::nn::masked_mse(t, out, &y, &m);
            let pen = fused.penalty_with(t, store).unwrap();
            t.add(loss, pen)
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn duplicate_specs_give_identical_rows() {
        use crate::data::{filter_cohort, generate_cohort, make_sofa_samples, SynthConfig};
        let records = filter_cohort(generate_cohort(&SynthConfig { n_records: 30, m: 3, t_range: [30, 40], ..Default::default() }).unwrap());
        let samples = make_sofa_samples(&records, 24);
        let data = StudyData { train: &samples[..16], val: &samples[16..20], test: &samples[20..] };
        let cfg = StudyConfig {
            encoder: base_cfg(),
            train: TrainConfig { epochs: 2, batch_size: 8, ..Default::default() },
            mlp_widths: vec![8, 8, 8],
            n_boot: 50,
            ..Default::default()
        };
        let vi: BTreeSet<FusionPoint> = [FusionPoint::VI].into_iter().collect();
        let table = fusion_study(data, &cfg, &[BTreeSet::new(), vi.clone(), vi]).unwrap();
        assert_eq!(table.runs[1], table.runs[2]);
        assert_ne!(table.runs[0].rmse.point, table.runs[1].rmse.point);
        let csv = table.to_csv();
        assert!(csv.starts_with("metric,none,VI,VI\nrmse,"), "{csv}");
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn point_labels_round_trip() {
        assert_eq!(FusionSpec::parse_points("I+V+VI").unwrap().len(), 3);
        assert!(FusionSpec::parse_points("VII").is_err());
        assert_eq!(FusionSpec::with_points(&FusionPoint::ALL).name(), "I+II+III+IV+V+VI");
        assert_eq!(study_specs().len(), 6);
        let lstm = TaskModel::new(&EncoderConfig::of_kind(EncoderKind::Lstm), Task::Sofa, 3, 0).unwrap();
        assert!(build_fused_model(&lstm, &spec(&[FusionPoint::I]), 0).is_err());
    }
}
