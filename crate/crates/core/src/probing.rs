//! Static-attribute probes on raw series and frozen hidden representations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::optim::Optimizer;
use crate::autograd::{ParamStore, Tape};
use crate::data::{make_batches, unlabeled_samples, BinaryLabels, Partition, TaskSample, TimeSeriesRecord};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Linear};
use crate::seqmodels::TaskModel;
use crate::training::{auc_report, MetricReport};

/// Width of the probe's hidden layer.
pub const PROBE_HIDDEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    MaskedMean,
    LastStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub pooling: Pooling,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub n_boot: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { pooling: Pooling::MaskedMean, epochs: 50, lr: 1e-3, batch_size: 64, seed: 0, n_boot: 1000 }
    }
}

/// Pool a `T x d` sequence over its first `len` steps.
pub fn pool(h: &Array2<f64>, len: usize, pooling: Pooling) -> Vec<f64> {
    assert!(len > 0 && len <= h.nrows(), "pool over {len} of {} steps", h.nrows());
    match pooling {
        Pooling::MaskedMean => h.slice(ndarray::s![..len, ..]).mean_axis(Axis(0)).expect("non-empty").to_vec(),
        Pooling::LastStep => h.row(len - 1).to_vec(),
    }
}

/// Pooled raw inputs, one row per record.
pub fn raw_representations(samples: &[TaskSample], pooling: Pooling) -> Array2<f64> {
    let m = samples.first().map_or(0, |s| s.x.nrows());
    let mut out = Array2::zeros((samples.len(), m));
    for (i, s) in samples.iter().enumerate() {
        let v = pool(&s.x.t().to_owned(), s.len(), pooling);
        out.row_mut(i).assign(&ndarray::Array1::from(v));
    }
    out
}

/// Pooled hidden representations of a frozen task model, one row per record.
pub fn extract_hidden(model: &TaskModel, samples: &[TaskSample], pooling: Pooling, batch_size: usize) -> Result<Array2<f64>> {
    let d = model.encoder.hidden_dim();
    let mut out = Array2::zeros((samples.len(), d));
    for batch in make_batches(samples, batch_size, None)? {
        let seqs = model.encode(&batch)?;
        for (seq, (i, len)) in seqs.iter().zip(batch.indices.iter().zip(&batch.lengths)) {
            out.row_mut(*i).assign(&ndarray::Array1::from(pool(&seq.h, *len, pooling)));
        }
    }
    Ok(out)
}

/// Two-layer classifier on standardised representations.
#[derive(Clone, Debug)]
pub struct Probe {
    pub params: ParamStore,
    l1: Linear,
    l2: Linear,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Probe {
    fn standardise(&self, reps: &Array2<f64>) -> Array2<f64> {
        let mut x = reps.clone();
        for mut row in x.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        x
    }

    fn logits(&self, tape: &mut Tape, x: Array2<f64>) -> crate::autograd::Var {
        let x = tape.constant(x);
        let h = self.l1.forward(tape, &self.params, x);
        let h = tape.relu(h);
        self.l2.forward(tape, &self.params, h)
    }

    /// Probability of the positive class per row.
    pub fn predict(&self, reps: &Array2<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let z = self.logits(&mut tape, self.standardise(reps));
        let lp = tape.log_softmax(z);
        tape.value(lp).column(1).mapv(f64::exp).to_vec()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }
}

/// Train a probe with cross-entropy on `reps` (rows) and binary `labels`.
pub fn train_probe(reps: &Array2<f64>, labels: &[bool], cfg: &ProbeConfig) -> Result<Probe> {
    if reps.nrows() != labels.len() {
        return Err(Error::shape(format!("{} representations for {} labels", reps.nrows(), labels.len())));
    }
    let pos = labels.iter().filter(|l| **l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::data(format!("probe training set has a single class ({pos} of {} positive)", labels.len())));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("probe batch_size must be at least 1"));
    }
    let d = reps.ncols();
    let mean = reps.mean_axis(Axis(0)).expect("non-empty").to_vec();
    let scale: Vec<f64> = reps
        .std_axis(Axis(0), 0.0)
        .iter()
        .map(|s| if *s > 1e-8 { *s } else { 1.0 })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::new();
    let l1 = Linear::new(&mut params, "probe.0", d, PROBE_HIDDEN, &mut rng);
    let l2 = Linear::new(&mut params, "probe.1", PROBE_HIDDEN, 2, &mut rng);
    let mut probe = Probe { params, l1, l2, mean, scale };
    let x = probe.standardise(reps);
    let y: Vec<usize> = labels.iter().map(|l| *l as usize).collect();
    let mut opt = Optimizer::adam(cfg.lr, &probe.params);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|i| y[*i]).collect();
            let mut tape = Tape::new();
            let z = probe.logits(&mut tape, xb);
            let loss = cross_entropy(&mut tape, z, &yb, None);
            let grads = tape.backward(loss).for_store(&probe.params);
            opt.step(&mut probe.params, &grads);
        }
    }
    Ok(probe)
}

/// Rows and labels of the records in `indices` that carry a label for `attribute`.
pub fn labelled_rows(
    reps: &Array2<f64>,
    ids: &[String],
    indices: &[usize],
    labels: &BinaryLabels,
    attribute: &str,
) -> (Array2<f64>, Vec<bool>) {
    let mut keep = Vec::new();
    let mut y = Vec::new();
    for i in indices {
        if let Some(l) = labels.get(attribute, &ids[*i]) {
            keep.push(*i);
            y.push(l);
        }
    }
    (reps.select(Axis(0), &keep), y)
}

/// A pooled representation of every record plus the ids they belong to.
#[derive(Clone, Debug)]
pub struct RepresentationSet {
    pub source: String,
    pub reps: Array2<f64>,
    pub ids: Vec<String>,
}

/// Raw-input and hidden-representation sets for the same records.
pub fn representation_sets(
    model: Option<&TaskModel>,
    records: &[TimeSeriesRecord],
    pooling: Pooling,
) -> Result<Vec<RepresentationSet>> {
    let samples = unlabeled_samples(records);
    let ids: Vec<String> = records.iter().map(|r| r.record_id.clone()).collect();
    let mut sets = vec![RepresentationSet { source: "raw".into(), reps: raw_representations(&samples, pooling), ids: ids.clone() }];
    if let Some(m) = model {
        sets.push(RepresentationSet {
            source: format!("{}-hidden", m.cfg.kind.name()),
            reps: extract_hidden(m, &samples, pooling, 64)?,
            ids,
        });
    }
    Ok(sets)
}

/// Table of probe AUCs: rows are representation sources, columns attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub train_site: String,
    pub test_site: String,
    pub test_partition_hash: String,
    pub pooling: Pooling,
    pub attributes: Vec<String>,
    /// `(source, cells)` with one cell per attribute, in `attributes` order.
    pub rows: Vec<(String, Vec<MetricReport>)>,
}

impl LeakageReport {
    pub fn cell(&self, source: &str, attribute: &str) -> Option<&MetricReport> {
        let col = self.attributes.iter().position(|a| a == attribute)?;
        self.rows.iter().find(|(s, _)| s == source).map(|(_, c)| &c[col])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,attribute,metric,point,ci_low,ci_high,n,n_boot,seed,train_site,test_site,test_partition_hash\n");
        for (source, cells) in &self.rows {
            for (a, c) in self.attributes.iter().zip(cells) {
                let _ = writeln!(
                    out,
                    "{source},{a},{},{:.6},{:.6},{:.6},{},{},{},{},{},{}",
                    c.metric_name, c.point, c.ci_low, c.ci_high, c.n, c.n_boot, c.seed, self.train_site, self.test_site,
                    self.test_partition_hash
                );
            }
        }
        out
    }

    /// Aligned text table, one row per source.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "probe AUC (95% CI), train site {} -> test site {}, pooling {:?}\ntest partition {}\n",
            self.train_site, self.test_site, self.pooling, self.test_partition_hash
        );
        let _ = write!(out, "{:<20}", "source");
        for a in &self.attributes {
            let _ = write!(out, " {a:>24}");
        }
        out.push('\n');
        for (source, cells) in &self.rows {
            let _ = write!(out, "{source:<20}");
            for c in cells {
                let _ = write!(out, " {:>24}", format!("{:.3} ({:.3}, {:.3})", c.point, c.ci_low, c.ci_high));
            }
            out.push('\n');
        }
        out
    }
}

/// Trained probes keyed by `(source, attribute)`, kept for transfer evaluation.
pub type ProbeSet = BTreeMap<(String, String), Probe>;

fn probe_seed(base: u64, source: usize, attribute: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add((source * 1000 + attribute) as u64)
}

/// Train one probe per source and attribute on the training partition and
/// score it on the test partition.
pub fn leakage_audit(
    model: Option<&TaskModel>,
    records: &[TimeSeriesRecord],
    partition: &Partition,
    labels: &BinaryLabels,
    attributes: &[&str],
    cfg: &ProbeConfig,
) -> Result<(LeakageReport, ProbeSet)> {
    for a in attributes {
        if !labels.has_attribute(a) {
            return Err(Error::data(format!("attribute {a} has no labels")));
        }
    }
    let sets = representation_sets(model, records, cfg.pooling)?;
    let ids: Vec<&str> = records.iter().map(|r| r.record_id.as_str()).collect();
    let site = records.first().map_or_else(String::new, |r| r.dataset_tag.clone());
    let mut probes = ProbeSet::new();
    let mut rows = Vec::new();
    for (si, set) in sets.iter().enumerate() {
        let mut cells = Vec::new();
        for (ai, a) in attributes.iter().enumerate() {
            let (x_train, y_train) = labelled_rows(&set.reps, &set.ids, &partition.train, labels, a);
            let probe = train_probe(&x_train, &y_train, &ProbeConfig { seed: probe_seed(cfg.seed, si, ai), ..cfg.clone() })?;
            let (x_test, y_test) = labelled_rows(&set.reps, &set.ids, &partition.test, labels, a);
            cells.push(auc_report("auc", &probe.predict(&x_test), &y_test, cfg.n_boot, cfg.seed)?);
            probes.insert((set.source.clone(), a.to_string()), probe);
        }
        rows.push((set.source.clone(), cells));
    }
    let report = LeakageReport {
        train_site: site.clone(),
        test_site: site,
        test_partition_hash: crate::data::partition_hash(partition.test.iter().map(|i| ids[*i])),
        pooling: cfg.pooling,
        attributes: attributes.iter().map(|a| a.to_string()).collect(),
        rows,
    };
    Ok((report, probes))
}

/// Apply in-site probes, unchanged, to the records of another site.
///
/// Only `eval_indices` of `foreign` are scored. No parameter of the task
/// model or the probes is updated.
pub fn cross_dataset_eval(
    model: Option<&TaskModel>,
    probes: &ProbeSet,
    train_site: &str,
    foreign: &[TimeSeriesRecord],
    eval_indices: &[usize],
    labels: &BinaryLabels,
    attributes: &[&str],
    cfg: &ProbeConfig,
) -> Result<LeakageReport> {
    if let (Some(m), Some(r)) = (model, foreign.first()) {
        if r.channels() != m.encoder.in_dim() {
            return Err(Error::shape(format!(
                "foreign records have {} channels, model expects {}",
                r.channels(),
                m.encoder.in_dim()
            )));
        }
    }
    let sets = representation_sets(model, foreign, cfg.pooling)?;
    let mut rows = Vec::new();
    for set in &sets {
        let mut cells = Vec::new();
        for a in attributes {
            let probe = probes
                .get(&(set.source.clone(), a.to_string()))
                .ok_or_else(|| Error::data(format!("no trained probe for {} / {a}", set.source)))?;
            if probe.input_dim() != set.reps.ncols() {
                return Err(Error::shape(format!(
                    "probe for {} expects {} features, got {}",
                    set.source,
                    probe.input_dim(),
                    set.reps.ncols()
                )));
            }
            let (x, y) = labelled_rows(&set.reps, &set.ids, eval_indices, labels, a);
            cells.push(auc_report("auc", &probe.predict(&x), &y, cfg.n_boot, cfg.seed)?);
        }
        rows.push((set.source.clone(), cells));
    }
    Ok(LeakageReport {
        train_site: train_site.to_string(),
        test_site: foreign.first().map_or_else(String::new, |r| r.dataset_tag.clone()),
        test_partition_hash: crate::data::partition_hash(eval_indices.iter().map(|i| foreign[*i].record_id.as_str())),
        pooling: cfg.pooling,
        attributes: attributes.iter().map(|a| a.to_string()).collect(),
        rows,
    })
}
