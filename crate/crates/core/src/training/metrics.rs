use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Area under the ROC curve by the Mann-Whitney statistic, ties counted one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("auc: {} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Undefined("auc: NaN score".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined(format!("auc: single class ({n_pos} positive, {n_neg} negative)")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    // sum of midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|k| labels[**k]).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Root mean squared error over entries where `mask` is true.
pub fn masked_rmse(preds: &Array2<f64>, targets: &Array2<f64>, mask: &Array2<bool>) -> Result<f64> {
    if preds.dim() != targets.dim() || preds.dim() != mask.dim() {
        return Err(Error::shape(format!(
            "masked_rmse: preds {:?}, targets {:?}, mask {:?}",
            preds.dim(),
            targets.dim(),
            mask.dim()
        )));
    }
    let mut sse = 0.0;
    let mut count = 0usize;
    for ((p, t), m) in preds.iter().zip(targets).zip(mask) {
        if *m {
            sse += (p - t).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Undefined("masked_rmse: no unmasked entries".into()));
    }
    Ok((sse / count as f64).sqrt())
}

/// Counts with rows = true class, columns = predicted class (0 = negative).
pub fn confusion_matrix(probs: &[f64], labels: &[bool], threshold: f64) -> [[u64; 2]; 2] {
    let mut m = [[0u64; 2]; 2];
    for (p, l) in probs.iter().zip(labels) {
        m[*l as usize][(*p >= threshold) as usize] += 1;
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric_name: String,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_boot: usize,
    pub seed: u64,
    /// Number of records the point estimate was computed on.
    pub n: usize,
    pub confusion: Option<[[u64; 2]; 2]>,
}

impl MetricReport {
    pub fn overlaps(&self, other: &MetricReport) -> bool {
        self.ci_low <= other.ci_high && other.ci_low <= self.ci_high
    }

    pub fn width(&self) -> f64 {
        self.ci_high - self.ci_low
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.4} ({:.4}, {:.4}) n={} n_boot={} seed={}",
            self.metric_name, self.point, self.ci_low, self.ci_high, self.n, self.n_boot, self.seed
        )
    }
}

pub const DEFAULT_N_BOOT: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Percentile bootstrap over record-level resampling.
///
/// `metric` receives a multiset of record indices and returns `None` when
/// the metric is undefined on it. Undefined resamples are skipped; more
/// than half undefined is an error. The interval is widened to contain
/// the point estimate when the percentiles fall on one side of it.
pub fn bootstrap_ci<F>(name: &str, n: usize, mut metric: F, n_boot: usize, level: f64, seed: u64) -> Result<MetricReport>
where
    F: FnMut(&[usize]) -> Option<f64>,
{
    if n == 0 {
        return Err(Error::data("bootstrap over an empty set"));
    }
    if !(0.0..1.0).contains(&level) {
        return Err(Error::config(format!("confidence level {level} outside [0, 1)")));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = metric(&all).ok_or_else(|| Error::Undefined(format!("{name} undefined on the full data")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n_boot);
    let mut idx = vec![0usize; n];
    for _ in 0..n_boot {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        if let Some(v) = metric(&idx) {
            values.push(v);
        }
    }
    let undefined = n_boot - values.len();
    if n_boot > 0 && 2 * undefined > n_boot {
        return Err(Error::Undefined(format!("{name} undefined on {undefined} of {n_boot} resamples")));
    }
    values.sort_by(f64::total_cmp);
    let (lo, hi) = if values.is_empty() {
        (point, point)
    } else {
        let alpha = (1.0 - level) / 2.0;
        (quantile(&values, alpha), quantile(&values, 1.0 - alpha))
    };
    Ok(MetricReport {
        metric_name: name.to_string(),
        point,
        ci_low: lo.min(point),
        ci_high: hi.max(point),
        n_boot,
        seed,
        n,
        confusion: None,
    })
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// AUC with a bootstrap interval and the confusion matrix at 0.5.
pub fn auc_report(name: &str, scores: &[f64], labels: &[bool], n_boot: usize, seed: u64) -> Result<MetricReport> {
    auc(scores, labels)?;
    let mut s = Vec::with_capacity(scores.len());
    let mut l = Vec::with_capacity(scores.len());
    let mut report = bootstrap_ci(
        name,
        scores.len(),
        |idx| {
            s.clear();
            l.clear();
            for i in idx {
                s.push(scores[*i]);
                l.push(labels[*i]);
            }
            auc(&s, &l).ok()
        },
        n_boot,
        DEFAULT_LEVEL,
        seed,
    )?;
    report.confusion = Some(confusion_matrix(scores, labels, 0.5));
    Ok(report)
}

/// Per-record squared-error totals, the unit of resampling for RMSE.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorTally {
    pub sse: f64,
    pub count: usize,
}

/// RMSE with a record-level bootstrap interval.
pub fn rmse_report(name: &str, tallies: &[ErrorTally], n_boot: usize, seed: u64) -> Result<MetricReport> {
    bootstrap_ci(
        name,
        tallies.len(),
        |idx| {
            let (sse, count) = idx.iter().fold((0.0, 0), |(s, c), i| (s + tallies[*i].sse, c + tallies[*i].count));
            (count > 0).then(|| (sse / count as f64).sqrt())
        },
        n_boot,
        DEFAULT_LEVEL,
        seed,
    )
}
