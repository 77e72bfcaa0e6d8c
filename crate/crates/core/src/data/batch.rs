use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Target, TaskSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum BatchTargets {
    None,
    /// `values` and `mask` are `batch x t_max`; padding is masked out.
    Sofa { values: Array2<f64>, mask: Array2<f64> },
    Ihm { labels: Vec<usize> },
}

/// Padded batch. Content beyond each record's length is zero and masked.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Positions of the batch members in the source slice.
    pub indices: Vec<usize>,
    /// `batch x m x t_max`.
    pub x: Array3<f64>,
    /// `batch x t_max`, 1.0 on observed steps.
    pub mask: Array2<f64>,
    pub lengths: Vec<usize>,
    pub targets: BatchTargets,
    /// `batch x static_dim`.
    pub statics: Array2<f64>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn t_max(&self) -> usize {
        self.x.dim().2
    }

    pub fn channels(&self) -> usize {
        self.x.dim().1
    }

    /// Batch-major token matrix: row `b * t_max + t` holds `x[b, .., t]`.
    pub fn tokens(&self) -> Array2<f64> {
        let (b, m, t) = self.x.dim();
        let mut out = Array2::zeros((b * t, m));
        for bi in 0..b {
            for c in 0..m {
                for ti in 0..self.lengths[bi] {
                    out[[bi * t + ti, c]] = self.x[[bi, c, ti]];
                }
            }
        }
        out
    }

    /// Mask as a `batch * t_max x 1` column in token order.
    pub fn token_mask(&self) -> Array2<f64> {
        let (b, t) = self.mask.dim();
        self.mask.clone().into_shape_with_order((b * t, 1)).expect("contiguous mask")
    }

    /// Assemble a batch from the listed samples.
    pub fn from_samples(samples: &[TaskSample], indices: &[usize]) -> Self {
        let members: Vec<&TaskSample> = indices.iter().map(|i| &samples[*i]).collect();
        let b = members.len();
        let m = members.first().map_or(0, |s| s.x.nrows());
        let t_max = members.iter().map(|s| s.len()).max().unwrap_or(0);
        let sd = members.first().map_or(0, |s| s.statics.len());
        let mut x = Array3::zeros((b, m, t_max));
        let mut mask = Array2::zeros((b, t_max));
        let mut statics = Array2::zeros((b, sd));
        let mut lengths = Vec::with_capacity(b);
        for (bi, s) in members.iter().enumerate() {
            let len = s.len();
            lengths.push(len);
            for c in 0..m {
                for t in 0..len {
                    x[[bi, c, t]] = s.x[[c, t]];
                }
            }
            for t in 0..len {
                mask[[bi, t]] = 1.0;
            }
            for (j, v) in s.statics.iter().enumerate() {
                statics[[bi, j]] = *v;
            }
        }
        let targets = match members.first().map(|s| &s.target) {
            Some(Target::Sofa(_)) => {
                let mut values = Array2::zeros((b, t_max));
                let mut tmask = Array2::zeros((b, t_max));
                for (bi, s) in members.iter().enumerate() {
                    if let Target::Sofa(v) = &s.target {
                        for (t, y) in v.iter().enumerate().take(t_max) {
                            values[[bi, t]] = *y;
                            tmask[[bi, t]] = 1.0;
                        }
                    }
                }
                BatchTargets::Sofa { values, mask: tmask }
            }
            Some(Target::Ihm(_)) => BatchTargets::Ihm {
                labels: members.iter().map(|s| matches!(s.target, Target::Ihm(true)) as usize).collect(),
            },
            _ => BatchTargets::None,
        };
        Batch { indices: indices.to_vec(), x, mask, lengths, targets, statics }
    }
}

/// Iterator over padded batches; see [`make_batches`].
pub struct Batches<'a> {
    samples: &'a [TaskSample],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = Batch::from_samples(self.samples, &self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Padded batches covering every sample exactly once; shuffled when a seed is given.
pub fn make_batches(samples: &[TaskSample], batch_size: usize, shuffle_seed: Option<u64>) -> Result<Batches<'_>> {
    if batch_size < 1 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches { samples, order, batch_size, pos: 0 })
}

/// Shuffled batches of similar-length samples.
///
/// The shuffled order is cut into pools of `pool_batches * batch_size`
/// samples, each pool is sorted by length and cut into batches, and the
/// batch order is shuffled again. Every sample appears exactly once.
pub fn make_bucketed_batches(
    samples: &[TaskSample],
    batch_size: usize,
    pool_batches: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 1 || pool_batches < 1 {
        return Err(Error::config("batch_size and pool_batches must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for pool in order.chunks_mut(batch_size * pool_batches) {
        pool.sort_by_key(|i| samples[*i].len());
        groups.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    groups.shuffle(&mut rng);
    Ok(groups.iter().map(|g| Batch::from_samples(samples, g)).collect())
}
