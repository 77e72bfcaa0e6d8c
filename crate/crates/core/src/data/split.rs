use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.7, val: 0.15, test: 0.15 }
    }
}

/// Disjoint, exhaustive index sets, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    /// Hash of the test record ids; see [`partition_hash`].
    pub fn test_hash<S: AsRef<str>>(&self, ids: &[S]) -> String {
        partition_hash(self.test.iter().map(|i| ids[*i].as_ref()))
    }
}

/// Order-independent SHA-256 over a set of record ids.
pub fn partition_hash<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.sort_unstable();
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Seeded partition of `n` items. With `stratify`, positives and negatives
/// are split separately so each part keeps the label rate.
pub fn split(n: usize, ratios: SplitRatios, seed: u64, stratify: Option<&[Option<bool>]>) -> Result<Partition> {
    let parts = [ratios.train, ratios.val, ratios.test];
    if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios {parts:?} must be non-negative and sum to 1")));
    }
    let groups: Vec<Vec<usize>> = match stratify {
        None => vec![(0..n).collect()],
        Some(labels) => {
            if labels.len() != n {
                return Err(Error::data(format!("stratification labels: {} for {n} items", labels.len())));
            }
            if let Some(i) = labels.iter().position(Option::is_none) {
                return Err(Error::data(format!("stratification label missing for item {i}")));
            }
            let pos = (0..n).filter(|i| labels[*i] == Some(true)).collect();
            let neg = (0..n).filter(|i| labels[*i] == Some(false)).collect();
            vec![pos, neg]
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Partition::default();
    for mut g in groups {
        g.shuffle(&mut rng);
        let len = g.len() as f64;
        let n_train = (ratios.train * len).round() as usize;
        let n_val = ((ratios.val * len).round() as usize).min(g.len() - n_train.min(g.len()));
        let n_train = n_train.min(g.len());
        out.train.extend_from_slice(&g[..n_train]);
        out.val.extend_from_slice(&g[n_train..n_train + n_val]);
        out.test.extend_from_slice(&g[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_for_100() {
        let p = split(100, SplitRatios::default(), 3, None).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (70, 15, 15));
        let mut all: Vec<usize> = p.train.iter().chain(&p.val).chain(&p.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = split(57, SplitRatios::default(), 9, None).unwrap();
        assert_eq!(a, split(57, SplitRatios::default(), 9, None).unwrap());
        assert_ne!(a, split(57, SplitRatios::default(), 10, None).unwrap());
    }

    #[test]
    fn stratified_rate_is_preserved() {
        let labels: Vec<Option<bool>> = (0..200).map(|i| Some(i % 10 == 0)).collect();
        for seed in 0..20 {
            let p = split(200, SplitRatios::default(), seed, Some(&labels)).unwrap();
            let pos = p.test.iter().filter(|i| labels[**i] == Some(true)).count() as f64;
            let expected = 0.1 * p.test.len() as f64;
            assert!((pos - expected).abs() <= 2.0, "seed {seed}: {pos} vs {expected}");
        }
    }

    #[test]
    fn missing_label_or_bad_ratios_rejected() {
        let labels = vec![Some(true), None, Some(false)];
        assert!(split(3, SplitRatios::default(), 0, Some(&labels)).is_err());
        let bad = SplitRatios { train: 0.5, val: 0.2, test: 0.2 };
        assert!(split(3, bad, 0, None).is_err());
    }

    #[test]
    fn hash_ignores_order() {
        assert_eq!(partition_hash(["b", "a"]), partition_hash(["a", "b"]));
        assert_ne!(partition_hash(["a"]), partition_hash(["a", "b"]));
    }
}
