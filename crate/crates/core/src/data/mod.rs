//! Cohorts of hourly multichannel ICU stays: synthetic generation, file
//! ingestion, task labelling, partitioning and padded batching.

mod batch;
mod io;
mod split;
mod synth;
mod tasks;

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use batch::{make_batches, make_bucketed_batches, Batch, BatchTargets, Batches};
pub use io::{export_dataset, load_dataset, read_dataset, write_dataset};
pub use split::{partition_hash, split, Partition, SplitRatios};
pub use synth::{attribute_code, generate_cohort, SynthConfig};
pub use tasks::{
    age_median, binarize_statics, filter_cohort, make_ihm_labels, make_sofa_samples, make_sofa_targets,
    static_features, unlabeled_samples, BinaryLabels, Target, TaskSample, STATIC_FEATURE_DIM,
};

/// Shortest admissible stay, in hours.
pub const MIN_STAY_H: usize = 24;
/// Longest admissible stay, in hours.
pub const MAX_STAY_H: usize = 240;
pub const MIN_AGE_YEARS: f64 = 18.0;
pub const MAX_SOFA: u8 = 24;

/// The fifteen comorbidity flags carried by every record, in canonical order.
pub const COMORBIDITIES: [&str; 15] = [
    "chf",
    "arrhythmia",
    "valvular",
    "pulmonary_circulation",
    "peripheral_vascular",
    "hypertension",
    "paralysis",
    "neurological",
    "chronic_pulmonary",
    "diabetes",
    "diabetes_complicated",
    "hypothyroidism",
    "renal",
    "sld",
    "cancer",
];

/// Every static attribute name: demographics first, then comorbidities.
pub fn attribute_names() -> Vec<&'static str> {
    let mut names = vec!["sex", "age", "race"];
    names.extend(COMORBIDITIES);
    names
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Race {
    Black,
    White,
    Other,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticLabels {
    pub sex: Sex,
    pub age_years: f64,
    pub race: Race,
    pub comorbidities: BTreeMap<String, bool>,
}

/// One ICU stay.
///
/// `x` is `m x T`. Records are stored unpadded, so `mask` is all-true unless
/// the record was loaded from a file that carries explicit trailing padding.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesRecord {
    pub record_id: String,
    pub x: Array2<f64>,
    pub mask: Vec<bool>,
    pub statics: StaticLabels,
    pub sofa: Vec<u8>,
    pub death_hour: Option<u32>,
    pub dataset_tag: String,
}

impl TimeSeriesRecord {
    pub fn channels(&self) -> usize {
        self.x.nrows()
    }

    /// Number of observed hours.
    pub fn len(&self) -> usize {
        self.mask.iter().take_while(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn died(&self) -> bool {
        self.death_hour.is_some()
    }
}
