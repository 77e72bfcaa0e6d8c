use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2};

use super::{Race, Sex, StaticLabels, TimeSeriesRecord, COMORBIDITIES, MAX_STAY_H, MIN_AGE_YEARS, MIN_STAY_H};

/// Length of the vector produced by [`static_features`].
pub const STATIC_FEATURE_DIM: usize = 5 + COMORBIDITIES.len();

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    None,
    /// Per input step; `values[i]` is the score `horizon` hours after step `i`.
    Sofa(Vec<f64>),
    Ihm(bool),
}

/// A model-ready sequence: `x` is `m x len`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub record_id: String,
    pub x: Array2<f64>,
    pub target: Target,
    pub statics: Vec<f64>,
}

impl TaskSample {
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }
}

/// Numeric encoding of the static labels used for fusion:
/// sex code, standardised age, race one-hot (black, white, other), then the
/// fifteen comorbidity flags as 0/1.
pub fn static_features(s: &StaticLabels) -> Vec<f64> {
    let mut v = Vec::with_capacity(STATIC_FEATURE_DIM);
    v.push(match s.sex {
        Sex::Male => 1.0,
        Sex::Female => -1.0,
        Sex::Unknown => 0.0,
    });
    v.push((s.age_years - 65.0) / 16.8);
    v.extend(match s.race {
        Race::Black => [1.0, 0.0, 0.0],
        Race::White => [0.0, 1.0, 0.0],
        Race::Other => [0.0, 0.0, 1.0],
    });
    for name in COMORBIDITIES {
        v.push(if s.comorbidities.get(name).copied().unwrap_or(false) { 1.0 } else { 0.0 });
    }
    v
}

/// Adults whose stay lasted between 24 and 240 hours inclusive.
pub fn filter_cohort(records: Vec<TimeSeriesRecord>) -> Vec<TimeSeriesRecord> {
    records
        .into_iter()
        .filter(|r| r.statics.age_years >= MIN_AGE_YEARS && (MIN_STAY_H..=MAX_STAY_H).contains(&r.len()))
        .collect()
}

fn truncated(r: &TimeSeriesRecord, len: usize, target: Target) -> TaskSample {
    TaskSample {
        record_id: r.record_id.clone(),
        x: r.x.slice(s![.., ..len]).to_owned(),
        target,
        statics: static_features(&r.statics),
    }
}

/// Mortality samples over the first `window_h` hours.
///
/// Stays shorter than the window are dropped, as are deaths before
/// `window_h + gap_h`, so no positive outcome falls inside the gap.
pub fn make_ihm_labels(records: &[TimeSeriesRecord], window_h: usize, gap_h: usize) -> Vec<TaskSample> {
    records
        .iter()
        .filter(|r| r.len() >= window_h)
        .filter(|r| r.death_hour.is_none_or(|d| d as usize >= window_h + gap_h))
        .map(|r| truncated(r, window_h, Target::Ihm(r.died())))
        .collect()
}

/// Targets for input steps `0..T - horizon`: step `i` is paired with the
/// score at hour `i + horizon`. `None` when the stay is not longer than the horizon.
pub fn make_sofa_targets(record: &TimeSeriesRecord, horizon_h: usize) -> Option<Vec<f64>> {
    let t = record.len();
    (t > horizon_h).then(|| record.sofa[horizon_h..t].iter().map(|s| *s as f64).collect())
}

/// SOFA samples with inputs truncated to the steps that have a target.
pub fn make_sofa_samples(records: &[TimeSeriesRecord], horizon_h: usize) -> Vec<TaskSample> {
    records
        .iter()
        .filter_map(|r| {
            let targets = make_sofa_targets(r, horizon_h)?;
            Some(truncated(r, targets.len(), Target::Sofa(targets)))
        })
        .collect()
}

/// Full observed sequences without a task target (raw-data probing).
pub fn unlabeled_samples(records: &[TimeSeriesRecord]) -> Vec<TaskSample> {
    records.iter().map(|r| truncated(r, r.len(), Target::None)).collect()
}

pub fn age_median(records: &[TimeSeriesRecord]) -> f64 {
    let mut ages: Vec<f64> = records.iter().map(|r| r.statics.age_years).collect();
    if ages.is_empty() {
        return f64::NAN;
    }
    ages.sort_by(f64::total_cmp);
    let n = ages.len();
    if n % 2 == 1 {
        ages[n / 2]
    } else {
        0.5 * (ages[n / 2 - 1] + ages[n / 2])
    }
}

/// Binary attribute labels keyed by record id. A record absent from an
/// attribute's column is excluded from that attribute's task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BinaryLabels {
    columns: BTreeMap<String, HashMap<String, bool>>,
    age_median: f64,
}

impl BinaryLabels {
    pub fn get(&self, attribute: &str, record_id: &str) -> Option<bool> {
        self.columns.get(attribute)?.get(record_id).copied()
    }

    pub fn has_attribute(&self, attribute: &str) -> bool {
        self.columns.contains_key(attribute)
    }

    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    /// The age threshold used for the age classes.
    pub fn age_median(&self) -> f64 {
        self.age_median
    }

    pub fn column(&self, attribute: &str) -> Option<&HashMap<String, bool>> {
        self.columns.get(attribute)
    }
}

/// Binary reduction of the static labels.
///
/// age: `true` (class E) when `age >= age_median`, else class Y.
/// sex: male `true`; unknown excluded. race: black `true`, white `false`,
/// others excluded. Comorbidities pass through.
pub fn binarize_statics(records: &[TimeSeriesRecord], age_median: f64) -> BinaryLabels {
    let mut columns: BTreeMap<String, HashMap<String, bool>> = BTreeMap::new();
    for r in records {
        let id = r.record_id.clone();
        let s = &r.statics;
        match s.sex {
            Sex::Male => columns.entry("sex".into()).or_default().insert(id.clone(), true),
            Sex::Female => columns.entry("sex".into()).or_default().insert(id.clone(), false),
            Sex::Unknown => None,
        };
        match s.race {
            Race::Black => columns.entry("race".into()).or_default().insert(id.clone(), true),
            Race::White => columns.entry("race".into()).or_default().insert(id.clone(), false),
            Race::Other => None,
        };
        columns.entry("age".into()).or_default().insert(id.clone(), s.age_years >= age_median);
        for (name, flag) in &s.comorbidities {
            columns.entry(name.clone()).or_default().insert(id.clone(), *flag);
        }
    }
    BinaryLabels { columns, age_median }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_cohort, SynthConfig};
    use proptest::prelude::*;

    fn record(t: usize, age: f64, death: Option<u32>) -> TimeSeriesRecord {
        let mut r = generate_cohort(&SynthConfig { n_records: 1, t_range: [24, 24], ..Default::default() })
            .unwrap()
            .remove(0);
        r.x = Array2::zeros((3, t));
        r.mask = vec![true; t];
        r.sofa = (0..t).map(|i| (i % 25) as u8).collect();
        r.statics.age_years = age;
        r.death_hour = death;
        r
    }

    #[test]
    fn filter_boundaries() {
        let kept = filter_cohort(vec![
            record(23, 40.0, None),
            record(30, 17.9, None),
            record(240, 18.0, None),
            record(241, 50.0, None),
            record(24, 90.0, None),
        ]);
        let lens: Vec<usize> = kept.iter().map(|r| r.len()).collect();
        assert_eq!(lens, vec![240, 24]);
    }

    #[test]
    fn ihm_gap_rule() {
        let samples = make_ihm_labels(
            &[
                record(120, 50.0, Some(50)),
                record(120, 50.0, Some(100)),
                record(60, 50.0, None),
                record(40, 50.0, None),
                record(60, 50.0, Some(53)),
                record(60, 50.0, Some(54)),
            ],
            48,
            6,
        );
        let labels: Vec<_> = samples.iter().map(|s| (s.len(), s.target.clone())).collect();
        assert_eq!(
            labels,
            vec![(48, Target::Ihm(true)), (48, Target::Ihm(false)), (48, Target::Ihm(true))]
        );
    }

    #[test]
    fn ihm_exclusion_matches_brute_force_count() {
        let cfg = SynthConfig { n_records: 300, t_range: [24, 120], ..Default::default() };
        let records = generate_cohort(&cfg).unwrap();
        let mut expected = 0;
        for r in &records {
            let long_enough = r.len() >= 48;
            let early_death = matches!(r.death_hour, Some(d) if d < 54);
            if long_enough && !early_death {
                expected += 1;
            }
        }
        assert_eq!(make_ihm_labels(&records, 48, 6).len(), expected);
    }

    #[test]
    fn sofa_alignment() {
        let r = record(25, 50.0, None);
        assert_eq!(make_sofa_targets(&r, 24), Some(vec![24.0]));
        let r = record(48, 50.0, None);
        let t = make_sofa_targets(&r, 24).unwrap();
        assert_eq!(t.len(), 24);
        assert_eq!(t[0], r.sofa[24] as f64);
        assert_eq!(make_sofa_targets(&record(24, 50.0, None), 24), None);

        let mut r = record(40, 50.0, None);
        r.sofa = vec![5; 40];
        assert!(make_sofa_targets(&r, 24).unwrap().iter().all(|v| *v == 5.0));
        let samples = make_sofa_samples(&[r], 24);
        assert_eq!(samples[0].len(), 16);
    }

    #[test]
    fn binarization_rules() {
        let mut a = record(30, 67.0, None);
        a.record_id = "a".into();
        a.statics.race = Race::Other;
        a.statics.sex = Sex::Unknown;
        let mut b = record(30, 40.0, None);
        b.record_id = "b".into();
        b.statics.race = Race::Black;
        b.statics.sex = Sex::Female;
        let labels = binarize_statics(&[a, b], 67.0);
        assert_eq!(labels.get("age", "a"), Some(true));
        assert_eq!(labels.get("age", "b"), Some(false));
        assert_eq!(labels.get("race", "a"), None);
        assert_eq!(labels.get("race", "b"), Some(true));
        assert_eq!(labels.get("sex", "a"), None);
        assert_eq!(labels.get("sex", "b"), Some(false));
        assert!(labels.get("renal", "a").is_some());
    }

    #[test]
    fn median_of_even_and_odd() {
        let rs: Vec<_> = [30.0, 50.0, 70.0, 90.0].iter().map(|a| record(30, *a, None)).collect();
        assert_eq!(age_median(&rs), 60.0);
        assert_eq!(age_median(&rs[..3]), 50.0);
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(lens in proptest::collection::vec((1usize..300, 10.0f64..90.0), 0..20)) {
            let records: Vec<_> = lens.iter().map(|(t, a)| record(*t, *a, None)).collect();
            let once = filter_cohort(records);
            let twice = filter_cohort(once.clone());
            prop_assert_eq!(once, twice);
        }
    }
}
