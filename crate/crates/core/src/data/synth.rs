//! Synthetic cohort generator with planted attribute leakage.
//!
//! Each stay is driven by a latent severity process, an Ornstein-Uhlenbeck
//! path around a per-patient mean. Severity determines hourly SOFA (an
//! affine map, rounded and clipped to `[0, 24]`) and in-hospital death
//! (a logistic function of peak severity).
//!
//! Channel `c` at hour `t` is
//!
//! ```text
//! x[c,t] = base[c]                                   per-patient offset, N(0, noise_std^2)
//!        + load[c] * severity[t]
//!        + sum_a code_a * delta_a * u_a[c]           channel-mean offsets
//!        + sum_a code_a * delta_a * 0.25 * v_a[c] * (t - (T-1)/2) / 24   centred trends
//!        + circ[c] * sin(2 pi f t + phase)           f = (1 + 0.05 * sum_a sign_a code_a delta_a) / 24
//!        + site_shift * noise_std * w[c]
//!        + noise_std * eps[c,t]
//! ```
//!
//! where `code_a` is the signed attribute code from [`attribute_code`] and
//! `u_a`, `v_a` (unit norm) and `w` are fixed directions that do not depend on
//! the seed, so different cohorts and sites share one mechanism. An
//! attribute with `delta_a = 0` enters none of these terms. Sex and race are
//! drawn independently of everything else; comorbidity prevalence rises with
//! age and mean severity through `comorbidity_coupling`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{attribute_names, Race, Sex, StaticLabels, TimeSeriesRecord, COMORBIDITIES, MAX_SOFA, MAX_STAY_H, MIN_STAY_H};
use crate::error::{Error, Result};

const MECHANISM_SEED: u64 = 0x7a11_eaf0_0000;
const TREND_GAIN: f64 = 0.25;
const FREQ_GAIN: f64 = 0.05;
const CIRCADIAN_AMP: f64 = 0.5;
const OU_RATE: f64 = 0.05;
const OU_VOL: f64 = 0.25;
const SOFA_CENTER: f64 = 7.0;
const SOFA_SCALE: f64 = 2.5;
const AGE_MEAN: f64 = 65.0;
const AGE_SD: f64 = 16.8;

/// Baseline prevalence of each entry of [`COMORBIDITIES`].
const PREVALENCE: [f64; 15] = [0.22, 0.30, 0.08, 0.05, 0.09, 0.45, 0.04, 0.10, 0.20, 0.22, 0.08, 0.10, 0.20, 0.05, 0.12];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_records: usize,
    /// Channel count `m`.
    pub m: usize,
    /// Inclusive range of stay lengths in hours.
    pub t_range: [usize; 2],
    /// Attribute name -> planted effect size (same units as `noise_std`).
    pub leak_strength: BTreeMap<String, f64>,
    pub noise_std: f64,
    /// Per-site channel offset, in units of `noise_std`.
    pub site_shift: f64,
    pub seed: u64,
    pub dataset_tag: String,
    /// Attribute name -> SOFA points added per unit of attribute code.
    /// Lets a static carry target signal that never reaches `x`.
    pub static_sofa_effect: BTreeMap<String, f64>,
    /// Strength of the age/severity dependence of comorbidity prevalence.
    pub comorbidity_coupling: f64,
    pub sex_unknown_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_records: 1000,
            m: 8,
            t_range: [MIN_STAY_H, 96],
            leak_strength: BTreeMap::new(),
            noise_std: 1.0,
            site_shift: 0.0,
            seed: 0,
            dataset_tag: "site-a".into(),
            static_sofa_effect: BTreeMap::new(),
            comorbidity_coupling: 1.0,
            sex_unknown_rate: 0.002,
        }
    }
}

impl SynthConfig {
    pub fn with_leak(mut self, attribute: &str, delta: f64) -> Self {
        self.leak_strength.insert(attribute.to_string(), delta);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.t_range;
        if lo < MIN_STAY_H || hi > MAX_STAY_H || lo > hi {
            return Err(Error::config(format!(
                "t_range [{lo}, {hi}] must satisfy {MIN_STAY_H} <= t_min <= t_max <= {MAX_STAY_H}"
            )));
        }
        if self.m == 0 {
            return Err(Error::config("m must be at least 1"));
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::config("noise_std must be positive"));
        }
        if !(0.0..=1.0).contains(&self.sex_unknown_rate) {
            return Err(Error::config("sex_unknown_rate must lie in [0, 1]"));
        }
        let names = attribute_names();
        for (key, map) in [("leak_strength", &self.leak_strength), ("static_sofa_effect", &self.static_sofa_effect)] {
            for (attr, v) in map {
                if !names.contains(&attr.as_str()) {
                    return Err(Error::config(format!("{key}: unknown attribute {attr:?}")));
                }
                if !v.is_finite() || (key == "leak_strength" && *v < 0.0) {
                    return Err(Error::config(format!("{key}.{attr} must be finite and non-negative")));
                }
            }
        }
        Ok(())
    }
}

/// Signed code through which an attribute acts on the data.
///
/// sex: male +1, female -1, unknown 0. age: `(age - 65) / 16.8`.
/// race: black +1, white -1, other 0. comorbidity: present +1, absent -1.
pub fn attribute_code(statics: &StaticLabels, attribute: &str) -> f64 {
    match attribute {
        "sex" => match statics.sex {
            Sex::Male => 1.0,
            Sex::Female => -1.0,
            Sex::Unknown => 0.0,
        },
        "age" => (statics.age_years - AGE_MEAN) / AGE_SD,
        "race" => match statics.race {
            Race::Black => 1.0,
            Race::White => -1.0,
            Race::Other => 0.0,
        },
        other => match statics.comorbidities.get(other) {
            Some(true) => 1.0,
            Some(false) => -1.0,
            None => 0.0,
        },
    }
}

struct Mechanism {
    offset: Vec<Vec<f64>>,
    trend: Vec<Vec<f64>>,
    freq_sign: Vec<f64>,
    severity_load: Vec<f64>,
    circadian: Vec<f64>,
    site: Vec<f64>,
}

fn unit_direction(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

impl Mechanism {
    fn new(m: usize) -> Self {
        let names = attribute_names();
        let mut rng = ChaCha8Rng::seed_from_u64(MECHANISM_SEED ^ m as u64);
        let offset = names.iter().map(|_| unit_direction(&mut rng, m)).collect();
        let trend = names.iter().map(|_| unit_direction(&mut rng, m)).collect();
        let freq_sign = (0..names.len()).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let half = m.div_ceil(2);
        let severity_load = (0..m).map(|c| if c < half { 1.0 } else if c % 2 == 0 { 0.3 } else { -0.3 }).collect();
        let circadian = (0..m).map(|c| if c % 3 == 0 { CIRCADIAN_AMP } else { 0.0 }).collect();
        let site = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        Self { offset, trend, freq_sign, severity_load, circadian, site }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Deterministic synthetic cohort for `cfg`.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<Vec<TimeSeriesRecord>> {
    cfg.validate()?;
    let names = attribute_names();
    let deltas: Vec<f64> = names.iter().map(|n| cfg.leak_strength.get(*n).copied().unwrap_or(0.0)).collect();
    let sofa_effects: Vec<(usize, f64)> = names
        .iter()
        .enumerate()
        .filter_map(|(i, n)| cfg.static_sofa_effect.get(*n).map(|e| (i, *e)))
        .collect();
    let mech = Mechanism::new(cfg.m);
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_records);
    for i in 0..cfg.n_records {
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        out.push(generate_record(cfg, &mech, &deltas, &sofa_effects, i, &mut rng));
    }
    Ok(out)
}

fn generate_record(
    cfg: &SynthConfig,
    mech: &Mechanism,
    deltas: &[f64],
    sofa_effects: &[(usize, f64)],
    index: usize,
    rng: &mut ChaCha8Rng,
) -> TimeSeriesRecord {
    let t_len = rng.random_range(cfg.t_range[0]..=cfg.t_range[1]);
    let m = cfg.m;

    // Root attributes, mutually independent.
    let u: f64 = rng.random();
    let sex = if u < cfg.sex_unknown_rate {
        Sex::Unknown
    } else if rng.random::<f64>() < 0.43 {
        Sex::Female
    } else {
        Sex::Male
    };
    let age_years = Normal::new(AGE_MEAN, AGE_SD).unwrap().sample(rng).clamp(18.0, 95.0);
    let race = match rng.random::<f64>() {
        r if r < 0.25 => Race::Black,
        r if r < 0.85 => Race::White,
        _ => Race::Other,
    };

    // Severity path.
    let sev_mean: f64 = rng.sample(StandardNormal);
    let mut severity = Vec::with_capacity(t_len);
    let mut s = sev_mean + 0.5 * rng.sample::<f64, _>(StandardNormal);
    for _ in 0..t_len {
        severity.push(s);
        s += OU_RATE * (sev_mean - s) + OU_VOL * rng.sample::<f64, _>(StandardNormal);
    }

    let age_code = (age_years - AGE_MEAN) / AGE_SD;
    let comorbidities: BTreeMap<String, bool> = COMORBIDITIES
        .iter()
        .zip(PREVALENCE)
        .map(|(name, prev)| {
            let z = logit(prev) + cfg.comorbidity_coupling * (0.6 * age_code + 0.6 * sev_mean);
            (name.to_string(), rng.random::<f64>() < crate::autograd::sigmoid(z))
        })
        .collect();
    let statics = StaticLabels { sex, age_years, race, comorbidities };
    let names = attribute_names();
    let codes: Vec<f64> = names.iter().map(|n| attribute_code(&statics, n)).collect();

    let mut freq_shift = 0.0;
    for (a, (&d, &code)) in deltas.iter().zip(&codes).enumerate() {
        freq_shift += mech.freq_sign[a] * code * d;
    }
    let freq = ((1.0 + FREQ_GAIN * freq_shift) / 24.0).max(1.0 / 240.0);
    let phase = rng.random_range(0.0..2.0 * PI);

    let center = (t_len as f64 - 1.0) / 2.0;
    let mut x = Array2::zeros((m, t_len));
    for c in 0..m {
        let base = cfg.noise_std * rng.sample::<f64, _>(StandardNormal);
        let mut offset = base + cfg.site_shift * cfg.noise_std * mech.site[c];
        let mut slope = 0.0;
        for (a, (&d, &code)) in deltas.iter().zip(&codes).enumerate() {
            if d != 0.0 {
                offset += code * d * mech.offset[a][c];
                slope += code * d * TREND_GAIN * mech.trend[a][c];
            }
        }
        for t in 0..t_len {
            let tf = t as f64;
            let noise: f64 = rng.sample(StandardNormal);
            x[[c, t]] = offset
                + mech.severity_load[c] * severity[t]
                + slope * (tf - center) / 24.0
                + mech.circadian[c] * (2.0 * PI * freq * tf + phase).sin()
                + cfg.noise_std * noise;
        }
    }

    let static_shift: f64 = sofa_effects.iter().map(|(a, e)| e * codes[*a]).sum();
    let sofa = severity
        .iter()
        .map(|s| (SOFA_CENTER + SOFA_SCALE * s + static_shift).round().clamp(0.0, MAX_SOFA as f64) as u8)
        .collect();

    let (peak_hour, peak) = severity
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (t, &s)| if s > acc.1 { (t, s) } else { acc });
    let p_death = crate::autograd::sigmoid(-3.0 + 1.5 * peak);
    let death_hour = (rng.random::<f64>() < p_death).then(|| (peak_hour + rng.random_range(0..=72)) as u32);

    TimeSeriesRecord {
        record_id: format!("{}-{index:06}", cfg.dataset_tag),
        x,
        mask: vec![true; t_len],
        statics,
        sofa,
        death_hour,
        dataset_tag: cfg.dataset_tag.clone(),
    }
}
