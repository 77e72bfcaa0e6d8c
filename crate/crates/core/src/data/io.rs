//! Line-delimited JSON record files.
//!
//! One object per line with keys `record_id`, `x` (array of `m` arrays of
//! length `T`), `sofa`, `death_hour` (nullable), `sex`, `age_years`, `race`,
//! `comorbidities` (object of the fifteen flags) and `dataset_tag`. An
//! optional `mask` array marks observed hours. Blank lines are ignored.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Race, Sex, StaticLabels, TimeSeriesRecord, COMORBIDITIES, MAX_SOFA};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct RecordRepr {
    record_id: String,
    x: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<bool>>,
    sofa: Vec<i64>,
    death_hour: Option<u32>,
    sex: Sex,
    age_years: f64,
    race: Race,
    comorbidities: BTreeMap<String, bool>,
    dataset_tag: String,
}

impl From<&TimeSeriesRecord> for RecordRepr {
    fn from(r: &TimeSeriesRecord) -> Self {
        Self {
            record_id: r.record_id.clone(),
            x: r.x.rows().into_iter().map(|row| row.to_vec()).collect(),
            mask: (!r.mask.iter().all(|m| *m)).then(|| r.mask.clone()),
            sofa: r.sofa.iter().map(|s| *s as i64).collect(),
            death_hour: r.death_hour,
            sex: r.statics.sex,
            age_years: r.statics.age_years,
            race: r.statics.race,
            comorbidities: r.statics.comorbidities.clone(),
            dataset_tag: r.dataset_tag.clone(),
        }
    }
}

impl RecordRepr {
    fn into_record(self, line: usize) -> Result<TimeSeriesRecord> {
        let fail = |message: String| Error::Schema { line, record: self.record_id.clone(), message };
        let m = self.x.len();
        if m == 0 {
            return Err(fail("x has no channels".into()));
        }
        let t = self.x[0].len();
        if let Some((c, row)) = self.x.iter().enumerate().find(|(_, row)| row.len() != t) {
            return Err(fail(format!("non-rectangular x: channel {c} has {} steps, channel 0 has {t}", row.len())));
        }
        if self.sofa.len() != t {
            return Err(fail(format!("sofa has {} entries, x has {t} steps", self.sofa.len())));
        }
        if let Some(s) = self.sofa.iter().find(|s| !(0..=MAX_SOFA as i64).contains(*s)) {
            return Err(fail(format!("sofa value {s} outside [0, {MAX_SOFA}]")));
        }
        let mask = self.mask.clone().unwrap_or_else(|| vec![true; t]);
        if mask.len() != t {
            return Err(fail(format!("mask has {} entries, x has {t} steps", mask.len())));
        }
        let observed = mask.iter().take_while(|m| **m).count();
        if mask[observed..].iter().any(|m| *m) {
            return Err(fail("mask has gaps".into()));
        }
        if !self.age_years.is_finite() {
            return Err(fail("age_years is not finite".into()));
        }
        let keys: Vec<&str> = self.comorbidities.keys().map(String::as_str).collect();
        let mut expected: Vec<&str> = COMORBIDITIES.to_vec();
        expected.sort_unstable();
        if keys != expected {
            return Err(fail(format!("comorbidities must have exactly the keys {expected:?}")));
        }
        let mut x = Array2::zeros((m, t));
        for (c, row) in self.x.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                x[[c, i]] = *v;
            }
        }
        Ok(TimeSeriesRecord {
            record_id: self.record_id,
            x,
            mask,
            statics: StaticLabels {
                sex: self.sex,
                age_years: self.age_years,
                race: self.race,
                comorbidities: self.comorbidities,
            },
            sofa: self.sofa.iter().map(|s| *s as u8).collect(),
            death_hour: self.death_hour,
            dataset_tag: self.dataset_tag,
        })
    }
}

pub fn write_dataset<W: Write>(records: &[TimeSeriesRecord], w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    for r in records {
        serde_json::to_writer(&mut w, &RecordRepr::from(r))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<Vec<TimeSeriesRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: line_no,
            record: "<unparsed>".into(),
            message: e.to_string(),
        })?;
        let record = value.get("record_id").and_then(|v| v.as_str()).unwrap_or("<missing record_id>").to_string();
        let repr: RecordRepr = serde_json::from_value(value).map_err(|e| Error::Schema {
            line: line_no,
            record: record.clone(),
            message: e.to_string(),
        })?;
        out.push(repr.into_record(line_no)?);
    }
    Ok(out)
}

pub fn export_dataset(records: &[TimeSeriesRecord], path: impl AsRef<Path>) -> Result<()> {
    write_dataset(records, File::create(path)?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<TimeSeriesRecord>> {
    read_dataset(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_cohort, SynthConfig};

    fn sample_line() -> String {
        let cfg = SynthConfig { n_records: 1, t_range: [24, 24], m: 2, ..Default::default() };
        let mut buf = Vec::new();
        write_dataset(&generate_cohort(&cfg).unwrap(), &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = SynthConfig { n_records: 25, ..Default::default() }.with_leak("sex", 2.0);
        let records = generate_cohort(&cfg).unwrap();
        let mut buf = Vec::new();
        write_dataset(&records, &mut buf).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), records);
    }

    #[test]
    fn empty_input_is_empty_list() {
        assert!(read_dataset(&b""[..]).unwrap().is_empty());
        assert!(read_dataset(&b"\n\n"[..]).unwrap().is_empty());
    }

    #[test]
    fn sofa_out_of_range_names_record() {
        let mut v: serde_json::Value = serde_json::from_str(sample_line().trim()).unwrap();
        v["sofa"][3] = 25.into();
        let text = format!("\n{v}\n");
        match read_dataset(text.as_bytes()) {
            Err(Error::Schema { line, record, message }) => {
                assert_eq!(line, 2);
                assert_eq!(record, "site-a-000000");
                assert!(message.contains("25"), "{message}");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_and_ragged_x_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(sample_line().trim()).unwrap();
        v.as_object_mut().unwrap().remove("race");
        let err = read_dataset(v.to_string().as_bytes()).unwrap_err().to_string();
        assert!(err.contains("race") && err.contains("line 1"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(sample_line().trim()).unwrap();
        v["x"][1].as_array_mut().unwrap().pop();
        let err = read_dataset(v.to_string().as_bytes()).unwrap_err().to_string();
        assert!(err.contains("non-rectangular"), "{err}");
    }
}
