//! Shared experiment configuration, read from TOML with `--set` overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tsleak::data::{SplitRatios, SynthConfig};
use tsleak::disentangle::{SanitizeMode, SteerConfig};
use tsleak::fusion::Regularization;
use tsleak::probing::ProbeConfig;
use tsleak::seqmodels::{EncoderConfig, Task};
use tsleak::training::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Generate,
    TrainTask,
    Audit,
    FuseStudy,
    SteerTrain,
    SteerEval,
    Transfer,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::Generate => "generate",
            Self::TrainTask => "train-task",
            Self::Audit => "audit",
            Self::FuseStudy => "fuse-study",
            Self::SteerTrain => "steer-train",
            Self::SteerEval => "steer-eval",
            Self::Transfer => "transfer",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown experiment {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Record file to read; a cohort is generated from `synth` when absent.
    pub path: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Second site for `transfer`; generated from `foreign_synth` when absent.
    pub foreign_path: Option<PathBuf>,
    pub foreign_synth: SynthConfig,
    pub split: SplitRatios,
    pub task: Task,
    pub sofa_horizon_h: usize,
    pub ihm_window_h: usize,
    pub ihm_gap_h: usize,
    /// Attributes probed by `audit` and `transfer`.
    pub attributes: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let foreign_synth = SynthConfig { seed: 1, site_shift: 5.0, dataset_tag: "site-b".into(), ..Default::default() };
        Self {
            path: None,
            synth: SynthConfig::default(),
            foreign_path: None,
            foreign_synth,
            split: SplitRatios::default(),
            task: Task::Sofa,
            sofa_horizon_h: 24,
            ihm_window_h: 48,
            ihm_gap_h: 6,
            attributes: tsleak::data::attribute_names().iter().map(|a| a.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    /// Point sets such as `none`, `I`, `I+V+VI`.
    pub specs: Vec<String>,
    pub mlp_widths: Vec<usize>,
    pub mlp_dropout: f64,
    /// Run the weight-magnitude analysis with this penalty.
    pub regularization: Option<Regularization>,
}

impl Default for FusionSection {
    fn default() -> Self {
        let spec = tsleak::fusion::FusionSpec::default();
        Self {
            specs: ["none", "I", "V", "VI", "I+V+VI", "I+II+III+IV+V+VI"].iter().map(|s| s.to_string()).collect(),
            mlp_widths: spec.mlp_widths,
            mlp_dropout: spec.mlp_dropout,
            regularization: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerSection {
    pub model: SteerConfig,
    /// `steer-eval` sweep values; an empty list keeps the model value.
    pub theta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sanitize: SanitizeMode,
}

impl Default for SteerSection {
    fn default() -> Self {
        Self { model: SteerConfig::default(), theta: vec![1.0, 5.0, 10.0], alpha: vec![], sanitize: SanitizeMode::Noise }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must match the subcommand when present.
    pub experiment: Option<Experiment>,
    /// Drives splitting, initialisation, batching and probes.
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Trained task model to audit instead of training one.
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub fusion: FusionSection,
    pub steer: SteerSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: 0,
            out: None,
            checkpoint: None,
            data: DataConfig::default(),
            model: EncoderConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            fusion: FusionSection::default(),
            steer: SteerSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Copy the run seed into every component and derive dependent fields.
    pub fn resolve(mut self, experiment: Experiment) -> Result<Self, CliError> {
        if let Some(e) = self.experiment {
            if e != experiment {
                return Err(CliError::Usage(format!("config is for experiment {e}, subcommand is {experiment}")));
            }
        }
        self.experiment = Some(experiment);
        self.train.seed = self.seed;
        self.probe.seed = self.seed;
        self.steer.model.hyper.sensitive_dim = self.steer.model.attributes.len();
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialise config: {e}")))
    }
}

/// Line number (1-based) of byte offset `at`.
fn line_of(text: &str, at: usize) -> usize {
    text[..at.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

/// Field named in a serde "unknown field" message.
fn unknown_field(message: &str) -> Option<String> {
    let rest = message.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

fn parse_file(text: &str, source: &Path) -> Result<toml::Table, CliError> {
    // Typed parse first, so errors carry file positions.
    if let Err(e) = toml::from_str::<ExperimentConfig>(text) {
        let message = e.message().to_string();
        return Err(CliError::Config {
            origin: source.display().to_string(),
            line: e.span().map(|s| line_of(text, s.start)),
            key: unknown_field(&message),
            message,
        });
    }
    toml::from_str(text).map_err(|e| CliError::Usage(format!("{}: {e}", source.display())))
}

/// `key=value`, with the value read as a TOML literal and kept as a
/// string when it is not one.
fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, raw) = s.split_once('=').ok_or_else(|| CliError::Usage(format!("--set {s:?}: expected key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Usage(format!("--set {s:?}: empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut t = table;
    for (i, seg) in parents.iter().enumerate() {
        let entry = t.entry(seg.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| {
            CliError::Usage(format!("--set {}: {} is not a table", path.join("."), parents[..=i].join(".")))
        })?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

/// Overlay `src` onto `dst`, descending into tables present in both.
fn deep_merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => deep_merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// Read `path` (or defaults when `None`) and apply `overrides` in order.
///
/// Partial tables fill their missing keys from the experiment defaults,
/// so `[data.foreign_synth]` with one key keeps the foreign-site seed and shift.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let defaults = toml::Table::try_from(ExperimentConfig::default())
        .map_err(|e| CliError::Usage(format!("cannot serialise defaults: {e}")))?;
    let mut table = defaults;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        deep_merge(&mut table, parse_file(&text, p)?);
    }
    for o in overrides {
        let (key, value) = parse_override(o)?;
        apply_override(&mut table, &key, value)?;
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
        let message = e.message().to_string();
        CliError::Config { origin: "--set".into(), line: None, key: unknown_field(&message), message }
    })
}
