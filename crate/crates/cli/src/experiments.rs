//! One function per subcommand. Each returns the run's metric rows after
//! writing its other artifacts into the run directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use tsleak::checkpoint::{self, Checkpoint};
use tsleak::data::{
    age_median, binarize_statics, export_dataset, filter_cohort, generate_cohort, load_dataset, make_ihm_labels,
    make_sofa_samples, partition_hash, split, BinaryLabels, Partition, SynthConfig, TaskSample, TimeSeriesRecord,
};
use tsleak::disentangle::{
    disentanglement_eval, noise_out_sensitive, probe_auc, train_steer, SteerModel, SteerSet,
};
use tsleak::fusion::{fusion_study, regularization_analysis, FusionSpec, StudyConfig, StudyData};
use tsleak::probing::{cross_dataset_eval, leakage_audit};
use tsleak::seqmodels::{Task, TaskModel};
use tsleak::training::{evaluate, train_task, TrainHistory};

use crate::config::{Experiment, ExperimentConfig};
use crate::error::CliError;
use crate::output::{read_metrics, InputRecord, MetricRow, RunDir, CONFIG_FILE, ERROR_FILE, METRICS_FILE};

const EVAL_BATCH: usize = 64;

/// Filtered records of one site and where they came from.
pub struct Cohort {
    pub records: Vec<TimeSeriesRecord>,
    pub input: InputRecord,
}

fn load_cohort(path: Option<&Path>, synth: &SynthConfig) -> Result<Cohort, CliError> {
    let (raw, input) = match path {
        Some(p) => {
            let records = load_dataset(p)?;
            let input = InputRecord {
                path: Some(p.display().to_string()),
                sha256: Some(crate::output::sha256_file(p)?),
                records: records.len(),
            };
            (records, input)
        }
        None => {
            let records = generate_cohort(synth)?;
            let n = records.len();
            (records, InputRecord { path: None, sha256: None, records: n })
        }
    };
    let records = filter_cohort(raw);
    if records.is_empty() {
        return Err(CliError::Core(tsleak::Error::Data("no records left after cohort filtering".into())));
    }
    Ok(Cohort { records, input })
}

/// Records, partition and train-thresholded labels of the primary site.
struct Prepared {
    cohort: Cohort,
    partition: Partition,
    labels: BinaryLabels,
    test_hash: String,
}

impl Prepared {
    fn new(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let cohort = load_cohort(cfg.data.path.as_deref(), &cfg.data.synth)?;
        let partition = split(cohort.records.len(), cfg.data.split, cfg.seed, None)?;
        let train: Vec<TimeSeriesRecord> = pick(&cohort.records, &partition.train);
        let labels = binarize_statics(&cohort.records, age_median(&train));
        let ids: Vec<&str> = cohort.records.iter().map(|r| r.record_id.as_str()).collect();
        let test_hash = partition.test_hash(&ids);
        Ok(Self { cohort, partition, labels, test_hash })
    }

    fn samples(&self, cfg: &ExperimentConfig, idx: &[usize]) -> Vec<TaskSample> {
        let records = pick(&self.cohort.records, idx);
        match cfg.data.task {
            Task::Sofa => make_sofa_samples(&records, cfg.data.sofa_horizon_h),
            Task::Ihm => make_ihm_labels(&records, cfg.data.ihm_window_h, cfg.data.ihm_gap_h),
        }
    }

    fn splits(&self, cfg: &ExperimentConfig) -> Result<[Vec<TaskSample>; 3], CliError> {
        let out = [
            self.samples(cfg, &self.partition.train),
            self.samples(cfg, &self.partition.val),
            self.samples(cfg, &self.partition.test),
        ];
        if out[0].is_empty() || out[2].is_empty() {
            return Err(CliError::Core(tsleak::Error::Data(format!(
                "{} task leaves {} training and {} test samples",
                task_name(cfg.data.task),
                out[0].len(),
                out[2].len()
            ))));
        }
        Ok(out)
    }
}

fn pick(records: &[TimeSeriesRecord], idx: &[usize]) -> Vec<TimeSeriesRecord> {
    idx.iter().map(|i| records[*i].clone()).collect()
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Ihm => "ihm",
        Task::Sofa => "sofa",
    }
}

fn inputs(primary: &InputRecord) -> BTreeMap<String, InputRecord> {
    BTreeMap::from([("data".to_string(), primary.clone())])
}

fn save_checkpoint<M: Checkpoint>(run: &mut RunDir, model: &M, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let meta = BTreeMap::from([("seed".to_string(), cfg.seed.to_string())]);
    let m = checkpoint::save(model, &run.path("checkpoint"), meta)?;
    run.track("checkpoint/manifest.json");
    for e in m.stores.values() {
        run.track(&format!("checkpoint/{}", e.file));
    }
    Ok(())
}

fn history_csv(h: &TrainHistory) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for (i, t) in h.train_loss.iter().enumerate() {
        let v = h.val_loss.get(i).map_or_else(String::new, |v| v.to_string());
        out.push_str(&format!("{i},{t},{v}\n"));
    }
    out
}

/// Result of one subcommand: metric rows plus manifest fields.
pub struct Outcome {
    pub rows: Vec<MetricRow>,
    pub inputs: BTreeMap<String, InputRecord>,
    pub test_partition_hash: Option<String>,
    pub children: Vec<String>,
}

pub fn generate(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<Outcome, CliError> {
    let raw = generate_cohort(&cfg.data.synth)?;
    export_dataset(&raw, run.path("cohort.jsonl"))?;
    run.track("cohort.jsonl");
    let kept = filter_cohort(raw.clone());
    let n = kept.len();
    let mut rows = vec![
        MetricRow::scalar("cohort", "records", "value", "count", raw.len() as f64, raw.len(), ""),
        MetricRow::scalar("cohort", "kept_after_filter", "value", "count", n as f64, n, ""),
    ];
    if n > 0 {
        let mean_len = kept.iter().map(|r| r.len() as f64).sum::<f64>() / n as f64;
        let died = kept.iter().filter(|r| r.died()).count() as f64 / n as f64;
        rows.push(MetricRow::scalar("cohort", "mean_stay_h", "value", "mean", mean_len, n, ""));
        rows.push(MetricRow::scalar("cohort", "mortality", "value", "rate", died, n, ""));
        let labels = binarize_statics(&kept, age_median(&kept));
        for a in &cfg.data.attributes {
            let col = labels.column(a).ok_or_else(|| CliError::Usage(format!("unknown attribute {a:?}")))?;
            let pos = col.values().filter(|v| **v).count();
            rows.push(MetricRow::scalar("attributes", a, "positive_rate", "rate", pos as f64 / col.len().max(1) as f64, col.len(), ""));
        }
    }
    let input = InputRecord { path: None, sha256: Some(crate::output::sha256_file(&run.path("cohort.jsonl"))?), records: raw.len() };
    Ok(Outcome { rows, inputs: BTreeMap::from([("generated".to_string(), input)]), test_partition_hash: None, children: vec![] })
}

fn trained_task_model(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    run: &mut RunDir,
    rows: &mut Vec<MetricRow>,
) -> Result<TaskModel, CliError> {
    if let Some(path) = &cfg.checkpoint {
        let model: TaskModel = checkpoint::load(path)?;
        if model.task != cfg.data.task {
            return Err(CliError::Usage(format!(
                "checkpoint {} is a {} model, config task is {}",
                path.display(),
                task_name(model.task),
                task_name(cfg.data.task)
            )));
        }
        return Ok(model);
    }
    let [train, val, test] = prep.splits(cfg)?;
    let in_dim = train[0].x.nrows();
    let mut model = TaskModel::new(&cfg.model, cfg.data.task, in_dim, cfg.seed)?;
    eprintln!("training {} on {} {} samples", cfg.model.kind.name(), train.len(), task_name(cfg.data.task));
    let history = train_task(&mut model, &train, &val, &cfg.train)?;
    run.write_text("history.csv", &history_csv(&history))?;
    save_checkpoint(run, &model, cfg)?;
    let perf = evaluate(&model, &test, EVAL_BATCH, cfg.probe.n_boot, cfg.seed)?;
    rows.push(MetricRow::from_report("performance", cfg.model.kind.name(), task_name(cfg.data.task), &perf, &prep.test_hash));
    Ok(model)
}

pub fn train_task_run(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<Outcome, CliError> {
    let prep = Prepared::new(cfg)?;
    let mut rows = Vec::new();
    let cfg = ExperimentConfig { checkpoint: None, ..cfg.clone() };
    trained_task_model(&cfg, &prep, run, &mut rows)?;
    Ok(Outcome { rows, inputs: inputs(&prep.cohort.input), test_partition_hash: Some(prep.test_hash), children: vec![] })
}

fn attributes(cfg: &ExperimentConfig) -> Vec<&str> {
    cfg.data.attributes.iter().map(String::as_str).collect()
}

pub fn audit(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<Outcome, CliError> {
    let prep = Prepared::new(cfg)?;
    let mut rows = Vec::new();
    let model = trained_task_model(cfg, &prep, run, &mut rows)?;
    let attrs = attributes(cfg);
    eprintln!("probing {} attributes", attrs.len());
    let (report, _) = leakage_audit(Some(&model), &prep.cohort.records, &prep.partition, &prep.labels, &attrs, &cfg.probe)?;
    for (source, cells) in &report.rows {
        for (a, c) in report.attributes.iter().zip(cells) {
            rows.push(MetricRow::from_report("leakage", source, a, c, &report.test_partition_hash));
        }
    }
    Ok(Outcome { rows, inputs: inputs(&prep.cohort.input), test_partition_hash: Some(prep.test_hash), children: vec![] })
}

pub fn transfer(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<Outcome, CliError> {
    let prep = Prepared::new(cfg)?;
    let mut rows = Vec::new();
    let model = trained_task_model(cfg, &prep, run, &mut rows)?;
    let attrs = attributes(cfg);
    let (in_site, probes) =
        leakage_audit(Some(&model), &prep.cohort.records, &prep.partition, &prep.labels, &attrs, &cfg.probe)?;
    let foreign = load_cohort(cfg.data.foreign_path.as_deref(), &cfg.data.foreign_synth)?;
    let foreign_labels = binarize_statics(&foreign.records, prep.labels.age_median());
    let all: Vec<usize> = (0..foreign.records.len()).collect();
    eprintln!("applying in-site probes to {} foreign records", all.len());
    let moved = cross_dataset_eval(
        Some(&model),
        &probes,
        &in_site.train_site,
        &foreign.records,
        &all,
        &foreign_labels,
        &attrs,
        &cfg.probe,
    )?;
    let foreign_hash = partition_hash(foreign.records.iter().map(|r| r.record_id.as_str()));
    for (table, report, hash) in [("in-site", &in_site, &in_site.test_partition_hash), ("transfer", &moved, &foreign_hash)] {
        for (source, cells) in &report.rows {
            for (a, c) in report.attributes.iter().zip(cells) {
                rows.push(MetricRow::from_report(table, source, a, c, hash));
            }
        }
    }
    for (source, cells) in &in_site.rows {
        for (a, c) in in_site.attributes.iter().zip(cells) {
            if let Some(t) = moved.cell(source, a) {
                rows.push(MetricRow::scalar("transfer-delta", source, a, "auc_difference", t.point - c.point, t.n, &foreign_hash));
            }
        }
    }
    let mut ins = inputs(&prep.cohort.input);
    ins.insert("foreign".into(), foreign.input);
    Ok(Outcome { rows, inputs: ins, test_partition_hash: Some(prep.test_hash), children: vec![] })
}

fn require_sofa(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.data.task != Task::Sofa {
        return Err(CliError::Usage(format!("{} needs data.task = \"sofa\"", cfg.experiment.map_or("run", Experiment::name))));
    }
    Ok(())
}

pub fn fuse_study(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<Outcome, CliError> {
    require_sofa(cfg)?;
    let specs = cfg.fusion.specs.iter().map(|s| FusionSpec::parse_points(s)).collect::<Result<Vec<_>, _>>()?;
    let prep = Prepared::new(cfg)?;
    let [train, val, test] = prep.splits(cfg)?;
    let data = StudyData { train: &train, val: &val, test: &test };
    let study = StudyConfig {
        encoder: cfg.model.clone(),
        train: cfg.train.clone(),
        mlp_widths: cfg.fusion.mlp_widths.clone(),
        mlp_dropout: cfg.fusion.mlp_dropout,
        n_boot: cfg.probe.n_boot,
        seed: cfg.seed,
    };
    eprintln!("fusion study over {} configurations", specs.len());
    let table = fusion_study(data, &study, &specs)?;
    run.write_text("fusion.json", &serde_json::to_string_pretty(&table)?)?;
    let mut rows: Vec<MetricRow> = table
        .runs
        .iter()
        .map(|r| MetricRow::from_report("fusion", "rmse", &r.config, &r.rmse, &table.test_partition_hash))
        .collect();
    if let Some(reg) = cfg.fusion.regularization {
        eprintln!("weight-magnitude analysis");
        let w = regularization_analysis(data, &study, reg)?;
        run.write_text("weights.csv", &w.to_csv())?;
        for r in w.fusion.iter().chain(std::iter::once(&w.main)) {
            rows.push(MetricRow::scalar("weights", &r.block, "before", "mean_abs", r.before, 0, ""));
            rows.push(MetricRow::scalar("weights", &r.block, "after", "mean_abs", r.after, 0, ""));
            rows.push(MetricRow::scalar("weights", &r.block, "reduction", "log10_orders", r.reduction, 0, ""));
        }
    }
    Ok(Outcome { rows, inputs: inputs(&prep.cohort.input), test_partition_hash: Some(prep.test_hash), children: vec![] })
}

fn sweep_label(theta: f64, alpha: f64) -> String {
    format!("theta={theta},alpha={alpha}")
}

pub fn steer_train(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<Outcome, CliError> {
    let prep = Prepared::new(cfg)?;
    let [train, val, test] = prep.splits(cfg)?;
    let attrs = &cfg.steer.model.attributes;
    let tr = SteerSet::new(train, &prep.labels, attrs)?;
    let va = SteerSet::new(val, &prep.labels, attrs)?;
    let te = SteerSet::new(test, &prep.labels, attrs)?;
    let in_dim = tr.samples[0].x.nrows();
    let mut model = SteerModel::new(&cfg.steer.model, cfg.data.task, in_dim, cfg.seed)?;
    let h = &cfg.steer.model.hyper;
    eprintln!("training disentangling model (theta {}, alpha {}) on {} samples", h.theta, h.alpha, tr.len());
    let history = train_steer(&mut model, &tr, &va, &cfg.train)?;
    run.write_text("history.csv", &history.to_csv())?;
    save_checkpoint(run, &model, cfg)?;

    let report = disentanglement_eval(&model, &tr, &te, &cfg.probe, EVAL_BATCH)?;
    let san_tr = noise_out_sensitive(&model, &tr.samples, cfg.steer.sanitize, cfg.seed, EVAL_BATCH)?;
    let san_te = noise_out_sensitive(&model, &te.samples, cfg.steer.sanitize, cfg.seed.wrapping_add(1), EVAL_BATCH)?;
    let (btr, bte) = (san_tr.pooled_b(), san_te.pooled_b());
    let ids: Vec<&str> = te.samples.iter().map(|s| s.record_id.as_str()).collect();
    let hash = partition_hash(ids);
    let row = sweep_label(h.theta, h.alpha);
    let mut rows = vec![MetricRow::from_report("steer", &row, "utility", &report.utility, &hash)];
    for (j, a) in report.attributes.iter().enumerate() {
        rows.push(MetricRow::from_report("steer", &row, &format!("auc_b:{a}"), &report.auc_from_b[j], &hash));
        rows.push(MetricRow::from_report("steer", &row, &format!("auc_z:{a}"), &report.auc_from_z[j], &hash));
        let sanitized = probe_auc(&btr, &tr, &bte, &te, j, &cfg.probe)?;
        rows.push(MetricRow::from_report("steer", &row, &format!("auc_b_sanitized:{a}"), &sanitized, &hash));
    }
    Ok(Outcome { rows, inputs: inputs(&prep.cohort.input), test_partition_hash: Some(hash), children: vec![] })
}

/// Child `steer-train` runs, one per (theta, alpha) point.
pub fn steer_eval(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<Outcome, CliError> {
    let h = &cfg.steer.model.hyper;
    let thetas = if cfg.steer.theta.is_empty() { vec![h.theta] } else { cfg.steer.theta.clone() };
    let alphas = if cfg.steer.alpha.is_empty() { vec![h.alpha] } else { cfg.steer.alpha.clone() };
    let config_path = run.path(CONFIG_FILE);
    let exe = std::env::current_exe()?;
    let mut rows = Vec::new();
    let mut children = Vec::new();
    let mut hash: Option<String> = None;
    for theta in &thetas {
        for alpha in &alphas {
            let rel = format!("points/theta-{theta}_alpha-{alpha}");
            let dir = run.path(&rel);
            eprintln!("sweep point theta {theta}, alpha {alpha}");
            let status = Command::new(&exe)
                .arg("steer-train")
                .arg("--config")
                .arg(&config_path)
                .args(["--set", "experiment=steer-train"])
                .args(["--set", &format!("steer.model.hyper.theta={theta:?}")])
                .args(["--set", &format!("steer.model.hyper.alpha={alpha:?}")])
                .arg("--out")
                .arg(&dir)
                .status()?;
            if !status.success() {
                let message = std::fs::read_to_string(dir.join(ERROR_FILE))
                    .ok()
                    .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
                    .and_then(|v| v["message"].as_str().map(str::to_string))
                    .unwrap_or_else(|| format!("exit status {status}"));
                return Err(CliError::Child { dir: dir.display().to_string(), message });
            }
            let child_rows = read_metrics(&dir.join(METRICS_FILE))?;
            for r in &child_rows {
                match &hash {
                    None => hash = Some(r.test_partition_hash.clone()),
                    Some(h) if *h != r.test_partition_hash => {
                        return Err(CliError::PartitionMismatch {
                            table: r.table.clone(),
                            first: children.first().cloned().unwrap_or_default(),
                            first_hash: h.clone(),
                            second: rel.clone(),
                            second_hash: r.test_partition_hash.clone(),
                        })
                    }
                    Some(_) => {}
                }
            }
            rows.extend(child_rows);
            children.push(rel);
        }
    }
    let prep_input = match &cfg.data.path {
        Some(p) => InputRecord { path: Some(p.display().to_string()), sha256: Some(crate::output::sha256_file(p)?), records: 0 },
        None => InputRecord { path: None, sha256: None, records: cfg.data.synth.n_records },
    };
    Ok(Outcome { rows, inputs: inputs(&prep_input), test_partition_hash: hash, children })
}
