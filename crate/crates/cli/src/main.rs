//! `tsleak`: run leakage, fusion and disentanglement experiments from a
//! TOML config and aggregate their tables.

mod config;
mod error;
mod experiments;
mod output;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Experiment, ExperimentConfig};
use crate::error::CliError;
use crate::experiments::Outcome;
use crate::output::{Manifest, RunDir, CONFIG_FILE, ERROR_FILE};

#[derive(Parser)]
#[command(name = "tsleak", version, about = "Static-attribute leakage experiments on clinical time series")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.epochs=5`. Repeatable; applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory. Defaults to `<out-root>/<experiment>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for default run directories.
    #[arg(long, env = "TSLEAK_OUT", default_value = "runs")]
    out_root: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic cohort file.
    Generate(RunArgs),
    /// Train one task model and report its test metric.
    TrainTask(RunArgs),
    /// Train (or load) a task model and probe raw and hidden representations.
    Audit(RunArgs),
    /// Compare static-fusion configurations on SOFA prediction.
    FuseStudy(RunArgs),
    /// Train one disentangling model and evaluate its latents.
    SteerTrain(RunArgs),
    /// Sweep theta/alpha with one child steer-train run per point.
    SteerEval(RunArgs),
    /// Apply in-site probes to a second site without refitting.
    Transfer(RunArgs),
    /// Merge run directories into one set of tables.
    Report {
        /// Run directories, each with manifest.json and metrics.csv.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "TSLEAK_OUT", default_value = "runs")]
        out_root: PathBuf,
    },
}

fn fail(err: &CliError, experiment: Option<&str>, out: Option<&Path>) -> ExitCode {
    let record = err.to_json(experiment);
    if let Some(dir) = out {
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = std::fs::write(dir.join(ERROR_FILE), format!("{record:#}\n"));
        }
    }
    eprintln!("{record}");
    ExitCode::from(err.exit_code() as u8)
}

fn run_experiment(experiment: Experiment, args: &RunArgs) -> ExitCode {
    let cfg = match config::load(args.config.as_deref(), &args.set).and_then(|c| c.resolve(experiment)) {
        Ok(c) => c,
        Err(e) => return fail(&e, Some(experiment.name()), args.out.as_deref()),
    };
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| args.out_root.join(format!("{experiment}-seed{}", cfg.seed)));
    match execute(experiment, &cfg, &out) {
        Ok(text) => {
            print!("{text}");
            println!("run directory: {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e, Some(experiment.name()), Some(&out)),
    }
}

fn execute(experiment: Experiment, cfg: &ExperimentConfig, out: &Path) -> Result<String, CliError> {
    let mut run = RunDir::create(out)?;
    run.write_text(CONFIG_FILE, &cfg.to_toml()?)?;
    let f = match experiment {
        Experiment::Generate => experiments::generate,
        Experiment::TrainTask => experiments::train_task_run,
        Experiment::Audit => experiments::audit,
        Experiment::FuseStudy => experiments::fuse_study,
        Experiment::SteerTrain => experiments::steer_train,
        Experiment::SteerEval => experiments::steer_eval,
        Experiment::Transfer => experiments::transfer,
    };
    let Outcome { rows, inputs, test_partition_hash, children } = f(cfg, &mut run)?;
    run.write_metrics(&rows)?;
    let manifest = Manifest {
        tool: "tsleak".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        experiment: experiment.name().into(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        inputs,
        test_partition_hash,
        artifacts: Default::default(),
        children,
    };
    run.finish(manifest)?;
    Ok(output::render_tables(&rows))
}

fn run_report(runs: &[PathBuf], out: Option<&Path>, out_root: &Path) -> ExitCode {
    let out = out.map_or_else(|| out_root.join("report"), Path::to_path_buf);
    let result = (|| {
        let loaded = report::load_runs(runs)?;
        let mut run = RunDir::create(&out)?;
        run.write_metrics(&loaded.rows)?;
        let manifest = Manifest {
            tool: "tsleak".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            experiment: "report".into(),
            seed: 0,
            config: serde_json::json!({ "runs": runs }),
            inputs: loaded.inputs,
            test_partition_hash: None,
            artifacts: Default::default(),
            children: vec![],
        };
        run.finish(manifest)?;
        Ok::<_, CliError>(output::render_tables(&loaded.rows))
    })();
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e, Some("report"), Some(&out)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Cmd::Generate(a) => run_experiment(Experiment::Generate, a),
        Cmd::TrainTask(a) => run_experiment(Experiment::TrainTask, a),
        Cmd::Audit(a) => run_experiment(Experiment::Audit, a),
        Cmd::FuseStudy(a) => run_experiment(Experiment::FuseStudy, a),
        Cmd::SteerTrain(a) => run_experiment(Experiment::SteerTrain, a),
        Cmd::SteerEval(a) => run_experiment(Experiment::SteerEval, a),
        Cmd::Transfer(a) => run_experiment(Experiment::Transfer, a),
        Cmd::Report { runs, out, out_root } => run_report(runs, out.as_deref(), out_root),
    }
}
