//! The `sert` command-line tool.
//!
//! Exit codes: 0 on success, 1 for configuration or usage errors, 2 for any
//! other failure (including a failing self-test).

pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::model::CHECKPOINT_VERSION;
use crate::selftest::run_selftest;
use config::ExperimentConfig;
use pipeline::{hash_file, sha256_hex, Experiment, FileRecord, Manifest, Stage, StageRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sert", version, about = "Transformer factor models for monthly stock returns")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the generated synthetic panels and the OLS oracle fit.
    Synth(RunArgs),
    /// Fit every configured model over every test period and write predictions.
    Train(RunArgs),
    /// Performance tables, DM matrices and per-stock metrics from predictions.
    Eval(RunArgs),
    /// Buy-and-hold benchmarks and sign-signal strategies from predictions.
    Backtest(RunArgs),
    /// Per-stock R² and MSE histograms.
    Report(RunArgs),
    /// All stages in order.
    Run(RunArgs),
    /// Gradient checks, leak tests, mechanism identities and metric oracles.
    Selftest,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config file.
    #[arg(value_name = "CONFIG", required_unless_present = "config", conflicts_with = "config")]
    pub config_file: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `seed` in [experiment].
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads for (model, period) cells; defaults to the CPU count.
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    /// Output directory; beats `SERT_OUT`, which beats `out` in the config.
    #[arg(long, value_name = "DIR", env = "SERT_OUT")]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    fn config_path(&self) -> &Path {
        self.config
            .as_deref()
            .or(self.config_file.as_deref())
            .expect("clap requires a config")
    }
}

fn stages_for(command: &Command, config: &ExperimentConfig) -> Vec<Stage> {
    match command {
        Command::Synth(_) => vec![Stage::Synth],
        Command::Train(_) => vec![Stage::Train],
        Command::Eval(_) => vec![Stage::Eval],
        Command::Backtest(_) => vec![Stage::Backtest],
        Command::Report(_) => vec![Stage::Report],
        Command::Run(_) => {
            let mut s = Vec::new();
            if matches!(config.source, config::DataSource::Synthetic(_)) {
                s.push(Stage::Synth);
            }
            s.extend([Stage::Train, Stage::Eval, Stage::Backtest, Stage::Report]);
            s
        }
        Command::Selftest => Vec::new(),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let args = match &cli.command {
        Command::Selftest => {
            let report = run_selftest();
            print!("{}", report.table());
            return if report.passed() { EXIT_OK } else { EXIT_RUNTIME };
        }
        Command::Synth(a) | Command::Train(a) | Command::Eval(a) | Command::Backtest(a) | Command::Report(a) | Command::Run(a) => a,
    };
    match execute(&cli.command, args) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", single_line(&e.to_string()));
            exit_code(&e)
        }
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Backtest(_) => "backtest",
        Command::Report(_) => "report",
        Command::Run(_) => "run",
        Command::Selftest => "selftest",
    }
}

/// Everything up to the first stage: config, seed, output directory, inputs.
/// Failures here happen before any compute and before anything is written.
fn prepare(args: &RunArgs) -> Result<(Experiment, String, Vec<FileRecord>, usize)> {
    let path = args.config_path();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let config = ExperimentConfig::parse(&text, base)?;
    let seed = args
        .seed
        .or(config.seed)
        .ok_or_else(|| Error::Config("a seed is required (`--seed` or `seed` in [experiment])".into()))?;
    let out = args
        .out
        .clone()
        .or_else(|| config.out.clone())
        .ok_or_else(|| Error::Config("no output directory (`--out`, SERT_OUT, or `out` in [experiment])".into()))?;
    let jobs = args
        .jobs
        .or(config.jobs)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if jobs == 0 {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    let inputs = config
        .input_files()
        .iter()
        .map(|p| hash_file(p).map_err(|e| Error::Config(format!("input {}: {e}", p.display()))))
        .collect::<Result<Vec<_>>>()?;
    Ok((Experiment::new(config, seed, out), text, inputs, jobs))
}

fn execute(command: &Command, args: &RunArgs) -> Result<()> {
    let start = Instant::now();
    let (experiment, text, inputs, jobs) = prepare(args)?;
    fs::create_dir_all(&experiment.out)?;
    let mut manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        checkpoint_version: CHECKPOINT_VERSION,
        command: command_name(command).to_string(),
        seed: Some(experiment.seed),
        jobs,
        config_path: args.config_path().display().to_string(),
        config_sha256: sha256_hex(text.as_bytes()),
        config: text,
        inputs,
        stages: Vec::new(),
        complete: false,
        error: None,
        wall_time_secs: 0.0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    let result = pool.install(|| -> Result<()> {
        let data = experiment.load_data()?;
        experiment.model_configs(&data)?;
        for stage in stages_for(command, &experiment.config) {
            let mut outputs = Vec::new();
            let r = experiment.run_stage(stage, &data, &mut outputs);
            manifest.stages.push(StageRecord {
                stage,
                status: if r.is_ok() { "ok" } else { "failed" },
                outputs,
            });
            r?;
        }
        Ok(())
    });
    manifest.complete = result.is_ok();
    manifest.error = result.as_ref().err().map(|e| single_line(&e.to_string()));
    manifest.wall_time_secs = start.elapsed().as_secs_f64();
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(format!("manifest: {e}")))?;
    fs::write(experiment.out.join("manifest.json"), json + "\n")?;
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_config_code() {
        assert_eq!(run(["sert", "bogus"]), EXIT_CONFIG);
        assert_eq!(run(["sert", "run"]), EXIT_CONFIG);
        assert_eq!(run(["sert", "--version"]), EXIT_OK);
    }

    #[test]
    fn missing_config_file_is_a_config_error() {
        assert_eq!(run(["sert", "train", "/nonexistent/x.cfg", "--seed", "1", "--out", "/tmp/x"]), EXIT_CONFIG);
    }

    #[test]
    fn seed_is_mandatory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("a.cfg");
        fs::write(&cfg, "[synthetic]\nmonths = 300\n[periods]\np = 2020-01..2020-06\n").unwrap();
        let args = RunArgs {
            config_file: Some(cfg),
            config: None,
            seed: None,
            jobs: None,
            out: Some(dir.path().join("out")),
        };
        let err = prepare(&args).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn run_stage_order() {
        let cfg = ExperimentConfig::parse("[synthetic]\n[periods]\np = 2020-01..2020-06\n", Path::new(".")).unwrap();
        let args = RunArgs {
            config_file: None,
            config: Some(PathBuf::from("x")),
            seed: None,
            jobs: None,
            out: None,
        };
        assert_eq!(
            stages_for(&Command::Run(args), &cfg),
            [Stage::Synth, Stage::Train, Stage::Eval, Stage::Backtest, Stage::Report]
        );
    }
}
