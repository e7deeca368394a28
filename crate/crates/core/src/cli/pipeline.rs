//! Experiment stages: synth, train, eval, backtest and report.
//!
//! Stages communicate through the output tree only, so each can be rerun on
//! its own. Cells are computed in parallel; files are written afterwards in a
//! fixed order.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{DataSource, ExperimentConfig};
use crate::backtest::{buy_and_hold, portfolio_returns, sign_signal, softmax_filter, strategy_metrics, Weighting};
use crate::data::{
    format_sig10, generate_synthetic, load_panels, pooled_mean, read_panel_csv, screen, write_panel_csv, FactorPanel,
    Panel, ReturnPanel, SyntheticData, YearMonth, MAX_MISSING_FRACTION,
};
use crate::error::{Error, Result};
use crate::evaluation::{dm_matrix, errors, evaluate, EvalReport};
use crate::model::{width_for_heads, write_checkpoint, ModelConfig, TrainingMeta};
use crate::report::{benchmark_table, dm_table, histogram, performance_table, strategy_table, wealth_series, BenchmarkRow};
use crate::tensor::Tensor;
use crate::training::{train_for_period, TestPeriod, WindowData, WindowSplit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Train,
    Eval,
    Backtest,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Backtest => "backtest",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Resolved experiment: parsed config plus command-line overrides.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
}

/// Panels after alignment and factor screening.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub factors: FactorPanel,
    pub returns: ReturnPanel,
    pub synthetic: Option<SyntheticData>,
}

/// Everything one period needs: its splits and the actual test returns.
struct PeriodFrame<'a> {
    period: &'a TestPeriod,
    splits: Vec<WindowSplit>,
    test_rows: Vec<usize>,
    actual: Tensor,
}

impl PeriodFrame<'_> {
    fn dates(&self, data: &ExperimentData) -> Vec<YearMonth> {
        self.test_rows.iter().map(|&t| data.returns.dates()[t]).collect()
    }
}

fn rows_of(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    Tensor::from_rows(&rows.iter().map(|&r| t.row(r).to_vec()).collect::<Vec<_>>())
}

impl Experiment {
    pub fn new(config: ExperimentConfig, seed: u64, out: PathBuf) -> Self {
        Experiment { config, seed, out }
    }

    pub fn load_data(&self) -> Result<ExperimentData> {
        let (factors, returns, synthetic) = match &self.config.source {
            DataSource::Synthetic(spec) => {
                let syn = generate_synthetic(spec, self.seed)?;
                (syn.factors.clone(), syn.returns.clone(), Some(syn))
            }
            DataSource::Files { factors, returns, caps } => {
                let (f, r, _) = load_panels(factors, returns, caps.as_deref())?;
                (f, r, None)
            }
        };
        let earliest = self.config.periods.iter().map(|p| p.first).min().expect("at least one period");
        let history: Vec<usize> = (0..factors.rows()).filter(|&t| factors.dates[t] < earliest).collect();
        if history.is_empty() {
            return Err(Error::Data(format!("no months before the first test month {earliest}")));
        }
        let screened = screen(&factors.select_rows(&history), MAX_MISSING_FRACTION);
        let keep: Vec<usize> = screened
            .names
            .iter()
            .map(|n| factors.names.iter().position(|m| m == n).expect("screened name exists"))
            .collect();
        if keep.is_empty() {
            return Err(Error::Data("every factor exceeds the missing-value limit".into()));
        }
        Ok(ExperimentData {
            factors: factors.select_cols(&keep),
            returns,
            synthetic,
        })
    }

    pub fn model_configs(&self, data: &ExperimentData) -> Result<Vec<ModelConfig>> {
        let n_factors = data.factors.cols();
        let n_stocks = data.returns.returns.cols();
        let d = &self.config.model_defaults;
        self.config
            .models
            .iter()
            .map(|m| {
                let base = m.d_model.or(d.d_model).unwrap_or(n_stocks);
                let mut cfg = ModelConfig::new(m.family, m.heads, m.lnf, width_for_heads(base, m.heads), n_factors, n_stocks)
                    .with_name(m.name.clone())
                    .with_seed(self.seed);
                cfg.latent_fraction = d.latent_fraction;
                cfg.n_blocks = d.n_blocks;
                cfg.pretrain_out_dim = d.pretrain_out_dim.unwrap_or(n_stocks);
                cfg.scale = d.scale;
                cfg.cross_mask = d.cross_mask;
                cfg.finetune_pretrain = d.finetune_pretrain && m.family.has_pretrain();
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }

    fn frames<'a>(&'a self, data: &ExperimentData) -> Result<Vec<PeriodFrame<'a>>> {
        self.config
            .periods
            .iter()
            .map(|period| {
                let splits = period.splits(data.returns.dates(), self.config.in_sample_len, self.config.train.val_fraction)?;
                let test_rows: Vec<usize> = splits.iter().map(WindowSplit::test_index).collect();
                let panel = &data.returns.returns;
                if let Some(&t) = test_rows.iter().find(|&&t| (0..panel.cols()).any(|c| panel.is_missing(t, c))) {
                    return Err(Error::Data(format!(
                        "period `{}`: returns for {} have missing cells; test months must be fully observed",
                        period.name, panel.dates[t]
                    )));
                }
                let actual = rows_of(&panel.values, &test_rows)?;
                Ok(PeriodFrame {
                    period,
                    splits,
                    test_rows,
                    actual,
                })
            })
            .collect()
    }

    fn write(&self, rel: &str, bytes: &[u8], outputs: &mut Vec<FileRecord>) -> Result<()> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        outputs.push(FileRecord {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn run_stage(&self, stage: Stage, data: &ExperimentData, outputs: &mut Vec<FileRecord>) -> Result<()> {
        log::info!("stage {}", stage.name());
        match stage {
            Stage::Synth => self.synth(data, outputs),
            Stage::Train => self.train(data, outputs),
            Stage::Eval => self.eval(data, outputs),
            Stage::Backtest => self.backtest(data, outputs),
            Stage::Report => self.report(data, outputs),
        }
    }

    fn synth(&self, data: &ExperimentData, outputs: &mut Vec<FileRecord>) -> Result<()> {
        let syn = data
            .synthetic
            .as_ref()
            .ok_or_else(|| Error::Config("synth needs a [synthetic] section".into()))?;
        let mut buf = Vec::new();
        write_panel_csv(&mut buf, &syn.factors)?;
        self.write("data/factors.csv", &buf, outputs)?;
        buf.clear();
        write_panel_csv(&mut buf, &syn.returns.returns)?;
        self.write("data/returns.csv", &buf, outputs)?;
        if let Some(caps) = &syn.returns.caps {
            let panel = Panel::new(syn.returns.dates().to_vec(), syn.returns.tickers().to_vec(), caps.clone())?;
            buf.clear();
            write_panel_csv(&mut buf, &panel)?;
            self.write("data/caps.csv", &buf, outputs)?;
        }
        let o = &syn.oracle;
        let text = format!(
            "in_sample_r2,oos_r2,train_mean,oos_months\n{},{},{},{}\n",
            format_sig10(o.in_sample_r2),
            format_sig10(o.oos_r2),
            format_sig10(o.train_mean),
            o.test_rows.len()
        );
        self.write("data/oracle.csv", text.as_bytes(), outputs)
    }

    fn train(&self, data: &ExperimentData, outputs: &mut Vec<FileRecord>) -> Result<()> {
        let configs = self.model_configs(data)?;
        let frames = self.frames(data)?;
        let window = WindowData {
            factors: data.factors.values.clone(),
            factor_observed: data.factors.observed(),
            returns: data.returns.returns.values.clone(),
            return_observed: data.returns.returns.observed(),
        };
        let cells: Vec<(usize, usize)> = (0..frames.len())
            .flat_map(|p| (0..configs.len()).map(move |m| (p, m)))
            .collect();
        let results: Vec<Result<(Vec<u8>, Vec<u8>, String)>> = cells
            .par_iter()
            .map(|&(p, m)| {
                let frame = &frames[p];
                let cfg = &configs[m];
                let fitted = train_for_period(cfg, &window, &frame.splits, &self.config.train)
                    .map_err(|e| annotate(e, &format!("model `{}` period `{}`", cfg.name, frame.period.name)))?;
                let panel = Panel::new(frame.dates(data), data.returns.tickers().to_vec(), fitted.predictions)?;
                let mut csv = Vec::new();
                write_panel_csv(&mut csv, &panel)?;
                let mut ckpt = Vec::new();
                if let Some(model) = &fitted.final_model {
                    write_checkpoint(model, &mut ckpt)?;
                }
                Ok((csv, ckpt, fits_csv(&fitted.fits)))
            })
            .collect();
        for (&(p, m), r) in cells.iter().zip(results) {
            let (csv, ckpt, fits) = r?;
            let (period, model) = (&frames[p].period.name, &configs[m].name);
            self.write(&format!("predictions/{period}/{model}.csv"), &csv, outputs)?;
            self.write(&format!("models/{period}/{model}.ckpt"), &ckpt, outputs)?;
            self.write(&format!("models/{period}/{model}.fits.csv"), fits.as_bytes(), outputs)?;
        }
        Ok(())
    }

    fn predictions(&self, frame: &PeriodFrame, model: &str, data: &ExperimentData) -> Result<Tensor> {
        let rel = format!("predictions/{}/{model}.csv", frame.period.name);
        let path = self.out.join(&rel);
        let file = fs::File::open(&path)
            .map_err(|e| Error::Data(format!("cannot open {} ({e}); run the train stage first", path.display())))?;
        let panel = read_panel_csv(file).map_err(|e| annotate(e, &rel))?;
        if panel.names != data.returns.tickers() || panel.dates != frame.dates(data) {
            return Err(Error::Data(format!("{rel} does not match the configured tickers and test months")));
        }
        if panel.missing.iter().any(|&m| m) {
            return Err(Error::Data(format!("{rel} has empty cells")));
        }
        Ok(panel.values)
    }

    fn evaluate_period(&self, frame: &PeriodFrame, data: &ExperimentData) -> Result<Vec<(EvalReport, Tensor)>> {
        let train_mean = pooled_mean(&data.returns.returns, frame.splits[0].in_sample())?;
        self.config
            .models
            .iter()
            .map(|m| {
                let pred = self.predictions(frame, &m.name, data)?;
                let report = evaluate(&m.name, &frame.actual, &pred, train_mean)?;
                Ok((report, pred))
            })
            .collect()
    }

    fn eval(&self, data: &ExperimentData, outputs: &mut Vec<FileRecord>) -> Result<()> {
        for frame in self.frames(data)? {
            let name = &frame.period.name;
            let results = self.evaluate_period(&frame, data)?;
            let reports: Vec<EvalReport> = results.iter().map(|(r, _)| r.clone()).collect();
            self.write(&format!("eval/{name}/performance.csv"), performance_table(&reports)?.as_bytes(), outputs)?;
            let errs = results
                .iter()
                .map(|(_, p)| errors(&frame.actual, p))
                .collect::<Result<Vec<_>>>()?;
            let models: Vec<String> = reports.iter().map(|r| r.model.clone()).collect();
            let dm = dm_matrix(&models, &errs)?;
            self.write(&format!("eval/{name}/dm.csv"), dm_table(&dm)?.as_bytes(), outputs)?;
            let mut per_stock = String::from("model,stock,r2,mse\n");
            for r in &reports {
                for (i, ticker) in data.returns.tickers().iter().enumerate() {
                    per_stock.push_str(&format!(
                        "{},{ticker},{},{}\n",
                        r.model,
                        format_sig10(r.per_stock_r2[i]),
                        format_sig10(r.per_stock_mse[i])
                    ));
                }
            }
            self.write(&format!("eval/{name}/per_stock.csv"), per_stock.as_bytes(), outputs)?;
        }
        Ok(())
    }

    fn backtest(&self, data: &ExperimentData, outputs: &mut Vec<FileRecord>) -> Result<()> {
        let settings = &self.config.backtest;
        let prior_caps = data.returns.prior_caps();
        if settings.weightings.contains(&Weighting::Value) && prior_caps.is_none() {
            return Err(Error::Config("value weighting needs market caps (`caps` in [data])".into()));
        }
        let mut benchmarks = Vec::new();
        let frames = self.frames(data)?;
        for weighting in &settings.weightings {
            for frame in &frames {
                let caps = match (weighting, &prior_caps) {
                    (Weighting::Value, Some(c)) => Some(rows_of(c, &frame.test_rows)?),
                    _ => None,
                };
                let rf = vec![settings.rf; frame.test_rows.len()];
                let series = buy_and_hold(&frame.actual, *weighting, caps.as_ref())?;
                let label = format!("BH{}", &weighting.label()[..1]);
                benchmarks.push(BenchmarkRow {
                    strategy: label.clone(),
                    period: frame.period.name.clone(),
                    report: strategy_metrics(&series.returns, &rf)?,
                });
                self.write_wealth(frame, &format!("{label}.csv"), &series.wealth, data, outputs)?;
            }
        }
        self.write("backtest/buy_and_hold.csv", benchmark_table(&benchmarks)?.as_bytes(), outputs)?;
        for frame in &frames {
            let preds = self
                .config
                .models
                .iter()
                .map(|m| self.predictions(frame, &m.name, data))
                .collect::<Result<Vec<_>>>()?;
            let rf = vec![settings.rf; frame.test_rows.len()];
            for &filtered in settings.filter.variants() {
                let strategy = if filtered { "softmax" } else { "sign" };
                for weighting in &settings.weightings {
                    let caps = match (weighting, &prior_caps) {
                        (Weighting::Value, Some(c)) => Some(rows_of(c, &frame.test_rows)?),
                        _ => None,
                    };
                    let mut columns = Vec::new();
                    for (m, pred) in self.config.models.iter().zip(&preds) {
                        let mut signals = sign_signal(pred, &frame.actual)?;
                        if filtered {
                            signals = softmax_filter(&signals, pred, settings.keep_fraction, settings.scope)?;
                        }
                        let series = portfolio_returns(&signals, &frame.actual, *weighting, caps.as_ref())?;
                        columns.push((m.name.clone(), strategy_metrics(&series.returns, &rf)?));
                        let file = format!("{strategy}_{}_{}.csv", weighting.label(), m.name);
                        self.write_wealth(frame, &file, &series.wealth, data, outputs)?;
                    }
                    self.write(
                        &format!("backtest/{}/{strategy}_{}.csv", frame.period.name, weighting.label()),
                        strategy_table(&columns)?.as_bytes(),
                        outputs,
                    )?;
                }
            }
        }
        Ok(())
    }

    fn write_wealth(
        &self,
        frame: &PeriodFrame,
        file: &str,
        wealth: &[f64],
        data: &ExperimentData,
        outputs: &mut Vec<FileRecord>,
    ) -> Result<()> {
        let start = data.returns.dates()[frame.test_rows[0]].add_months(-1);
        let path: Vec<f64> = std::iter::once(1.0).chain(wealth.iter().copied()).collect();
        self.write(
            &format!("backtest/{}/wealth/{file}", frame.period.name),
            wealth_series(start, &path).as_bytes(),
            outputs,
        )
    }

    fn report(&self, data: &ExperimentData, outputs: &mut Vec<FileRecord>) -> Result<()> {
        let bins = self.config.histogram_bins;
        for frame in self.frames(data)? {
            for (r, _) in self.evaluate_period(&frame, data)? {
                let name = &frame.period.name;
                self.write(
                    &format!("histograms/{name}/{}_r2.csv", r.model),
                    histogram(&r.per_stock_r2, bins)?.as_bytes(),
                    outputs,
                )?;
                self.write(
                    &format!("histograms/{name}/{}_mse.csv", r.model),
                    histogram(&r.per_stock_mse, bins)?.as_bytes(),
                    outputs,
                )?;
            }
        }
        Ok(())
    }
}

fn fits_csv(fits: &[TrainingMeta]) -> String {
    let opt = |v: Option<f64>| v.map(format_sig10).unwrap_or_default();
    let mut s = String::from("fit,epochs_run,best_epoch,best_val_loss,pretrain_loss\n");
    for (k, f) in fits.iter().enumerate() {
        s.push_str(&format!(
            "{k},{},{},{},{}\n",
            f.epochs_run,
            f.best_epoch,
            opt(f.best_val_loss),
            opt(f.pretrain_loss)
        ));
    }
    s
}

/// Prefixes an error message with where it happened, keeping its kind.
fn annotate(e: Error, context: &str) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{context}: {m}")),
        Error::Data(m) => Error::Data(format!("{context}: {m}")),
        Error::Divergence(m) => Error::Divergence(format!("{context}: {m}")),
        Error::Undefined(m) => Error::Undefined(format!("{context}: {m}")),
        Error::Checkpoint(m) => Error::Checkpoint(format!("{context}: {m}")),
        other => other,
    }
}

/// Run record written after every command.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub checkpoint_version: u32,
    pub command: String,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub config_path: String,
    pub config_sha256: String,
    pub config: String,
    pub inputs: Vec<FileRecord>,
    pub stages: Vec<StageRecord>,
    pub complete: bool,
    pub error: Option<String>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// `ok`, or `failed` when outputs may be partial.
    pub status: &'static str,
    pub outputs: Vec<FileRecord>,
}

pub fn hash_file(path: &Path) -> Result<FileRecord> {
    let bytes = fs::read(path)?;
    Ok(FileRecord {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}
