//! Adam, patience-based early stopping, rolling-window splits and the
//! per-period fit/predict loop.

use std::ops::Range;

use rayon::prelude::*;

use crate::data::{zscore_columns, YearMonth};
use crate::error::{Error, Result};
use crate::model::{build_model, lag_returns, ModelConfig, TrainedModel, TrainingMeta};
use crate::tensor::{masked_mse, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            eta: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.eta >= 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

fn adam_update(store: &mut ParamStore, id: ParamId, cfg: &AdamConfig) -> Result<()> {
    let param = store.param_mut(id);
    let Some(grad) = param.value.grad().map(<[f64]>::to_vec) else {
        return Ok(());
    };
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(param.name.clone()));
    }
    let state = &mut param.adam;
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let values = param.value.data_mut();
    for (i, g) in grad.into_iter().enumerate() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        values[i] -= cfg.eta * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// One Adam update of every non-frozen parameter from its accumulated gradient.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    let ids: Vec<ParamId> = (0..store.len())
        .map(ParamId)
        .filter(|&id| !store.param(id).frozen)
        .collect();
    adam_step_params(store, &ids, cfg)
}

/// Adam update of exactly `ids`, frozen or not.
pub fn adam_step_params(store: &mut ParamStore, ids: &[ParamId], cfg: &AdamConfig) -> Result<()> {
    // check everything first so a bad gradient leaves the store untouched
    for &id in ids {
        let p = store.param(id);
        if p.value.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    for &id in ids {
        adam_update(store, id, cfg)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopOutcome {
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub train_history: Vec<f64>,
    pub val_history: Vec<f64>,
}

/// Patience loop over an arbitrary state.
///
/// `epoch(state, e)` trains epoch `e` (1-based) and returns `(train_loss, val_loss)`.
/// The state is snapshotted whenever validation strictly improves and the best
/// snapshot is restored before returning.
pub fn early_stopping<S, Snap>(
    state: &mut S,
    patience: usize,
    max_epochs: usize,
    mut epoch: impl FnMut(&mut S, usize) -> Result<(f64, f64)>,
    snapshot: impl Fn(&S) -> Snap,
    restore: impl Fn(&mut S, Snap),
) -> Result<EarlyStopOutcome> {
    if patience == 0 {
        return Err(Error::Config("patience must be at least 1".into()));
    }
    let mut best: Option<(usize, f64, Snap)> = None;
    let mut since_best = 0;
    let mut out = EarlyStopOutcome {
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        epochs_run: 0,
        train_history: Vec::new(),
        val_history: Vec::new(),
    };
    for e in 1..=max_epochs {
        let (train, val) = epoch(state, e)?;
        if !train.is_finite() || !val.is_finite() {
            return Err(Error::Divergence(format!("epoch {e}: train loss {train}, validation loss {val}")));
        }
        out.epochs_run = e;
        out.train_history.push(train);
        out.val_history.push(val);
        if best.as_ref().is_none_or(|(_, b, _)| val < *b) {
            best = Some((e, val, snapshot(state)));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= patience {
                break;
            }
        }
    }
    if let Some((e, loss, snap)) = best {
        restore(state, snap);
        out.best_epoch = e;
        out.best_val_loss = loss;
    }
    Ok(out)
}

/// A contiguous in-sample sequence.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub factors: Tensor,
    /// Row `t` holds the returns of month `t-1`.
    pub lagged: Tensor,
    pub target: Tensor,
    /// Row-major observed flags for `target`.
    pub observed: Vec<bool>,
}

/// One forward pass: the input rows and the rows whose loss it contributes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow {
    pub input: Range<usize>,
    pub loss: Range<usize>,
}

/// Covers `rows` with windows of at most `context` rows, ending at `rows.end`
/// and stepping back by `context`. Each loss row belongs to exactly one window;
/// windows may reach back before `rows.start` (down to 0) for context.
pub fn context_windows(rows: Range<usize>, context: usize) -> Vec<ContextWindow> {
    let mut out = Vec::new();
    let mut end = rows.end;
    while end > rows.start && context > 0 {
        let start = end.saturating_sub(context);
        out.push(ContextWindow {
            input: start..end,
            loss: start.max(rows.start)..end,
        });
        end = start.max(rows.start);
        if start == 0 {
            break;
        }
    }
    out.reverse();
    out
}

struct WindowBatch {
    factors: Tensor,
    lagged: Option<Tensor>,
    target: Tensor,
    mask: Vec<bool>,
    count: usize,
}

impl SequenceData {
    fn batches(&self, windows: &[ContextWindow], decoder: bool) -> Vec<WindowBatch> {
        let n = self.target.cols();
        windows
            .iter()
            .map(|w| {
                let (a, b) = (w.input.start, w.input.end);
                let mask: Vec<bool> = (a * n..b * n)
                    .map(|i| self.observed[i] && w.loss.contains(&(i / n)))
                    .collect();
                WindowBatch {
                    factors: self.factors.slice_rows(a, b),
                    lagged: decoder.then(|| self.lagged.slice_rows(a, b)),
                    target: self.target.slice_rows(a, b),
                    count: mask.iter().filter(|&&o| o).count(),
                    mask,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    pub patience: usize,
    pub max_epochs: usize,
    pub pretrain_epochs: usize,
    pub pretrain_adam: AdamConfig,
    pub val_fraction: f64,
    /// Months between refits; `None` fits once per period.
    pub stride: Option<usize>,
    /// Rows per forward pass; `None` feeds the whole in-sample window.
    pub context_len: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            adam: AdamConfig::default(),
            patience: 20,
            max_epochs: 500,
            pretrain_epochs: 200,
            pretrain_adam: AdamConfig::default(),
            val_fraction: 0.3,
            stride: None,
            context_len: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.pretrain_adam.validate()?;
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if self.stride == Some(0) {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if self.context_len == Some(0) {
            return Err(Error::Config("context_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Observed-cell MSE pooled over every window of `batches`.
fn pooled_loss(model: &TrainedModel, batches: &[WindowBatch]) -> Result<f64> {
    let total: usize = batches.iter().map(|b| b.count).sum();
    let mut loss = 0.0;
    for b in batches.iter().filter(|b| b.count > 0) {
        let out = model.forward(&b.factors, b.lagged.as_ref())?;
        loss += masked_mse(&out, &b.target, &b.mask)?.0 * b.count as f64;
    }
    Ok(loss / total as f64)
}

/// Trains on `train_rows`, validates on `val_rows` of the same sequence, and
/// restores the best-validation parameters. Without validation rows it runs
/// `max_epochs` and keeps the final parameters.
///
/// Each epoch is one Adam step on the loss pooled over all training windows
/// (a single window when `context_len` is `None`).
pub fn early_stopping_train(
    model: &mut TrainedModel,
    data: &SequenceData,
    train_rows: Range<usize>,
    val_rows: Range<usize>,
    opts: &TrainOptions,
) -> Result<EarlyStopOutcome> {
    let decoder = model.config.family.has_decoder();
    let train_context = opts.context_len.unwrap_or(train_rows.end);
    let val_context = opts.context_len.unwrap_or(val_rows.end);
    let train = data.batches(&context_windows(train_rows, train_context), decoder);
    let val = data.batches(&context_windows(val_rows, val_context), decoder);
    let train_total: usize = train.iter().map(|b| b.count).sum();
    if train_total == 0 {
        return Err(Error::Data("no observed returns in the training rows".into()));
    }
    let has_val = val.iter().any(|b| b.count > 0);
    let outcome = early_stopping(
        model,
        opts.patience,
        opts.max_epochs,
        |m, e| {
            m.store.zero_grads();
            let mut train_loss = 0.0;
            for b in train.iter().filter(|b| b.count > 0) {
                let (out, cache) = m.forward_cached(&b.factors, b.lagged.as_ref())?;
                let (loss, grad) = masked_mse(&out, &b.target, &b.mask)?;
                let share = b.count as f64 / train_total as f64;
                train_loss += loss * share;
                m.backward(&cache, &grad.scale(share))?;
            }
            adam_step(&mut m.store, &opts.adam)?;
            let val_loss = if has_val {
                pooled_loss(m, &val)?
            } else {
                // no validation rows: a strictly decreasing stand-in keeps the last epoch
                -(e as f64)
            };
            Ok((train_loss, val_loss))
        },
        |m| m.store.snapshot(),
        |m, snap| m.store.restore(&snap),
    )?;
    model.store.zero_grads();
    model.meta.epochs_run = outcome.epochs_run;
    model.meta.best_epoch = outcome.best_epoch;
    model.meta.best_val_loss = has_val.then_some(outcome.best_val_loss);
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Rolling windows
// ---------------------------------------------------------------------------

/// Row ranges of one rolling fit: train and validation in-sample, one test month.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSplit {
    pub train_range: Range<usize>,
    pub val_range: Range<usize>,
    pub test_range: Range<usize>,
}

impl WindowSplit {
    pub fn in_sample(&self) -> Range<usize> {
        self.train_range.start..self.val_range.end
    }

    pub fn test_index(&self) -> usize {
        self.test_range.start
    }
}

/// Fixed-length windows advancing one month; test months run from
/// `in_sample_len` up to (excluding) `test_end`.
pub fn rolling_windows(test_end: usize, in_sample_len: usize, val_fraction: f64) -> Result<Vec<WindowSplit>> {
    if in_sample_len == 0 {
        return Err(Error::Config("in-sample window must be non-empty".into()));
    }
    if test_end < in_sample_len {
        return Err(Error::Data(format!(
            "insufficient history: {test_end} months for an in-sample window of {in_sample_len}"
        )));
    }
    let val_len = (val_fraction * in_sample_len as f64).round() as usize;
    if val_len >= in_sample_len {
        return Err(Error::Config(format!(
            "validation length {val_len} leaves no training rows in a window of {in_sample_len}"
        )));
    }
    let train_len = in_sample_len - val_len;
    Ok((in_sample_len..test_end)
        .map(|test| {
            let start = test - in_sample_len;
            WindowSplit {
                train_range: start..start + train_len,
                val_range: start + train_len..test,
                test_range: test..test + 1,
            }
        })
        .collect())
}

/// A named out-of-sample range of months, both ends inclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestPeriod {
    pub name: String,
    pub first: YearMonth,
    pub last: YearMonth,
}

/// First out-of-sample month of the reference calendar; the 672-month
/// in-sample window before it starts in 1957-01.
pub const REFERENCE_TEST_START: YearMonth = YearMonth { year: 2013, month: 1 };
pub const REFERENCE_IN_SAMPLE_LEN: usize = 672;

impl TestPeriod {
    pub fn new(name: impl Into<String>, first: YearMonth, last: YearMonth) -> Result<Self> {
        let name = name.into();
        if last < first {
            return Err(Error::Config(format!("period `{name}` ends ({last}) before it starts ({first})")));
        }
        Ok(TestPeriod { name, first, last })
    }

    /// `1911`, `2112` or `2212`: tests from 2013-01 through the named month.
    pub fn reference(name: &str) -> Result<Self> {
        let last = match name {
            "1911" => YearMonth { year: 2019, month: 11 },
            "2112" => YearMonth { year: 2021, month: 12 },
            "2212" => YearMonth { year: 2022, month: 12 },
            other => {
                return Err(Error::Config(format!(
                    "unknown reference period `{other}` (expected 1911, 2112 or 2212)"
                )))
            }
        };
        TestPeriod::new(name, REFERENCE_TEST_START, last)
    }

    pub fn len(&self) -> usize {
        self.first.months_until(self.last) as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Rolling splits predicting every month of the period on the `dates` axis.
    pub fn splits(&self, dates: &[YearMonth], in_sample_len: usize, val_fraction: f64) -> Result<Vec<WindowSplit>> {
        let locate = |d: YearMonth| {
            dates
                .binary_search(&d)
                .map_err(|_| Error::Data(format!("period `{}` month {d} is outside the data", self.name)))
        };
        let first = locate(self.first)?;
        let last = locate(self.last)?;
        if last - first + 1 != self.len() {
            return Err(Error::Data(format!("period `{}` has gaps in the data calendar", self.name)));
        }
        if first < in_sample_len {
            return Err(Error::Data(format!(
                "insufficient history: period `{}` starts at month {first} of the data, the in-sample window needs {in_sample_len}",
                self.name
            )));
        }
        Ok(rolling_windows(last + 1, in_sample_len, val_fraction)?
            .into_iter()
            .skip(first - in_sample_len)
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Per-period loop
// ---------------------------------------------------------------------------

/// Full aligned panels for one experiment. Missing cells are NaN in the
/// value tensors and `false` in the masks.
#[derive(Debug, Clone)]
pub struct WindowData {
    pub factors: Tensor,
    pub factor_observed: Vec<bool>,
    pub returns: Tensor,
    pub return_observed: Vec<bool>,
}

impl WindowData {
    /// Panels without missing cells.
    pub fn complete(factors: Tensor, returns: Tensor) -> Result<Self> {
        if factors.rows() != returns.rows() {
            return Err(Error::shape("WindowData", factors.shape(), returns.shape()));
        }
        Ok(WindowData {
            factor_observed: vec![true; factors.len()],
            return_observed: vec![true; returns.len()],
            factors,
            returns,
        })
    }

    pub fn len(&self) -> usize {
        self.factors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns with missing cells set to zero.
    fn filled_returns(&self) -> Tensor {
        let mut r = self.returns.clone();
        for (v, &o) in r.data_mut().iter_mut().zip(&self.return_observed) {
            if !o {
                *v = 0.0;
            }
        }
        r
    }

    /// Z-scores factors with statistics from `stats_rows` only (population std).
    /// Zero-variance factors become all-zero columns; missing cells become 0.
    pub fn standardized_factors(&self, stats_rows: Range<usize>) -> Tensor {
        zscore_columns(&self.factors, &self.factor_observed, stats_rows).0
    }
}

/// Out-of-sample predictions of one model over one period.
#[derive(Debug, Clone)]
pub struct PeriodPredictions {
    /// Row index of each predicted month.
    pub test_rows: Vec<usize>,
    pub predictions: Tensor,
    pub fits: Vec<TrainingMeta>,
    /// Model of the last refit window.
    pub final_model: Option<TrainedModel>,
}

fn fit_window(
    cfg: &ModelConfig,
    data: &WindowData,
    factors: &Tensor,
    lagged: &Tensor,
    split: &WindowSplit,
    opts: &TrainOptions,
) -> Result<TrainedModel> {
    let rows = split.in_sample();
    let n = data.returns.cols();
    let seq = SequenceData {
        factors: factors.slice_rows(rows.start, rows.end),
        lagged: lagged.slice_rows(rows.start, rows.end),
        target: data.filled_returns().slice_rows(rows.start, rows.end),
        observed: data.return_observed[rows.start * n..rows.end * n].to_vec(),
    };
    let mut model = build_model(cfg)?;
    if cfg.family.has_pretrain() {
        let train_len = split.train_range.len();
        model.pretrain(&seq.factors.slice_rows(0, train_len), opts.pretrain_epochs, &opts.pretrain_adam)?;
    }
    let train = 0..split.train_range.len();
    let val = train.end..rows.len();
    early_stopping_train(&mut model, &seq, train, val, opts)?;
    Ok(model)
}

/// Fits on each refit window and predicts every test month of `splits`.
///
/// Month `t` is predicted from the last row of a forward pass over the
/// `in_sample_len` months ending at `t`, so predictions only see factors up to
/// `t` and returns up to `t-1`.
pub fn train_for_period(
    cfg: &ModelConfig,
    data: &WindowData,
    splits: &[WindowSplit],
    opts: &TrainOptions,
) -> Result<PeriodPredictions> {
    opts.validate()?;
    cfg.validate()?;
    if data.factors.cols() != cfg.n_factors || data.returns.cols() != cfg.n_stocks {
        return Err(Error::Config(format!(
            "model `{}` expects {} factors and {} stocks, data has {} and {}",
            cfg.name,
            cfg.n_factors,
            cfg.n_stocks,
            data.factors.cols(),
            data.returns.cols()
        )));
    }
    if splits.is_empty() {
        return Ok(PeriodPredictions {
            test_rows: Vec::new(),
            predictions: Tensor::zeros(0, cfg.n_stocks),
            fits: Vec::new(),
            final_model: None,
        });
    }
    let stride = opts.stride.unwrap_or(splits.len()).max(1);
    let lagged = lag_returns(&data.filled_returns());
    let groups: Vec<&[WindowSplit]> = splits.chunks(stride).collect();
    let results: Vec<Result<(TrainedModel, Vec<(usize, Vec<f64>)>)>> = groups
        .par_iter()
        .map(|group| {
            let first = &group[0];
            let factors = data.standardized_factors(first.in_sample());
            let model = fit_window(cfg, data, &factors, &lagged, first, opts)?;
            let win = opts.context_len.unwrap_or(first.in_sample().len());
            let mut rows = Vec::with_capacity(group.len());
            for split in group.iter() {
                let t = split.test_index();
                let start = (t + 1).saturating_sub(win);
                let x = factors.slice_rows(start, t + 1);
                let lag = model.config.family.has_decoder().then(|| lagged.slice_rows(start, t + 1));
                let out = model.forward(&x, lag.as_ref())?;
                rows.push((t, out.row(t - start).to_vec()));
            }
            Ok((model, rows))
        })
        .collect();
    let mut test_rows = Vec::with_capacity(splits.len());
    let mut values = Vec::with_capacity(splits.len() * cfg.n_stocks);
    let mut fits = Vec::with_capacity(groups.len());
    let mut final_model = None;
    for r in results {
        let (model, rows) = r?;
        fits.push(model.meta.clone());
        final_model = Some(model);
        for (t, row) in rows {
            test_rows.push(t);
            values.extend(row);
        }
    }
    Ok(PeriodPredictions {
        predictions: Tensor::from_vec(test_rows.len(), cfg.n_stocks, values)?,
        test_rows,
        fits,
        final_model,
    })
}
