//! Monthly panels: CSV ingestion, missing-value screening, window-local
//! standardization, and the synthetic linear-factor generator with its OLS
//! oracle.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::rolling_windows;

/// Largest missing fraction a factor may have and survive screening.
pub const MAX_MISSING_FRACTION: f64 = 0.40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Data(format!("month {month} out of range")));
        }
        Ok(YearMonth { year, month })
    }

    fn ordinal(self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    fn from_ordinal(o: i64) -> Self {
        YearMonth {
            year: o.div_euclid(12) as i32,
            month: (o.rem_euclid(12) + 1) as u32,
        }
    }

    pub fn add_months(self, k: i64) -> Self {
        Self::from_ordinal(self.ordinal() + k)
    }

    pub fn next(self) -> Self {
        self.add_months(1)
    }

    /// `other − self` in months.
    pub fn months_until(self, other: YearMonth) -> i64 {
        other.ordinal() - self.ordinal()
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("invalid date `{s}` (expected YYYY-MM)"));
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        YearMonth::new(y.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?)
    }
}

/// Consecutive months starting at `start`.
pub fn month_range(start: YearMonth, len: usize) -> Vec<YearMonth> {
    (0..len as i64).map(|k| start.add_months(k)).collect()
}

/// Formats with ten significant digits, then prints the shortest exact form.
pub fn format_sig10(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let rounded: f64 = format!("{v:.9e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

/// Dated matrix with a missing mask; missing values are stored as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub dates: Vec<YearMonth>,
    pub names: Vec<String>,
    pub values: Tensor,
    pub missing: Vec<bool>,
}

impl Panel {
    pub fn new(dates: Vec<YearMonth>, names: Vec<String>, values: Tensor) -> Result<Self> {
        if values.shape() != (dates.len(), names.len()) {
            return Err(Error::shape("Panel::new", values.shape(), (dates.len(), names.len())));
        }
        let missing = values.data().iter().map(|v| v.is_nan()).collect();
        Ok(Panel {
            dates,
            names,
            values,
            missing,
        })
    }

    pub fn rows(&self) -> usize {
        self.dates.len()
    }

    pub fn cols(&self) -> usize {
        self.names.len()
    }

    pub fn is_missing(&self, t: usize, c: usize) -> bool {
        self.missing[t * self.cols() + c]
    }

    pub fn observed(&self) -> Vec<bool> {
        self.missing.iter().map(|m| !m).collect()
    }

    pub fn missing_fraction(&self, c: usize) -> f64 {
        if self.rows() == 0 {
            return 0.0;
        }
        (0..self.rows()).filter(|&t| self.is_missing(t, c)).count() as f64 / self.rows() as f64
    }

    pub fn select_rows(&self, keep: &[usize]) -> Panel {
        let cols = self.cols();
        let mut values = Vec::with_capacity(keep.len() * cols);
        let mut missing = Vec::with_capacity(keep.len() * cols);
        for &t in keep {
            values.extend_from_slice(self.values.row(t));
            missing.extend_from_slice(&self.missing[t * cols..(t + 1) * cols]);
        }
        Panel {
            dates: keep.iter().map(|&t| self.dates[t]).collect(),
            names: self.names.clone(),
            values: Tensor::from_vec(keep.len(), cols, values).expect("row selection keeps width"),
            missing,
        }
    }

    pub fn select_cols(&self, keep: &[usize]) -> Panel {
        let rows = self.rows();
        let mut values = Vec::with_capacity(rows * keep.len());
        let mut missing = Vec::with_capacity(rows * keep.len());
        for t in 0..rows {
            for &c in keep {
                values.push(self.values.get(t, c));
                missing.push(self.is_missing(t, c));
            }
        }
        Panel {
            dates: self.dates.clone(),
            names: keep.iter().map(|&c| self.names[c].clone()).collect(),
            values: Tensor::from_vec(rows, keep.len(), values).expect("column selection keeps height"),
            missing,
        }
    }

    pub fn row_of(&self, date: YearMonth) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    /// Values with missing cells replaced by `fill`.
    pub fn filled(&self, fill: f64) -> Tensor {
        let mut v = self.values.clone();
        for (x, &m) in v.data_mut().iter_mut().zip(&self.missing) {
            if m {
                *x = fill;
            }
        }
        v
    }
}

/// Factor panel: `T × F` sorted-portfolio returns.
pub type FactorPanel = Panel;

/// Stock excess returns with optional market caps on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    pub returns: Panel,
    pub caps: Option<Tensor>,
}

impl ReturnPanel {
    pub fn tickers(&self) -> &[String] {
        &self.returns.names
    }

    pub fn dates(&self) -> &[YearMonth] {
        &self.returns.dates
    }

    /// Caps shifted down one row: row `t` holds the caps of month `t-1`, row 0 is NaN.
    pub fn prior_caps(&self) -> Option<Tensor> {
        self.caps.as_ref().map(|c| {
            let mut out = Tensor::filled(c.rows(), c.cols(), f64::NAN);
            for t in 1..c.rows() {
                out.row_mut(t).copy_from_slice(c.row(t - 1));
            }
            out
        })
    }
}

/// Parses `date,<name>...` CSV; empty cells are missing.
pub fn read_panel_csv<R: Read>(reader: R) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || !headers[0].eq_ignore_ascii_case("date") {
        return Err(Error::Data("first column must be `date`".into()));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut dates: Vec<YearMonth> = Vec::new();
    let mut values = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let date: YearMonth = rec[0].parse().map_err(|e| Error::Data(format!("row {row}: {e}")))?;
        if let Some(&prev) = dates.last() {
            if date == prev {
                return Err(Error::Data(format!("row {row}: duplicate date {date}")));
            }
            if date < prev {
                return Err(Error::Data(format!("row {row}: date {date} is not after {prev}")));
            }
        }
        dates.push(date);
        for (c, cell) in rec.iter().skip(1).enumerate() {
            values.push(if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|_| {
                    Error::Data(format!("row {row}, column `{}`: cannot parse `{cell}`", names[c]))
                })?
            });
        }
    }
    let values = Tensor::from_vec(dates.len(), names.len(), values)?;
    Panel::new(dates, names, values)
}

pub fn read_panel_file(path: impl AsRef<Path>) -> Result<Panel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    read_panel_csv(file)
}

/// Writes `date,<name>...` with ten significant digits; missing cells are empty.
pub fn write_panel_csv<W: Write>(writer: W, panel: &Panel) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(std::iter::once("date").chain(panel.names.iter().map(String::as_str)))?;
    for t in 0..panel.rows() {
        let mut rec = vec![panel.dates[t].to_string()];
        for c in 0..panel.cols() {
            rec.push(if panel.is_missing(t, c) {
                String::new()
            } else {
                format_sig10(panel.values.get(t, c))
            });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_panel_file(path: impl AsRef<Path>, panel: &Panel) -> Result<()> {
    write_panel_csv(File::create(path)?, panel)
}

/// Rows dropped from each input while intersecting date axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Alignment {
    pub dropped_factor_rows: usize,
    pub dropped_return_rows: usize,
    pub dropped_cap_rows: usize,
}

fn intersect(panels: &[&Panel]) -> Vec<YearMonth> {
    let mut common: Vec<YearMonth> = panels[0].dates.clone();
    for p in &panels[1..] {
        let set: HashSet<YearMonth> = p.dates.iter().copied().collect();
        common.retain(|d| set.contains(d));
    }
    common
}

fn restrict(panel: &Panel, dates: &[YearMonth]) -> (Panel, usize) {
    let keep: Vec<usize> = dates.iter().map(|d| panel.row_of(*d).expect("date from intersection")).collect();
    (panel.select_rows(&keep), panel.rows() - keep.len())
}

/// Loads and date-aligns the factor, return and optional cap files.
pub fn load_panels(
    factors_path: impl AsRef<Path>,
    returns_path: impl AsRef<Path>,
    caps_path: Option<&Path>,
) -> Result<(FactorPanel, ReturnPanel, Alignment)> {
    let factors = read_panel_file(factors_path)?;
    let returns = read_panel_file(returns_path)?;
    let caps = caps_path.map(read_panel_file).transpose()?;
    align_panels(factors, returns, caps)
}

pub fn align_panels(factors: Panel, returns: Panel, caps: Option<Panel>) -> Result<(FactorPanel, ReturnPanel, Alignment)> {
    if let Some(c) = &caps {
        if c.names != returns.names {
            return Err(Error::Data("caps columns must match the return tickers".into()));
        }
    }
    let mut all = vec![&factors, &returns];
    if let Some(c) = &caps {
        all.push(c);
    }
    let dates = intersect(&all);
    if dates.is_empty() {
        return Err(Error::Data("factor and return files share no dates".into()));
    }
    let (f, df) = restrict(&factors, &dates);
    let (r, dr) = restrict(&returns, &dates);
    let (c, dc) = match &caps {
        Some(c) => {
            let (p, d) = restrict(c, &dates);
            (Some(p.values), d)
        }
        None => (None, 0),
    };
    let alignment = Alignment {
        dropped_factor_rows: df,
        dropped_return_rows: dr,
        dropped_cap_rows: dc,
    };
    if df + dr + dc > 0 {
        log::warn!(
            "date axes differ; kept {} common months (dropped {df} factor, {dr} return, {dc} cap rows)",
            dates.len()
        );
    }
    Ok((f, ReturnPanel { returns: r, caps: c }, alignment))
}

/// Drops factors whose missing fraction exceeds `max_missing`.
pub fn screen(panel: &FactorPanel, max_missing: f64) -> FactorPanel {
    let keep: Vec<usize> = (0..panel.cols()).filter(|&c| panel.missing_fraction(c) <= max_missing).collect();
    let dropped = panel.cols() - keep.len();
    if dropped > 0 {
        log::info!("screen dropped {dropped} factors with more than {:.0}% missing", max_missing * 100.0);
    }
    panel.select_cols(&keep)
}

/// Column z-scores using statistics from `stats_rows` only (divisor `n`).
///
/// Missing cells become 0. Returns the transformed values and, per column,
/// whether it had zero variance (or no observations) in the window; such
/// columns are left all zero.
pub fn zscore_columns(values: &Tensor, observed: &[bool], stats_rows: Range<usize>) -> (Tensor, Vec<bool>) {
    let (t, f) = values.shape();
    let mut out = Tensor::zeros(t, f);
    let mut degenerate = vec![false; f];
    for c in 0..f {
        let obs: Vec<f64> = stats_rows
            .clone()
            .filter(|&r| observed[r * f + c])
            .map(|r| values.get(r, c))
            .collect();
        let n = obs.len() as f64;
        let mean = obs.iter().sum::<f64>() / n;
        let std = (obs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        if obs.is_empty() || std <= 0.0 || !std.is_finite() {
            degenerate[c] = true;
            continue;
        }
        for r in 0..t {
            if observed[r * f + c] {
                out.set(r, c, (values.get(r, c) - mean) / std);
            }
        }
    }
    (out, degenerate)
}

/// Standardizes with statistics from `train_rows`, fills missing cells with 0,
/// and drops zero-variance factors. The missing mask is retained.
pub fn impute_standardize(panel: &FactorPanel, train_rows: Range<usize>) -> FactorPanel {
    let (z, degenerate) = zscore_columns(&panel.values, &panel.observed(), train_rows);
    let keep: Vec<usize> = (0..panel.cols()).filter(|&c| !degenerate[c]).collect();
    for c in (0..panel.cols()).filter(|&c| degenerate[c]) {
        log::warn!("factor `{}` has zero variance in the training window; dropped", panel.names[c]);
    }
    let out = Panel {
        dates: panel.dates.clone(),
        names: panel.names.clone(),
        values: z,
        missing: panel.missing.clone(),
    };
    out.select_cols(&keep)
}

/// Pooled mean of the observed cells in `rows`.
pub fn pooled_mean(panel: &Panel, rows: Range<usize>) -> Result<f64> {
    let cols = panel.cols();
    let (sum, n) = rows
        .flat_map(|t| (0..cols).map(move |c| (t, c)))
        .filter(|&(t, c)| !panel.is_missing(t, c))
        .fold((0.0, 0usize), |(s, n), (t, c)| (s + panel.values.get(t, c), n + 1));
    if n == 0 {
        return Err(Error::Data("no observed returns in the training window".into()));
    }
    Ok(sum / n as f64)
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub months: usize,
    pub factors: usize,
    pub stocks: usize,
    pub noise_sigma: f64,
    pub missing_rate: f64,
    /// Typical magnitude of the signal part of monthly returns.
    pub return_scale: f64,
    /// Permute the return rows in time, destroying the factor link.
    pub shuffle_labels: bool,
    pub in_sample_len: usize,
    pub val_fraction: f64,
    pub start: YearMonth,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            months: 300,
            factors: 10,
            stocks: 20,
            noise_sigma: 0.0,
            missing_rate: 0.0,
            return_scale: 0.05,
            shuffle_labels: false,
            in_sample_len: 240,
            val_fraction: 0.3,
            start: YearMonth { year: 2000, month: 1 },
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.months == 0 || self.factors == 0 || self.stocks == 0 {
            return Err(Error::Config("synthetic dimensions must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config("missing_rate must lie in [0, 1)".into()));
        }
        if self.in_sample_len == 0 || self.in_sample_len >= self.months {
            return Err(Error::Config(format!(
                "in_sample_len {} must be in 1..{}",
                self.in_sample_len, self.months
            )));
        }
        Ok(())
    }
}

/// OLS benchmark fitted with an intercept on each rolling in-sample window.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleFit {
    pub in_sample_r2: f64,
    pub oos_r2: f64,
    pub train_mean: f64,
    pub test_rows: Vec<usize>,
    pub predictions: Tensor,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub factors: FactorPanel,
    pub returns: ReturnPanel,
    pub loadings: Tensor,
    pub oracle: OracleFit,
}

fn normal_tensor<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized buffer")
}

/// Linear factor panel `r = s · F·B / √F + ε` with factors and loadings standard normal.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, f, n) = (spec.months, spec.factors, spec.stocks);
    let x = normal_tensor(t, f, &mut rng);
    let loadings = normal_tensor(f, n, &mut rng);
    let signal = crate::tensor::matmul(&x, &loadings)?.scale(spec.return_scale / (f as f64).sqrt());
    let noise = normal_tensor(t, n, &mut rng).scale(spec.noise_sigma);
    let mut returns = signal.add(&noise)?;
    if spec.shuffle_labels {
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(&mut rng);
        let rows: Vec<Vec<f64>> = order.iter().map(|&r| returns.row(r).to_vec()).collect();
        returns = Tensor::from_rows(&rows)?;
    }
    let mut caps = Tensor::zeros(t, n);
    for i in 0..n {
        let mut c = rng.random_range(1.0..10.0);
        for s in 0..t {
            c *= 1.0 + returns.get(s, i);
            caps.set(s, i, c.max(1e-6));
        }
    }
    let mut factors = x;
    if spec.missing_rate > 0.0 {
        for v in factors.data_mut() {
            if rng.random::<f64>() < spec.missing_rate {
                *v = f64::NAN;
            }
        }
    }
    let dates = month_range(spec.start, t);
    let factor_panel = Panel::new(dates.clone(), (1..=f).map(|k| format!("F{k}")).collect(), factors)?;
    let return_panel = Panel::new(dates, (1..=n).map(|k| format!("S{k}")).collect(), returns)?;
    let oracle = ols_oracle(&factor_panel, &return_panel, spec.in_sample_len, spec.val_fraction)?;
    Ok(SyntheticData {
        factors: factor_panel,
        returns: ReturnPanel {
            returns: return_panel,
            caps: Some(caps),
        },
        loadings,
        oracle,
    })
}

fn design(x: &Tensor, rows: Range<usize>) -> DMatrix<f64> {
    let f = x.cols();
    DMatrix::from_fn(rows.len(), f + 1, |r, c| if c == 0 { 1.0 } else { x.get(rows.start + r, c - 1) })
}

fn lstsq(a: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .svd(true, true)
        .solve(y, 1e-12)
        .map_err(|e| Error::Undefined(format!("least squares failed: {e}")))
}

/// Rolling OLS with intercept on window-standardized factors, refit every month.
pub fn ols_oracle(factors: &FactorPanel, returns: &Panel, in_sample_len: usize, val_fraction: f64) -> Result<OracleFit> {
    let splits = rolling_windows(returns.rows(), in_sample_len, val_fraction)?;
    let n = returns.cols();
    let y_all = returns.filled(0.0);
    let mut test_rows = Vec::with_capacity(splits.len());
    let mut preds = Vec::with_capacity(splits.len() * n);
    let mut in_sample_r2 = f64::NAN;
    for (k, split) in splits.iter().enumerate() {
        let rows = split.in_sample();
        let (z, _) = zscore_columns(&factors.values, &factors.observed(), rows.clone());
        let a = design(&z, rows.clone());
        let y = DMatrix::from_fn(rows.len(), n, |r, c| y_all.get(rows.start + r, c));
        let beta = lstsq(&a, &y)?;
        if k == 0 {
            let fitted = &a * &beta;
            let mean = y.mean();
            let sse: f64 = (&y - &fitted).iter().map(|e| e * e).sum();
            let sst: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
            in_sample_r2 = 1.0 - sse / sst;
        }
        let t = split.test_index();
        let row = design(&z, t..t + 1) * &beta;
        test_rows.push(t);
        preds.extend(row.iter().copied());
    }
    let predictions = Tensor::from_vec(test_rows.len(), n, preds)?;
    let first = splits
        .first()
        .ok_or_else(|| Error::Data("no out-of-sample months for the oracle".into()))?;
    let train_mean = pooled_mean(returns, first.in_sample())?;
    let actual = Tensor::from_rows(&test_rows.iter().map(|&t| returns.values.row(t).to_vec()).collect::<Vec<_>>())?;
    Ok(OracleFit {
        in_sample_r2,
        oos_r2: crate::evaluation::oos_r2(&actual, &predictions, train_mean)?,
        train_mean,
        test_rows,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "date,a,b\n2000-01,1.5,\n2000-02,-2,3\n2000-03,0.25,4\n";

    #[test]
    fn year_month_arithmetic() {
        let d: YearMonth = "2012-12".parse().unwrap();
        assert_eq!(d.next().to_string(), "2013-01");
        let start: YearMonth = "1957-01".parse().unwrap();
        assert_eq!(start.months_until(d) + 1, 672);
        assert!("2012-13".parse::<YearMonth>().is_err());
        assert!("12-2012".parse::<YearMonth>().is_err());
    }

    #[test]
    fn csv_parsing_and_missing_cells() {
        let p = read_panel_csv(CSV.as_bytes()).unwrap();
        assert_eq!(p.names, vec!["a", "b"]);
        assert!(p.is_missing(0, 1));
        assert!(!p.is_missing(1, 1));
        assert_eq!(p.values.get(1, 0), -2.0);
    }

    #[test]
    fn csv_errors() {
        assert!(read_panel_csv("date,a\n2000-01,x\n".as_bytes()).is_err());
        assert!(read_panel_csv("date,a\n2000-01,1\n2000-01,2\n".as_bytes()).is_err());
        assert!(read_panel_csv("date,a\n2000-02,1\n2000-01,2\n".as_bytes()).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn round_trip_at_ten_digits() {
        let p = read_panel_csv(CSV.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_panel_csv(&mut buf, &p).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "date,a,b\n2000-01,1.5,\n2000-02,-2,3\n2000-03,0.25,4\n");
        let vals = Tensor::from_rows(&[[std::f64::consts::PI, 1.0 / 3.0]]).unwrap();
        let p = Panel::new(month_range("2001-05".parse().unwrap(), 1), vec!["x".into(), "y".into()], vals).unwrap();
        let mut buf = Vec::new();
        write_panel_csv(&mut buf, &p).unwrap();
        let back = read_panel_csv(buf.as_slice()).unwrap();
        assert_eq!(back.values.get(0, 0), 3.141592654);
        assert_eq!(back.values.get(0, 1), 0.3333333333);
    }

    #[test]
    fn screen_drops_above_forty_percent() {
        let mut v = Tensor::zeros(100, 2);
        for t in 0..41 {
            v.set(t, 0, f64::NAN);
        }
        for t in 0..40 {
            v.set(t, 1, f64::NAN);
        }
        let p = Panel::new(month_range("2000-01".parse().unwrap(), 100), vec!["a".into(), "b".into()], v).unwrap();
        let s = screen(&p, MAX_MISSING_FRACTION);
        assert_eq!(s.names, vec!["b"]);
        let again = screen(&s, MAX_MISSING_FRACTION);
        assert_eq!((&again.names, &again.missing), (&s.names, &s.missing));
    }

    #[test]
    fn standardize_examples() {
        let v = Tensor::from_rows(&[[1.0, 2.0, 7.0], [2.0, 2.0, f64::NAN], [3.0, 2.0, 9.0]]).unwrap();
        let p = Panel::new(month_range("2000-01".parse().unwrap(), 3), vec!["a".into(), "c".into(), "m".into()], v).unwrap();
        let z = impute_standardize(&p, 0..3);
        assert_eq!(z.names, vec!["a", "m"]);
        let s = 1.224744871391589;
        assert!((z.values.get(0, 0) + s).abs() < 1e-12);
        assert!(z.values.get(1, 0).abs() < 1e-12);
        assert!((z.values.get(2, 0) - s).abs() < 1e-12);
        assert_eq!(z.values.get(1, 1), 0.0);
        assert!(z.values.is_finite());
    }

    #[test]
    fn standardization_has_no_look_ahead() {
        let spec = SyntheticSpec {
            months: 60,
            in_sample_len: 40,
            ..SyntheticSpec::default()
        };
        let d = generate_synthetic(&spec, 2).unwrap();
        let full = zscore_columns(&d.factors.values, &d.factors.observed(), 0..30).0;
        let cut = d.factors.select_rows(&(0..30).collect::<Vec<_>>());
        let trunc = zscore_columns(&cut.values, &cut.observed(), 0..30).0;
        assert_eq!(full.slice_rows(0, 30), trunc);
    }

    #[test]
    fn synthetic_properties() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec, 9).unwrap();
        let b = generate_synthetic(&spec, 9).unwrap();
        assert!(a.factors.missing.iter().all(|m| !m));
        assert!(a
            .returns
            .returns
            .values
            .data()
            .iter()
            .zip(b.returns.returns.values.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!((a.oracle.oos_r2 - 1.0).abs() < 1e-9, "{}", a.oracle.oos_r2);
        assert_eq!(a.oracle.test_rows.len(), 60);

        let noisy = generate_synthetic(&SyntheticSpec { missing_rate: 0.1, ..spec.clone() }, 9).unwrap();
        assert!(noisy.factors.missing.iter().any(|&m| m));
        let shuffled = generate_synthetic(&SyntheticSpec { shuffle_labels: true, ..spec }, 9).unwrap();
        assert!(shuffled.oracle.oos_r2 < 0.05);
    }

    #[test]
    fn alignment_intersects_dates() {
        let f = read_panel_csv("date,a\n2000-01,1\n2000-02,2\n2000-03,3\n".as_bytes()).unwrap();
        let r = read_panel_csv("date,s\n2000-02,0.1\n2000-03,0.2\n2000-04,0.3\n".as_bytes()).unwrap();
        let (f, r, a) = align_panels(f, r, None).unwrap();
        assert_eq!(f.rows(), 2);
        assert_eq!(r.dates()[0].to_string(), "2000-02");
        assert_eq!((a.dropped_factor_rows, a.dropped_return_rows), (1, 1));
    }
}
