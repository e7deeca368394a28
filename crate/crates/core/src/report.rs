//! Text renderers for the result tables, histograms and wealth series.
//!
//! Every renderer is a pure function of its inputs, so equal inputs produce
//! byte-identical output. Lines end in `\n`; undefined statistics print `NA`.

use std::fmt::Write as _;

use crate::backtest::StrategyReport;
use crate::data::{format_sig10, YearMonth};
use crate::error::{Error, Result};
use crate::evaluation::{DmMatrix, EvalReport};

/// Two-sided critical values for the 90/95/99% significance stars.
pub const STAR_THRESHOLDS: [f64; 3] = [1.645, 1.96, 2.576];

pub const DEFAULT_HISTOGRAM_BINS: usize = 20;

const NA: &str = "NA";

pub fn stars(stat: f64) -> &'static str {
    let a = stat.abs();
    if a >= STAR_THRESHOLDS[2] {
        "***"
    } else if a >= STAR_THRESHOLDS[1] {
        "**"
    } else if a >= STAR_THRESHOLDS[0] {
        "*"
    } else {
        ""
    }
}

/// Four decimals, never printing a signed zero.
pub fn fixed4(v: f64) -> String {
    let s = format!("{v:.4}");
    if s == "-0.0000" {
        "0.0000".to_string()
    } else {
        s
    }
}

/// Four decimals with negatives written as `(abs)`.
pub fn paren4(v: f64) -> String {
    let s = fixed4(v);
    match s.strip_prefix('-') {
        Some(abs) => format!("({abs})"),
        None => s,
    }
}

/// Percent with two decimals, e.g. `-37.01%`.
pub fn percent2(v: f64) -> String {
    let s = format!("{:.2}", v * 100.0);
    if s == "-0.00" {
        "0.00%".to_string()
    } else {
        format!("{s}%")
    }
}

fn opt(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map(f).unwrap_or_else(|| NA.to_string())
}

fn check_label(label: &str) -> Result<()> {
    if label.contains([',', '\n', '\r', '"']) {
        return Err(Error::Config(format!("label `{label}` may not contain commas, quotes or newlines")));
    }
    Ok(())
}

/// `model,avg_R2,avg_MSE,alpha_mean,alpha_t` with stars on the t-statistic.
pub fn performance_table(reports: &[EvalReport]) -> Result<String> {
    let mut out = String::from("model,avg_R2,avg_MSE,alpha_mean,alpha_t\n");
    for r in reports {
        check_label(&r.model)?;
        let t = opt(r.alpha_t, |t| format!("{}{}", fixed4(t), stars(t)));
        writeln!(
            out,
            "{},{},{},{},{t}",
            r.model,
            fixed4(r.avg_r2),
            fixed4(r.avg_mse),
            fixed4(r.alpha_mean)
        )
        .expect("writing to a String");
    }
    Ok(out)
}

/// Lower-triangular DM layout: every model is a row, every model but the last
/// a column, and the cell at `(r, c)` is filled for `c < r`.
pub fn dm_table(matrix: &DmMatrix) -> Result<String> {
    let n = matrix.models.len();
    for m in &matrix.models {
        check_label(m)?;
    }
    let cols = n.saturating_sub(1);
    let mut out = String::new();
    let header: Vec<&str> = std::iter::once("")
        .chain(matrix.models[..cols].iter().map(String::as_str))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for r in 0..n {
        let mut row = vec![matrix.models[r].clone()];
        for c in 0..cols {
            row.push(if c < r {
                opt(matrix.cells[r][c], |s| format!("{}{}", paren4(s), stars(s)))
            } else {
                String::new()
            });
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

const METRIC_ROWS: [&str; 5] = ["MDD", "Annualized Return", "Sharpe", "Sortino", "Std"];

/// Metric rows by model columns. Drawdowns are printed as losses, so they
/// appear parenthesized.
pub fn strategy_table(columns: &[(String, StrategyReport)]) -> Result<String> {
    let mut out = String::from("metric");
    for (name, _) in columns {
        check_label(name)?;
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for metric in METRIC_ROWS {
        out.push_str(metric);
        for (_, r) in columns {
            out.push(',');
            out.push_str(&match metric {
                "MDD" => paren4(-r.mdd),
                "Annualized Return" => paren4(r.annualized_return),
                "Sharpe" => opt(r.sharpe, paren4),
                "Sortino" => opt(r.sortino, paren4),
                _ => paren4(r.std),
            });
        }
        out.push('\n');
    }
    Ok(out)
}

/// One benchmark row of the buy-and-hold table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub strategy: String,
    pub period: String,
    pub report: StrategyReport,
}

/// `Strategy,Period,MDD,Annualized Return,Sharpe,Sortino,Std`.
pub fn benchmark_table(rows: &[BenchmarkRow]) -> Result<String> {
    let mut out = String::from("Strategy,Period,MDD,Annualized Return,Sharpe,Sortino,Std\n");
    for row in rows {
        check_label(&row.strategy)?;
        check_label(&row.period)?;
        let r = &row.report;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.strategy,
            row.period,
            percent2(-r.mdd),
            percent2(r.annualized_return),
            opt(r.sharpe, fixed4),
            opt(r.sortino, fixed4),
            fixed4(r.std)
        )
        .expect("writing to a String");
    }
    Ok(out)
}

/// Equal-width histogram over the finite values; non-finite entries are
/// skipped. The last bin is closed on the right.
pub fn histogram(values: &[f64], bins: usize) -> Result<String> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let mut out = String::from("bin_start,bin_end,count\n");
    if finite.is_empty() {
        return Ok(out);
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        writeln!(out, "{},{},{}", format_sig10(lo), format_sig10(hi), finite.len()).expect("writing to a String");
        return Ok(out);
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in finite {
        let k = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    for (k, n) in counts.iter().enumerate() {
        let start = lo + width * k as f64;
        let end = if k + 1 == bins { hi } else { lo + width * (k + 1) as f64 };
        writeln!(out, "{},{},{n}", format_sig10(start), format_sig10(end)).expect("writing to a String");
    }
    Ok(out)
}

/// `date,wealth`, one row per entry with consecutive months from `start`.
pub fn wealth_series(start: YearMonth, wealth: &[f64]) -> String {
    let mut out = String::from("date,wealth\n");
    for (k, w) in wealth.iter().enumerate() {
        writeln!(out, "{},{}", start.add_months(k as i64), format_sig10(*w)).expect("writing to a String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(mdd: f64, ann: f64, sharpe: Option<f64>) -> StrategyReport {
        StrategyReport {
            mdd,
            annualized_return: ann,
            sharpe,
            sortino: sharpe.map(|s| s * 1.4),
            std: 0.0356,
        }
    }

    #[test]
    fn number_formats() {
        assert_eq!(fixed4(-0.00001), "0.0000");
        assert_eq!(paren4(-1.75558), "(1.7556)");
        assert_eq!(paren4(0.5), "0.5000");
        assert_eq!(percent2(-0.37011), "-37.01%");
        assert_eq!(stars(1.7), "*");
        assert_eq!(stars(-2.0), "**");
        assert_eq!(stars(21.2), "***");
        assert_eq!(stars(1.0), "");
    }

    #[test]
    fn performance_rows() {
        let r = EvalReport {
            model: "Trans1".into(),
            avg_r2: 0.026,
            avg_mse: 0.0057,
            per_stock_r2: vec![],
            per_stock_mse: vec![],
            alpha_mean: 0.0082,
            alpha_t: Some(21.2026),
        };
        let mut undefined = r.clone();
        undefined.model = "Trans2".into();
        undefined.alpha_t = None;
        assert_eq!(
            performance_table(&[r, undefined]).unwrap(),
            "model,avg_R2,avg_MSE,alpha_mean,alpha_t\n\
             Trans1,0.0260,0.0057,0.0082,21.2026***\n\
             Trans2,0.0260,0.0057,0.0082,NA\n"
        );
    }

    #[test]
    fn dm_layout() {
        let m = DmMatrix {
            models: vec!["A".into(), "B".into(), "C".into()],
            cells: vec![
                vec![None, None, None],
                vec![Some(0.8842), None, None],
                vec![Some(-1.7556), None, None],
            ],
        };
        assert_eq!(dm_table(&m).unwrap(), ",A,B\nA,,\nB,0.8842,\nC,(1.7556)*,NA\n");
    }

    #[test]
    fn strategy_and_benchmark_layouts() {
        let cols = vec![("M1".to_string(), report(0.2949, 0.0916, Some(0.2431))), ("M2".to_string(), report(0.0, -0.01, None))];
        assert_eq!(
            strategy_table(&cols).unwrap(),
            "metric,M1,M2\n\
             MDD,(0.2949),0.0000\n\
             Annualized Return,0.0916,(0.0100)\n\
             Sharpe,0.2431,NA\n\
             Sortino,0.3403,NA\n\
             Std,0.0356,0.0356\n"
        );
        let rows = vec![BenchmarkRow {
            strategy: "BHE".into(),
            period: "1911".into(),
            report: report(0.3701, 0.1139, Some(0.2588)),
        }];
        assert_eq!(
            benchmark_table(&rows).unwrap(),
            "Strategy,Period,MDD,Annualized Return,Sharpe,Sortino,Std\nBHE,1911,-37.01%,11.39%,0.2588,0.3623,0.0356\n"
        );
    }

    #[test]
    fn labels_with_commas_are_rejected() {
        let cols = vec![("a,b".to_string(), report(0.1, 0.1, None))];
        assert!(matches!(strategy_table(&cols), Err(Error::Config(_))));
    }

    #[test]
    fn histogram_counts_every_finite_value() {
        let h = histogram(&[0.0, 0.5, 1.0, f64::NAN, 0.25], 2).unwrap();
        assert_eq!(h, "bin_start,bin_end,count\n0,0.5,2\n0.5,1,2\n");
        assert_eq!(histogram(&[3.0, 3.0], 5).unwrap(), "bin_start,bin_end,count\n3,3,2\n");
        assert_eq!(histogram(&[], 5).unwrap(), "bin_start,bin_end,count\n");
        assert!(histogram(&[1.0], 0).is_err());
    }

    #[test]
    fn wealth_rows_are_dated() {
        let s = wealth_series(YearMonth::new(2012, 12).unwrap(), &[1.0, 1.01]);
        assert_eq!(s, "date,wealth\n2012-12,1\n2013-01,1.01\n");
    }
}
