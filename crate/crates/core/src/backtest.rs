//! Long-only strategies built from prediction panels, and their performance
//! statistics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Long/flat position per (month, stock). Row `t` is the position held during month `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignalPanel {
    rows: usize,
    cols: usize,
    long: Vec<bool>,
}

impl SignalPanel {
    pub fn flat(rows: usize, cols: usize) -> Self {
        SignalPanel {
            rows,
            cols,
            long: vec![false; rows * cols],
        }
    }

    pub fn all_long(rows: usize, cols: usize) -> Self {
        SignalPanel {
            rows,
            cols,
            long: vec![true; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_long(&self, t: usize, i: usize) -> bool {
        self.long[t * self.cols + i]
    }

    pub fn set(&mut self, t: usize, i: usize, long: bool) {
        self.long[t * self.cols + i] = long;
    }

    pub fn longs_at(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.cols).filter(move |&i| self.is_long(t, i))
    }

    pub fn count_at(&self, t: usize) -> usize {
        self.longs_at(t).count()
    }

    /// Months in which stock `i` is held.
    pub fn position_months(&self, i: usize) -> Vec<usize> {
        (0..self.rows).filter(|&t| self.is_long(t, i)).collect()
    }
}

/// Opens a long for month `t+1` when both the prediction and the realized
/// return of month `t` are positive; an open position is closed for month
/// `t+1` when both are non-positive. Month 0 is always flat.
pub fn sign_signal(predicted: &Tensor, actual: &Tensor) -> Result<SignalPanel> {
    if predicted.shape() != actual.shape() {
        return Err(Error::shape("sign_signal", predicted.shape(), actual.shape()));
    }
    let (rows, cols) = actual.shape();
    let mut signals = SignalPanel::flat(rows, cols);
    for i in 0..cols {
        let mut long = false;
        for t in 0..rows.saturating_sub(1) {
            let (p, r) = (predicted.get(t, i), actual.get(t, i));
            if p > 0.0 && r > 0.0 {
                long = true;
            } else if p <= 0.0 && r <= 0.0 {
                long = false;
            }
            signals.set(t + 1, i, long);
        }
    }
    Ok(signals)
}

/// Which stocks the monthly softmax ranking runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterScope {
    /// Rank the currently long stocks and keep `⌈k·L⌉` of them.
    #[default]
    Longs,
    /// Rank all stocks and keep the longs that fall in the top `⌈k·N⌉`.
    All,
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Top `keep` of `candidates` by descending probability; ties go to the lower index.
fn top_by_probability(candidates: &[usize], probs: &[f64], keep: usize) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order
}

/// Keeps the highest-probability share of long signals each month.
///
/// Holdings of month `t` are ranked by a softmax over the predictions of month
/// `t-1`, the latest available when the position is taken.
pub fn softmax_filter(
    signals: &SignalPanel,
    predicted: &Tensor,
    keep_fraction: f64,
    scope: FilterScope,
) -> Result<SignalPanel> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!("keep_fraction {keep_fraction} outside (0, 1]")));
    }
    if signals.shape() != predicted.shape() {
        return Err(Error::shape("softmax_filter", signals.shape(), predicted.shape()));
    }
    let (rows, cols) = signals.shape();
    let mut out = SignalPanel::flat(rows, cols);
    for t in 1..rows {
        let longs: Vec<usize> = signals.longs_at(t).collect();
        if longs.is_empty() {
            continue;
        }
        let kept = match scope {
            FilterScope::Longs => {
                let preds: Vec<f64> = longs.iter().map(|&i| predicted.get(t - 1, i)).collect();
                let local = softmax(&preds);
                let mut probs = vec![0.0; cols];
                for (&i, p) in longs.iter().zip(local) {
                    probs[i] = p;
                }
                let keep = (keep_fraction * longs.len() as f64).ceil() as usize;
                top_by_probability(&longs, &probs, keep)
            }
            FilterScope::All => {
                let probs = softmax(predicted.row(t - 1));
                let all: Vec<usize> = (0..cols).collect();
                let keep = (keep_fraction * cols as f64).ceil() as usize;
                top_by_probability(&all, &probs, keep)
                    .into_iter()
                    .filter(|&i| signals.is_long(t, i))
                    .collect()
            }
        };
        for i in kept {
            out.set(t, i, true);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Equal,
    Value,
}

impl Weighting {
    pub fn label(self) -> &'static str {
        match self {
            Weighting::Equal => "EW",
            Weighting::Value => "VW",
        }
    }
}

/// Monthly portfolio returns and the wealth index `Π(1 + r)` after each month.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioSeries {
    pub weighting: Weighting,
    pub returns: Vec<f64>,
    pub wealth: Vec<f64>,
}

/// Weights of the active stocks each month; rows of flat months are all zero.
///
/// `prior_caps` row `t` holds the market caps at the end of month `t-1`.
pub fn portfolio_weights(signals: &SignalPanel, weighting: Weighting, prior_caps: Option<&Tensor>) -> Result<Tensor> {
    let (rows, cols) = signals.shape();
    let caps = match (weighting, prior_caps) {
        (Weighting::Value, None) => {
            return Err(Error::Config("value weighting needs a market-cap panel".into()));
        }
        (Weighting::Value, Some(c)) if c.shape() != (rows, cols) => {
            return Err(Error::shape("portfolio_weights(caps)", c.shape(), (rows, cols)));
        }
        (Weighting::Value, Some(c)) => Some(c),
        (Weighting::Equal, _) => None,
    };
    let mut w = Tensor::zeros(rows, cols);
    for t in 0..rows {
        let active: Vec<usize> = signals.longs_at(t).collect();
        if active.is_empty() {
            continue;
        }
        match caps {
            None => {
                let share = 1.0 / active.len() as f64;
                for &i in &active {
                    w.set(t, i, share);
                }
            }
            Some(c) => {
                let mut total = 0.0;
                for &i in &active {
                    let cap = c.get(t, i);
                    if !cap.is_finite() || cap < 0.0 {
                        return Err(Error::Data(format!("missing or invalid market cap at month {t}, stock {i}")));
                    }
                    total += cap;
                }
                if total <= 0.0 {
                    return Err(Error::Data(format!("active stocks at month {t} have zero total market cap")));
                }
                for &i in &active {
                    w.set(t, i, c.get(t, i) / total);
                }
            }
        }
    }
    Ok(w)
}

fn wealth_index(returns: &[f64]) -> Vec<f64> {
    returns
        .iter()
        .scan(1.0, |c, r| {
            *c *= 1.0 + r;
            Some(*c)
        })
        .collect()
}

pub fn portfolio_returns(
    signals: &SignalPanel,
    actual: &Tensor,
    weighting: Weighting,
    prior_caps: Option<&Tensor>,
) -> Result<PortfolioSeries> {
    if signals.shape() != actual.shape() {
        return Err(Error::shape("portfolio_returns", signals.shape(), actual.shape()));
    }
    let w = portfolio_weights(signals, weighting, prior_caps)?;
    let returns: Vec<f64> = (0..actual.rows())
        .map(|t| {
            signals
                .longs_at(t)
                .map(|i| w.get(t, i) * actual.get(t, i))
                .sum::<f64>()
        })
        .collect();
    Ok(PortfolioSeries {
        weighting,
        wealth: wealth_index(&returns),
        returns,
    })
}

/// Every stock held every month.
pub fn buy_and_hold(actual: &Tensor, weighting: Weighting, prior_caps: Option<&Tensor>) -> Result<PortfolioSeries> {
    let (rows, cols) = actual.shape();
    portfolio_returns(&SignalPanel::all_long(rows, cols), actual, weighting, prior_caps)
}

/// Standard deviations below this multiple of the largest return count as zero.
const ZERO_SPREAD_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyReport {
    pub mdd: f64,
    pub annualized_return: f64,
    /// `None` when the return standard deviation is zero.
    pub sharpe: Option<f64>,
    /// `None` when the downside deviation is zero.
    pub sortino: Option<f64>,
    pub std: f64,
}

/// Largest peak-to-trough decline `(peak − c) / peak` along a wealth path.
pub fn max_drawdown(wealth: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut mdd = 0.0f64;
    for &c in wealth {
        peak = peak.max(c);
        if peak > 0.0 {
            mdd = mdd.max((peak - c) / peak);
        }
    }
    mdd
}

/// `(Π(1 + r))^(12/n) − 1`.
pub fn annualized_return(returns: &[f64]) -> f64 {
    let growth: f64 = returns.iter().map(|r| 1.0 + r).product();
    growth.powf(12.0 / returns.len() as f64) - 1.0
}

/// Sample standard deviation, divisor `n-1`.
pub fn return_std(returns: &[f64]) -> f64 {
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    (returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Root mean square of the shortfall below zero, divisor `n-1` over all months.
pub fn downside_std(returns: &[f64]) -> f64 {
    let n = returns.len() as f64;
    (returns.iter().map(|r| r.min(0.0).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Monthly (non-annualized) statistics. `rf` may be empty, meaning zero.
pub fn strategy_metrics(returns: &[f64], rf: &[f64]) -> Result<StrategyReport> {
    if returns.len() < 2 {
        return Err(Error::Undefined("strategy statistics need at least two months".into()));
    }
    if !rf.is_empty() && rf.len() != returns.len() {
        return Err(Error::shape("strategy_metrics(rf)", (returns.len(), 1), (rf.len(), 1)));
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let rf_mean = if rf.is_empty() { 0.0 } else { rf.iter().sum::<f64>() / n };
    let excess = mean - rf_mean;
    let std = return_std(returns);
    let down = downside_std(returns);
    let scale = returns.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    let mut wealth = vec![1.0];
    wealth.extend(wealth_index(returns));
    Ok(StrategyReport {
        mdd: max_drawdown(&wealth),
        annualized_return: annualized_return(returns),
        sharpe: (std > ZERO_SPREAD_REL * scale).then(|| excess / std),
        sortino: (down > 0.0).then(|| excess / down),
        std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(vals: &[f64]) -> Tensor {
        Tensor::from_vec(vals.len(), 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn sign_rule_hand_trace() {
        let p = col(&[1.0, 1.0, -1.0, -1.0]);
        let r = col(&[1.0, -1.0, -1.0, 1.0]);
        assert_eq!(sign_signal(&p, &r).unwrap().position_months(0), vec![1, 2]);
    }

    #[test]
    fn sign_rule_extremes() {
        let pos = Tensor::filled(5, 2, 0.1);
        let s = sign_signal(&pos, &pos).unwrap();
        assert!((0..2).all(|i| s.position_months(i) == vec![1, 2, 3, 4]));
        let neg = Tensor::filled(5, 2, -0.1);
        let s = sign_signal(&neg, &neg).unwrap();
        assert_eq!(s.count_at(4), 0);
        // zero counts as non-positive: never opens
        let z = Tensor::zeros(3, 1);
        assert!(sign_signal(&z, &pos.slice_rows(0, 3).slice_cols(0, 1)).unwrap().position_months(0).is_empty());
    }

    #[test]
    fn filter_examples() {
        let signals = SignalPanel::all_long(2, 4);
        let preds = Tensor::from_rows(&[[0.4, 0.1, 0.3, 0.2], [0.0; 4]]).unwrap();
        let f = softmax_filter(&signals, &preds, 0.5, FilterScope::Longs).unwrap();
        assert_eq!(f.longs_at(1).collect::<Vec<_>>(), vec![0, 2]);

        let equal = Tensor::filled(2, 5, 0.01);
        let s = SignalPanel::all_long(2, 5);
        let f = softmax_filter(&s, &equal, 0.5, FilterScope::Longs).unwrap();
        assert_eq!(f.longs_at(1).collect::<Vec<_>>(), vec![0, 1, 2]);

        let mut spike = Tensor::zeros(2, 5);
        spike.set(0, 3, 50.0);
        let f = softmax_filter(&s, &spike, 0.2, FilterScope::Longs).unwrap();
        assert_eq!(f.longs_at(1).collect::<Vec<_>>(), vec![3]);
        assert!(softmax_filter(&s, &spike, 0.0, FilterScope::Longs).is_err());
    }

    #[test]
    fn filter_over_all_stocks() {
        let mut signals = SignalPanel::flat(2, 4);
        signals.set(1, 1, true);
        signals.set(1, 2, true);
        let preds = Tensor::from_rows(&[[0.4, 0.1, 0.3, 0.2], [0.0; 4]]).unwrap();
        let f = softmax_filter(&signals, &preds, 0.5, FilterScope::All).unwrap();
        assert_eq!(f.longs_at(1).collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn portfolio_examples() {
        let r = Tensor::from_rows(&[[0.02, 0.04]]).unwrap();
        let s = SignalPanel::all_long(1, 2);
        assert!((portfolio_returns(&s, &r, Weighting::Equal, None).unwrap().returns[0] - 0.03).abs() < 1e-15);
        let mut one = SignalPanel::flat(1, 2);
        one.set(0, 1, true);
        assert_eq!(portfolio_returns(&one, &r, Weighting::Equal, None).unwrap().returns[0], 0.04);
        let caps = Tensor::filled(1, 2, 7.0);
        let vw = portfolio_returns(&s, &r, Weighting::Value, Some(&caps)).unwrap();
        let ew = portfolio_returns(&s, &r, Weighting::Equal, None).unwrap();
        assert_eq!(vw.returns, ew.returns);
        assert!(portfolio_returns(&s, &r, Weighting::Value, None).is_err());
        let flat = portfolio_returns(&SignalPanel::flat(1, 2), &r, Weighting::Equal, None).unwrap();
        assert_eq!(flat.returns, vec![0.0]);
    }

    #[test]
    fn buy_and_hold_examples() {
        let r = col(&[0.01, -0.02, 0.03]);
        assert_eq!(buy_and_hold(&r, Weighting::Equal, None).unwrap().returns, vec![0.01, -0.02, 0.03]);
        let c = Tensor::filled(6, 3, 0.01);
        assert!(buy_and_hold(&c, Weighting::Equal, None)
            .unwrap()
            .returns
            .iter()
            .all(|&x| (x - 0.01).abs() < 1e-15));
    }

    #[test]
    fn metric_examples() {
        assert!((annualized_return(&[0.01; 12]) - 0.126825).abs() < 1e-6);
        assert!((annualized_return(&[0.01; 12]) - (1.01f64.powi(12) - 1.0)).abs() < 1e-12);
        assert_eq!(max_drawdown(&[1.0, 2.0, 1.0]), 0.5);
        assert_eq!(max_drawdown(&[1.0, 1.1, 1.1, 1.3]), 0.0);
        let rf = [0.01, 0.02, 0.005];
        assert_eq!(strategy_metrics(&rf, &rf).unwrap().sharpe, Some(0.0));
        let m = strategy_metrics(&[0.01; 12], &[]).unwrap();
        assert_eq!(m.sharpe, None);
        assert_eq!(m.sortino, None);
        assert!(strategy_metrics(&[0.01], &[]).is_err());
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_filter_is_subset(
            vals in proptest::collection::vec(-0.1f64..0.1, 24),
            preds in proptest::collection::vec(-0.1f64..0.1, 24),
            caps in proptest::collection::vec(0.1f64..10.0, 24),
            keep in 0.05f64..1.0,
        ) {
            let r = Tensor::from_vec(6, 4, vals).unwrap();
            let p = Tensor::from_vec(6, 4, preds).unwrap();
            let c = Tensor::from_vec(6, 4, caps).unwrap();
            let s = sign_signal(&p, &r).unwrap();
            let f = softmax_filter(&s, &p, keep, FilterScope::Longs).unwrap();
            for t in 0..6 {
                prop_assert!(f.longs_at(t).all(|i| s.is_long(t, i)));
                let expected = (keep * s.count_at(t) as f64).ceil() as usize;
                prop_assert_eq!(f.count_at(t), expected);
            }
            for (sig, weighting) in [(&s, Weighting::Equal), (&f, Weighting::Value)] {
                let w = portfolio_weights(sig, weighting, Some(&c)).unwrap();
                for t in 0..6 {
                    let total: f64 = w.row(t).iter().sum();
                    prop_assert!(w.row(t).iter().all(|&x| x >= 0.0));
                    if sig.count_at(t) > 0 {
                        prop_assert!((total - 1.0).abs() <= 1e-12);
                    } else {
                        prop_assert_eq!(total, 0.0);
                    }
                }
            }
            let bh = buy_and_hold(&r, Weighting::Value, Some(&c)).unwrap();
            let all = portfolio_returns(&SignalPanel::all_long(6, 4), &r, Weighting::Value, Some(&c)).unwrap();
            prop_assert_eq!(bh, all);
        }

        #[test]
        fn drawdown_bounds_and_scale_invariance(
            rets in proptest::collection::vec(-0.5f64..0.5, 2..40),
            scale in 0.1f64..100.0,
        ) {
            let mut w = vec![1.0];
            w.extend(wealth_index(&rets));
            let mdd = max_drawdown(&w);
            prop_assert!((0.0..1.0).contains(&mdd));
            let scaled: Vec<f64> = w.iter().map(|x| x * scale).collect();
            prop_assert!((max_drawdown(&scaled) - mdd).abs() < 1e-12);
        }
    }
}
