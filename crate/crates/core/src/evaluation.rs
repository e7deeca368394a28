//! Forecast-quality metrics over prediction panels: pooled and per-stock MSE
//! and out-of-sample R², Diebold–Mariano comparisons and pricing-error alpha.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spread below which a sample is treated as constant, relative to its scale.
const ZERO_VARIANCE_REL: f64 = 1e-12;

fn check_shapes(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::Undefined(format!("{op} on an empty panel")));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (divisor `n-1`).
fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

fn is_constant(std: f64, xs: &[f64]) -> bool {
    let scale = xs.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    std <= ZERO_VARIANCE_REL * scale
}

/// `1 − Σ(r − r̂)² / Σ(r − r̄_train)²`, pooled over every cell.
pub fn oos_r2(actual: &Tensor, predicted: &Tensor, train_mean: f64) -> Result<f64> {
    check_shapes("oos_r2", actual, predicted)?;
    let mut sse = 0.0;
    let mut sst = 0.0;
    for (r, p) in actual.data().iter().zip(predicted.data()) {
        sse += (r - p) * (r - p);
        sst += (r - train_mean) * (r - train_mean);
    }
    if sst == 0.0 {
        return Err(Error::Undefined(
            "OOS R² denominator is zero (actuals all equal the training mean)".into(),
        ));
    }
    Ok(1.0 - sse / sst)
}

/// Pooled mean squared error over all `T·N` cells.
pub fn oos_mse(actual: &Tensor, predicted: &Tensor) -> Result<f64> {
    check_shapes("oos_mse", actual, predicted)?;
    crate::tensor::mse_loss(predicted, actual)
}

/// Per-column R² against `train_mean`; NaN where a column's denominator is zero.
pub fn per_stock_r2(actual: &Tensor, predicted: &Tensor, train_mean: f64) -> Result<Vec<f64>> {
    check_shapes("per_stock_r2", actual, predicted)?;
    Ok((0..actual.cols())
        .map(|c| {
            let mut sse = 0.0;
            let mut sst = 0.0;
            for t in 0..actual.rows() {
                let r = actual.get(t, c);
                sse += (r - predicted.get(t, c)).powi(2);
                sst += (r - train_mean).powi(2);
            }
            if sst == 0.0 {
                f64::NAN
            } else {
                1.0 - sse / sst
            }
        })
        .collect())
}

pub fn per_stock_mse(actual: &Tensor, predicted: &Tensor) -> Result<Vec<f64>> {
    check_shapes("per_stock_mse", actual, predicted)?;
    let t = actual.rows() as f64;
    Ok((0..actual.cols())
        .map(|c| {
            (0..actual.rows())
                .map(|r| (actual.get(r, c) - predicted.get(r, c)).powi(2))
                .sum::<f64>()
                / t
        })
        .collect())
}

/// `actual − predicted`, the forecast error panel.
pub fn errors(actual: &Tensor, predicted: &Tensor) -> Result<Tensor> {
    actual.sub(predicted)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmResult {
    pub statistic: f64,
    /// `(m, n)`: a negative statistic favours `m`.
    pub comparison: (String, String),
}

/// Diebold–Mariano statistic on cross-sectionally averaged absolute errors.
///
/// `d_t = mean_i(|e_m| − |e_n|)`, statistic `= mean(d) / (std(d)/√T)`.
/// Negative values mean model `m` has the smaller errors.
pub fn dm_statistic(err_m: &Tensor, err_n: &Tensor) -> Result<f64> {
    check_shapes("dm_test", err_m, err_n)?;
    let (t_len, n) = err_m.shape();
    if t_len < 2 {
        return Err(Error::Undefined("DM test needs at least two months".into()));
    }
    let d: Vec<f64> = (0..t_len)
        .map(|t| {
            err_m
                .row(t)
                .iter()
                .zip(err_n.row(t))
                .map(|(a, b)| a.abs() - b.abs())
                .sum::<f64>()
                / n as f64
        })
        .collect();
    let d_bar = mean(&d);
    let sd = sample_std(&d);
    if d_bar == 0.0 && d.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    if is_constant(sd, &d) {
        return Err(Error::Undefined(format!(
            "DM loss differential has zero variance (mean {d_bar:e})"
        )));
    }
    Ok(d_bar / (sd / (t_len as f64).sqrt()))
}

pub fn dm_test(name_m: &str, err_m: &Tensor, name_n: &str, err_n: &Tensor) -> Result<DmResult> {
    Ok(DmResult {
        statistic: dm_statistic(err_m, err_n)?,
        comparison: (name_m.to_string(), name_n.to_string()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaStat {
    pub alpha_mean: f64,
    /// `None` when the pricing errors have zero variance and a non-zero mean.
    pub t_stat: Option<f64>,
}

/// Cross-stock mean of per-stock mean pricing errors `r − r̂`, with a
/// t-statistic over the pooled `T·N` differences.
pub fn alpha_tstat(actual: &Tensor, predicted: &Tensor) -> Result<AlphaStat> {
    check_shapes("alpha_tstat", actual, predicted)?;
    let (t_len, n) = actual.shape();
    let diffs = errors(actual, predicted)?;
    let per_stock: Vec<f64> = (0..n)
        .map(|c| (0..t_len).map(|t| diffs.get(t, c)).sum::<f64>() / t_len as f64)
        .collect();
    let alpha_mean = mean(&per_stock);
    let pooled = diffs.data();
    if pooled.iter().all(|&d| d == 0.0) {
        return Ok(AlphaStat {
            alpha_mean,
            t_stat: Some(0.0),
        });
    }
    if pooled.len() < 2 {
        return Ok(AlphaStat { alpha_mean, t_stat: None });
    }
    let sd = sample_std(pooled);
    let t_stat = (!is_constant(sd, pooled)).then(|| alpha_mean / (sd / (pooled.len() as f64).sqrt()));
    Ok(AlphaStat { alpha_mean, t_stat })
}

/// One model's row of the fitness table plus the per-stock distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub avg_r2: f64,
    pub avg_mse: f64,
    pub per_stock_r2: Vec<f64>,
    pub per_stock_mse: Vec<f64>,
    pub alpha_mean: f64,
    pub alpha_t: Option<f64>,
}

pub fn evaluate(model: &str, actual: &Tensor, predicted: &Tensor, train_mean: f64) -> Result<EvalReport> {
    let alpha = alpha_tstat(actual, predicted)?;
    Ok(EvalReport {
        model: model.to_string(),
        avg_r2: oos_r2(actual, predicted, train_mean)?,
        avg_mse: oos_mse(actual, predicted)?,
        per_stock_r2: per_stock_r2(actual, predicted, train_mean)?,
        per_stock_mse: per_stock_mse(actual, predicted)?,
        alpha_mean: alpha.alpha_mean,
        alpha_t: alpha.t_stat,
    })
}

/// Lower-triangular matrix of DM statistics: `cell(r, c) = DM(model_c, model_r)` for `c < r`.
#[derive(Debug, Clone, PartialEq)]
pub struct DmMatrix {
    pub models: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

/// Every pairwise comparison; cells whose statistic is undefined hold `None`.
pub fn dm_matrix(models: &[String], errors: &[Tensor]) -> Result<DmMatrix> {
    if models.len() != errors.len() {
        return Err(Error::Config(format!(
            "{} model names for {} error panels",
            models.len(),
            errors.len()
        )));
    }
    let mut cells = vec![vec![None; models.len()]; models.len()];
    for r in 0..models.len() {
        for c in 0..r {
            cells[r][c] = match dm_statistic(&errors[c], &errors[r]) {
                Ok(s) => Some(s),
                Err(Error::Undefined(_)) => None,
                Err(e) => return Err(e),
            };
        }
    }
    Ok(DmMatrix {
        models: models.to_vec(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn r2_examples() {
        let a = t(&[&[1.0], &[3.0]]);
        assert_eq!(oos_r2(&a, &a, 2.0).unwrap(), 1.0);
        assert_eq!(oos_r2(&a, &t(&[&[2.0], &[2.0]]), 2.0).unwrap(), 0.0);
        let flat = t(&[&[2.0], &[2.0]]);
        assert!(matches!(oos_r2(&flat, &a, 2.0), Err(Error::Undefined(_))));
    }

    #[test]
    fn mse_examples() {
        let z = Tensor::zeros(2, 2);
        assert_eq!(oos_mse(&z, &z).unwrap(), 0.0);
        assert_eq!(oos_mse(&Tensor::filled(2, 3, 1.0), &Tensor::filled(2, 3, 0.0)).unwrap(), 1.0);
        let e = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(oos_mse(&e, &z).unwrap(), 7.5);
        assert!(oos_mse(&e, &Tensor::zeros(1, 2)).is_err());
    }

    #[test]
    fn dm_examples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::uniform(20, 4, 1.0, &mut rng);
        let b = Tensor::uniform(20, 4, 1.0, &mut rng);
        assert_eq!(dm_statistic(&a, &a).unwrap(), 0.0);
        let ab = dm_statistic(&a, &b).unwrap();
        let ba = dm_statistic(&b, &a).unwrap();
        assert!((ab + ba).abs() <= 1e-12);

        // |e_m| − |e_n| = c + jitter every month
        for c in [0.3, -0.3] {
            let jitter = Tensor::uniform(20, 4, 1e-3, &mut rng);
            let base = Tensor::filled(20, 4, 1.0);
            let m = base.add(&jitter).unwrap().map(|v| v + c);
            let s = dm_statistic(&m, &base).unwrap();
            assert_eq!(s.signum(), c.signum());
        }
    }

    #[test]
    fn dm_hand_computation() {
        // d = [1, 2, 3]: mean 2, sample std 1, SE 1/√3
        let m = t(&[&[1.0], &[2.0], &[3.0]]);
        let n = Tensor::zeros(3, 1);
        assert!((dm_statistic(&m, &n).unwrap() - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        let c = Tensor::filled(3, 1, 0.5);
        assert!(matches!(dm_statistic(&c, &n), Err(Error::Undefined(_))));
    }

    #[test]
    fn alpha_examples() {
        let a = t(&[&[0.1, 0.2], &[0.3, -0.1]]);
        assert_eq!(
            alpha_tstat(&a, &a).unwrap(),
            AlphaStat {
                alpha_mean: 0.0,
                t_stat: Some(0.0)
            }
        );
        let shifted = a.map(|v| v - 0.01);
        let s = alpha_tstat(&a, &shifted).unwrap();
        assert!((s.alpha_mean - 0.01).abs() < 1e-15);
        assert_eq!(s.t_stat, None);
    }

    #[test]
    fn alpha_recovers_injected_bias() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (rows, cols, bias, sigma) = (120, 30, 0.004, 0.05);
        let noise = Normal::new(0.0, sigma).unwrap();
        let actual = Tensor::uniform(rows, cols, 0.1, &mut rng);
        let mut pred = actual.clone();
        for v in pred.data_mut() {
            *v -= bias + noise.sample(&mut rng);
        }
        let s = alpha_tstat(&actual, &pred).unwrap();
        assert!((s.alpha_mean - bias).abs() <= 3.0 * sigma / ((rows * cols) as f64).sqrt());
        assert!(s.t_stat.unwrap() > 0.0);
    }

    #[test]
    fn dm_matrix_layout() {
        let e1 = t(&[&[1.0], &[2.0], &[1.5]]);
        let e2 = t(&[&[0.5], &[0.7], &[0.2]]);
        let names = vec!["A".to_string(), "B".to_string()];
        let m = dm_matrix(&names, &[e1.clone(), e2.clone()]).unwrap();
        assert_eq!(m.cells[0], vec![None, None]);
        assert_eq!(m.cells[1][0], Some(dm_statistic(&e1, &e2).unwrap()));
        assert!(m.cells[1][1].is_none());
    }

    proptest! {
        #[test]
        fn r2_at_most_one_and_invariant_to_permutation(
            vals in proptest::collection::vec(-1.0f64..1.0, 12),
            noise in proptest::collection::vec(-0.5f64..0.5, 12),
            mean in -0.2f64..0.2,
        ) {
            let a = Tensor::from_vec(4, 3, vals.clone()).unwrap();
            let p = Tensor::from_vec(4, 3, vals.iter().zip(&noise).map(|(v, n)| v + n).collect()).unwrap();
            let r2 = oos_r2(&a, &p, mean).unwrap();
            prop_assert!(r2 <= 1.0);
            let perm = [2usize, 0, 1];
            let permute = |x: &Tensor| {
                let mut out = Tensor::zeros(4, 3);
                for r in 0..4 { for (c, &src) in perm.iter().enumerate() { out.set(r, c, x.get(r, src)); } }
                out
            };
            let r2p = oos_r2(&permute(&a), &permute(&p), mean).unwrap();
            prop_assert!((r2 - r2p).abs() < 1e-12);
            let mse = oos_mse(&a, &p).unwrap();
            prop_assert!((mse - oos_mse(&permute(&a), &permute(&p)).unwrap()).abs() < 1e-15);
            let fwd = alpha_tstat(&a, &p).unwrap().alpha_mean;
            let back = alpha_tstat(&p, &a).unwrap().alpha_mean;
            prop_assert!((fwd + back).abs() < 1e-15);
        }
    }
}
