//! Python bindings. Panels cross the boundary as lists of rows
//! (`list[list[float]]`); months are `YYYY-MM` strings.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sert_core::backtest;
use sert_core::data::{generate_synthetic, SyntheticSpec, YearMonth};
use sert_core::evaluation;
use sert_core::model::{self as core_model, ModelFamily, TrainedModel, MODEL_MATRIX};
use sert_core::selftest::run_selftest;
use sert_core::tensor::Tensor;
use sert_core::training::{rolling_windows, train_for_period, AdamConfig, TrainOptions, WindowData};
use sert_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape { .. } | Error::Data(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("panel has no rows"));
    }
    Tensor::from_rows(rows).map_err(py_err)
}

/// One model configuration.
#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: core_model::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (family, n_factors, n_stocks, heads = 1, lnf = false, d_model = None, seed = 0, name = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        family: &str,
        n_factors: usize,
        n_stocks: usize,
        heads: usize,
        lnf: bool,
        d_model: Option<usize>,
        seed: u64,
        name: Option<String>,
    ) -> PyResult<Self> {
        let family: ModelFamily = family.parse().map_err(py_err)?;
        let d = d_model.unwrap_or_else(|| core_model::width_for_heads(n_stocks, heads.max(1)));
        let mut inner = core_model::ModelConfig::new(family, heads, lnf, d, n_factors, n_stocks).with_seed(seed);
        if let Some(n) = name {
            inner = inner.with_name(n);
        }
        inner.validate().map_err(py_err)?;
        Ok(PyModelConfig { inner })
    }

    /// A named row of the configuration matrix, e.g. `SERT3` or `Trans8`.
    #[staticmethod]
    #[pyo3(signature = (name, n_factors, n_stocks, d_model = None, seed = 0))]
    fn matrix_row(name: &str, n_factors: usize, n_stocks: usize, d_model: Option<usize>, seed: u64) -> PyResult<Self> {
        let row = core_model::matrix_row(name).ok_or_else(|| PyValueError::new_err(format!("unknown model `{name}`")))?;
        let inner = row
            .config(d_model.unwrap_or(n_stocks), n_factors, n_stocks)
            .with_seed(seed);
        inner.validate().map_err(py_err)?;
        Ok(PyModelConfig { inner })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }
    #[getter]
    fn family(&self) -> String {
        self.inner.family.to_string()
    }
    #[getter]
    fn heads(&self) -> usize {
        self.inner.heads
    }
    #[getter]
    fn lnf(&self) -> bool {
        self.inner.lnf
    }
    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "ModelConfig(name={:?}, family={:?}, heads={}, lnf={}, d_model={}, n_factors={}, n_stocks={})",
            c.name,
            c.family.to_string(),
            c.heads,
            c.lnf,
            c.d_model,
            c.n_factors,
            c.n_stocks
        )
    }
}

/// A built (and possibly trained) model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: TrainedModel,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(config: &PyModelConfig) -> PyResult<Self> {
        Ok(PyModel {
            inner: core_model::build_model(&config.inner).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: core_model::load_checkpoint(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        core_model::save_checkpoint(&self.inner, path).map_err(py_err)
    }

    /// One forward pass over a `T x F` factor panel. Decoder families also
    /// take the `T x N` lagged returns.
    #[pyo3(signature = (factors, lagged_returns = None))]
    fn forward(&self, factors: Vec<Vec<f64>>, lagged_returns: Option<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let x = tensor(&factors)?;
        let lagged = lagged_returns.as_deref().map(tensor).transpose()?;
        Ok(self.inner.forward(&x, lagged.as_ref()).map_err(py_err)?.to_rows())
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config.clone(),
        }
    }
}

/// Noiseless-by-default linear-factor panel with its OLS oracle fit.
#[pyfunction]
#[pyo3(signature = (seed, months = 300, factors = 10, stocks = 20, noise_sigma = 0.0, shuffle_labels = false, in_sample_len = 240))]
#[allow(clippy::too_many_arguments)]
fn synthetic<'py>(
    py: Python<'py>,
    seed: u64,
    months: usize,
    factors: usize,
    stocks: usize,
    noise_sigma: f64,
    shuffle_labels: bool,
    in_sample_len: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = SyntheticSpec {
        months,
        factors,
        stocks,
        noise_sigma,
        shuffle_labels,
        in_sample_len,
        ..SyntheticSpec::default()
    };
    let syn = generate_synthetic(&spec, seed).map_err(py_err)?;
    let d = PyDict::new(py);
    let dates: Vec<String> = syn.factors.dates.iter().map(YearMonth::to_string).collect();
    d.set_item("dates", dates)?;
    d.set_item("factors", syn.factors.values.to_rows())?;
    d.set_item("returns", syn.returns.returns.values.to_rows())?;
    d.set_item("oracle_oos_r2", syn.oracle.oos_r2)?;
    d.set_item("oracle_predictions", syn.oracle.predictions.to_rows())?;
    d.set_item("test_rows", syn.oracle.test_rows.clone())?;
    d.set_item("train_mean", syn.oracle.train_mean)?;
    Ok(d)
}

/// Rolling-window fit: predicts every month from `in_sample_len` on.
/// Returns the `(T - in_sample_len) x N` predictions.
#[pyfunction]
#[pyo3(signature = (config, factors, returns, in_sample_len, lr = 0.001, max_epochs = 500, patience = 20, pretrain_epochs = 200, context_len = None, stride = None))]
#[allow(clippy::too_many_arguments)]
fn fit_predict(
    py: Python<'_>,
    config: &PyModelConfig,
    factors: Vec<Vec<f64>>,
    returns: Vec<Vec<f64>>,
    in_sample_len: usize,
    lr: f64,
    max_epochs: usize,
    patience: usize,
    pretrain_epochs: usize,
    context_len: Option<usize>,
    stride: Option<usize>,
) -> PyResult<Vec<Vec<f64>>> {
    let x = tensor(&factors)?;
    let y = tensor(&returns)?;
    let adam = AdamConfig {
        eta: lr,
        ..AdamConfig::default()
    };
    let opts = TrainOptions {
        adam,
        pretrain_adam: adam,
        max_epochs,
        patience,
        pretrain_epochs,
        context_len,
        stride,
        ..TrainOptions::default()
    };
    let data = WindowData {
        factor_observed: vec![true; x.len()],
        return_observed: vec![true; y.len()],
        factors: x,
        returns: y,
    };
    let cfg = config.inner.clone();
    py.detach(|| {
        let splits = rolling_windows(data.returns.rows(), in_sample_len, opts.val_fraction)?;
        train_for_period(&cfg, &data, &splits, &opts)
    })
    .map(|p| p.predictions.to_rows())
    .map_err(py_err)
}

#[pyfunction]
fn oos_r2(actual: Vec<Vec<f64>>, predicted: Vec<Vec<f64>>, train_mean: f64) -> PyResult<f64> {
    evaluation::oos_r2(&tensor(&actual)?, &tensor(&predicted)?, train_mean).map_err(py_err)
}

/// DM statistic of model `a` against model `b` from their error panels.
#[pyfunction]
fn dm_statistic(errors_a: Vec<Vec<f64>>, errors_b: Vec<Vec<f64>>) -> PyResult<f64> {
    evaluation::dm_statistic(&tensor(&errors_a)?, &tensor(&errors_b)?).map_err(py_err)
}

#[pyfunction]
fn max_drawdown(wealth: Vec<f64>) -> f64 {
    backtest::max_drawdown(&wealth)
}

#[pyfunction]
fn annualized_return(returns: Vec<f64>) -> f64 {
    backtest::annualized_return(&returns)
}

/// MDD, annualized return, Sharpe, Sortino and standard deviation of a
/// monthly return series against a constant risk-free rate.
#[pyfunction]
#[pyo3(signature = (returns, rf = 0.0))]
fn strategy_metrics<'py>(py: Python<'py>, returns: Vec<f64>, rf: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = backtest::strategy_metrics(&returns, &vec![rf; returns.len()]).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("mdd", r.mdd)?;
    d.set_item("annualized_return", r.annualized_return)?;
    d.set_item("sharpe", r.sharpe)?;
    d.set_item("sortino", r.sortino)?;
    d.set_item("std", r.std)?;
    Ok(d)
}

/// Names of the configuration-matrix rows.
#[pyfunction]
fn matrix_names() -> Vec<&'static str> {
    MODEL_MATRIX.iter().map(|r| r.name).collect()
}

/// Runs the release checks; returns `(all_passed, table)`.
#[pyfunction]
fn selftest(py: Python<'_>) -> (bool, String) {
    let report = py.detach(run_selftest);
    (report.passed(), report.table())
}

#[pymodule]
fn sert(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(fit_predict, m)?)?;
    m.add_function(wrap_pyfunction!(oos_r2, m)?)?;
    m.add_function(wrap_pyfunction!(dm_statistic, m)?)?;
    m.add_function(wrap_pyfunction!(max_drawdown, m)?)?;
    m.add_function(wrap_pyfunction!(annualized_return, m)?)?;
    m.add_function(wrap_pyfunction!(strategy_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_names, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
