//! Dense row-major 2-D tensors with hand-written backward passes.
//!
//! Every differentiable op comes as a forward function plus a matching
//! `*_backward` that maps the upstream gradient to input gradients. There is
//! no tape: layers keep whatever the backward pass needs and call these
//! functions in reverse order themselves.
//!
//! Reductions always run left to right over the contracted index, so results
//! are bit-reproducible for a fixed input.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &(self.rows, self.cols))
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("from_vec", (rows, cols), (data.len(), 1)));
        }
        Ok(Tensor {
            rows,
            cols,
            data,
            grad: None,
        })
    }

    /// Builds a tensor from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("from_rows", (rows.len(), cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Tensor {
            rows,
            cols,
            data,
            grad: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated (zeroed) on first access.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, delta: &Tensor) -> Result<()> {
        if delta.shape() != self.shape() {
            return Err(Error::shape("accumulate_grad", self.shape(), delta.shape()));
        }
        let g = self.grad_mut();
        for (gi, di) in g.iter_mut().zip(&delta.data) {
            *gi += di;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
            grad: None,
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            grad: None,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_assign", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a `1 × cols` row vector to every row.
    pub fn add_row_vector(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape("add_row_vector", self.shape(), bias.shape()));
        }
        let mut out = self.clone();
        out.grad = None;
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Column sums as a `1 × cols` tensor (the bias gradient of a row-broadcast add).
    pub fn sum_rows(&self) -> Tensor {
        let mut out = Tensor::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, x) in out.data.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Copy of columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let width = end - start;
        let mut out = Tensor::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        Tensor {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
            grad: None,
        }
    }

    /// Horizontal concatenation of equally tall tensors.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let rows = parts.first().map_or(0, |p| p.rows);
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            if p.rows != rows {
                return Err(Error::shape("concat_cols", (rows, cols), p.shape()));
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + p.cols].copy_from_slice(p.row(r));
            }
            offset += p.cols;
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Differentiable ops
// ---------------------------------------------------------------------------

/// `C = A·B`, summing over the inner index in increasing order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = Tensor::zeros(m, n);
    for i in 0..m {
        let crow = &mut c.data[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (cij, bpj) in crow.iter_mut().zip(brow) {
                *cij += aip * bpj;
            }
        }
    }
    Ok(c)
}

/// Returns `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    if dc.shape() != (a.rows, b.cols) {
        return Err(Error::shape("matmul_backward", (a.rows, b.cols), dc.shape()));
    }
    let da = matmul(dc, &b.transpose())?;
    let db = matmul(&a.transpose(), dc)?;
    Ok((da, db))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes `dy` where the forward input was strictly positive; zero at and below 0.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.zip_with(dy, "relu_backward", |xv, g| if xv > 0.0 { g } else { 0.0 })
}

/// Row-wise softmax of `S + M` where `M` holds `0` or `-inf`.
///
/// Masked cells come out as exactly `0.0`, which keeps masked positions from
/// contributing anything (not even rounding noise) to downstream sums.
pub fn masked_softmax(scores: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if scores.shape() != mask.shape() {
        return Err(Error::shape("masked_softmax", scores.shape(), mask.shape()));
    }
    let mut out = Tensor::zeros(scores.rows, scores.cols);
    for r in 0..scores.rows {
        let s = scores.row(r);
        let m = mask.row(r);
        let mut max = f64::NEG_INFINITY;
        for (&sv, &mv) in s.iter().zip(m) {
            if mv == 0.0 && sv > max {
                max = sv;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: r });
        }
        let orow = out.row_mut(r);
        let mut total = 0.0;
        for ((o, &sv), &mv) in orow.iter_mut().zip(s).zip(m) {
            if mv == 0.0 {
                *o = (sv - max).exp();
                total += *o;
            }
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Ok(out)
}

/// Softmax Jacobian-vector product: `dS_ij = A_ij (dA_ij − Σ_k dA_ik A_ik)`.
pub fn softmax_backward(a: &Tensor, da: &Tensor) -> Result<Tensor> {
    if a.shape() != da.shape() {
        return Err(Error::shape("softmax_backward", a.shape(), da.shape()));
    }
    let mut ds = Tensor::zeros(a.rows, a.cols);
    for r in 0..a.rows {
        let arow = a.row(r);
        let grow = da.row(r);
        let dot: f64 = arow.iter().zip(grow).map(|(x, y)| x * y).sum();
        for ((d, &av), &gv) in ds.row_mut(r).iter_mut().zip(arow).zip(grow) {
            *d = av * (gv - dot);
        }
    }
    Ok(ds)
}

/// What `layer_norm_backward` needs from the forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub gamma: Tensor,
}

/// Row-wise layer normalization with biased (divisor `d`) variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, epsilon: f64) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols;
    if gamma.shape() != (1, d) || beta.shape() != (1, d) {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let mut normalized = Tensor::zeros(x.rows, d);
    let mut y = Tensor::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + epsilon).sqrt();
        inv_std.push(is);
        for c in 0..d {
            let xh = (row[c] - mean) * is;
            normalized.data[r * d + c] = xh;
            y.data[r * d + c] = gamma.data[c] * xh + beta.data[c];
        }
    }
    Ok((
        y,
        LayerNormCache {
            normalized,
            inv_std,
            gamma: gamma.clone(),
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(cache: &LayerNormCache, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let xh = &cache.normalized;
    if dy.shape() != xh.shape() {
        return Err(Error::shape("layer_norm_backward", xh.shape(), dy.shape()));
    }
    let d = xh.cols;
    let mut dx = Tensor::zeros(xh.rows, d);
    let dgamma = dy.hadamard(xh)?.sum_rows();
    let dbeta = dy.sum_rows();
    for r in 0..xh.rows {
        let dxh: Vec<f64> = dy
            .row(r)
            .iter()
            .zip(&cache.gamma.data)
            .map(|(g, gm)| g * gm)
            .collect();
        let xr = xh.row(r);
        let sum_dxh: f64 = dxh.iter().sum();
        let sum_dxh_xh: f64 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum();
        let scale = cache.inv_std[r] / d as f64;
        for c in 0..d {
            dx.data[r * d + c] = scale * (d as f64 * dxh[c] - sum_dxh - xr[c] * sum_dxh_xh);
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Mean squared error over all `T·N` cells.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse_loss", pred.shape(), target.shape()));
    }
    let n = pred.len() as f64;
    Ok(pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// `d pred = 2 (pred − target) / (T·N)`.
pub fn mse_loss_backward(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let n = pred.len() as f64;
    pred.zip_with(target, "mse_loss_backward", |p, t| 2.0 * (p - t) / n)
}

/// MSE over the cells where `mask` is true; the divisor is the observed count.
///
/// Returns the loss and its gradient with respect to `pred` (zero on unobserved cells).
pub fn masked_mse(pred: &Tensor, target: &Tensor, observed: &[bool]) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() || observed.len() != pred.len() {
        return Err(Error::shape("masked_mse", pred.shape(), target.shape()));
    }
    let count = observed.iter().filter(|&&o| o).count();
    let mut grad = Tensor::zeros(pred.rows, pred.cols);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let n = count as f64;
    let mut loss = 0.0;
    for i in 0..pred.len() {
        if observed[i] {
            let e = pred.data[i] - target.data[i];
            loss += e * e;
            grad.data[i] = 2.0 * e / n;
        }
    }
    Ok((loss / n, grad))
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Adam first/second moments and step counter for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
    pub adam: AdamState,
}

/// Named parameters in insertion order, each with its own Adam slot.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let adam = AdamState::new(value.len());
        self.params.push(Param {
            name,
            value,
            frozen: false,
            adam,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn accumulate(&mut self, id: ParamId, delta: &Tensor) -> Result<()> {
        self.params[id.0].value.accumulate_grad(delta)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Parameter values only (no gradients or optimizer state).
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.value.data().to_vec()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            p.value.data_mut().copy_from_slice(s);
        }
    }

    /// Copies of the current gradients, zeros where none were accumulated.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|p| p.value.grad().map_or_else(|| vec![0.0; p.value.len()], <[f64]>::to_vec))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

/// Absolute differences below this count as agreement regardless of scale.
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub per_param: Vec<(String, f64)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= GRAD_CHECK_ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `f` must zero the gradients, run forward and backward, and return the loss.
/// Its gradient output is only read after the first call; the perturbed calls
/// use the loss value alone.
pub fn grad_check<F>(params: &mut ParamStore, epsilon: f64, tolerance: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    f(params)?;
    let analytic = params.grads();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_param: Vec::with_capacity(params.len()),
        checked: 0,
        tolerance,
    };
    for pi in 0..params.len() {
        let id = ParamId(pi);
        let name = params.param(id).name.clone();
        let mut worst_here = 0.0_f64;
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + epsilon;
            let plus = f(params)?;
            params.get_mut(id).data_mut()[k] = orig - epsilon;
            let minus = f(params)?;
            params.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(analytic[pi][k], numeric);
            report.checked += 1;
            worst_here = worst_here.max(err);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), k));
            }
        }
        report.per_param.push((name, worst_here));
    }
    // leave the store holding the unperturbed analytic gradients
    f(params)?;
    Ok(report)
}
