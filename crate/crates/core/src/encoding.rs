//! Linear embedding of factor panels and the fixed sinusoidal position table.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_backward, Tensor};

/// `T × d_model` table of sin/cos position codes.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    table: Tensor,
}

impl PositionalEncoding {
    /// `PE[pos][2i] = sin(pos / 10000^(2i/d))`, `PE[pos][2i+1] = cos(...)` with the same angle.
    pub fn new(seq_len: usize, d_model: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Config("positional encoding needs at least one position".into()));
        }
        if d_model < 2 || !d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_model must be even and >= 2 to pair sin/cos channels, got {d_model}"
            )));
        }
        let mut table = Tensor::zeros(seq_len, d_model);
        for pos in 0..seq_len {
            for i in 0..d_model / 2 {
                let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d_model as f64);
                table.set(pos, 2 * i, angle.sin());
                table.set(pos, 2 * i + 1, angle.cos());
            }
        }
        Ok(PositionalEncoding { table })
    }

    pub fn seq_len(&self) -> usize {
        self.table.rows()
    }

    pub fn d_model(&self) -> usize {
        self.table.cols()
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }
}

/// Shorthand for [`PositionalEncoding::new`].
pub fn sinusoidal_pe(seq_len: usize, d_model: usize) -> Result<PositionalEncoding> {
    PositionalEncoding::new(seq_len, d_model)
}

/// `X · W_em`, one embedded row per month.
pub fn linear_embed(x: &Tensor, w_em: &Tensor) -> Result<Tensor> {
    if x.cols() != w_em.rows() {
        return Err(Error::shape("linear_embed", x.shape(), w_em.shape()));
    }
    matmul(x, w_em)
}

/// Returns `(dX, dW_em)`.
pub fn linear_embed_backward(x: &Tensor, w_em: &Tensor, d_out: &Tensor) -> Result<(Tensor, Tensor)> {
    matmul_backward(x, w_em, d_out)
}

/// Adds position codes to the embedded sequence (sum, not concatenation).
pub fn add_pe(x_emb: &Tensor, pe: &PositionalEncoding) -> Result<Tensor> {
    if x_emb.shape() != pe.table.shape() {
        return Err(Error::shape("add_pe", x_emb.shape(), pe.table.shape()));
    }
    x_emb.add(&pe.table)
}
