//! Causally masked scaled dot-product attention: single head, multi-head and
//! encoder-decoder cross-attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{masked_softmax, matmul, softmax_backward, ParamId, ParamStore, Tensor};

/// Additive attention mask with entries `0` (visible) or `-inf` (hidden).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    entries: Tensor,
}

impl MaskMatrix {
    /// Query row `i` sees keys `j <= i`; the strict upper triangle is `-inf`.
    pub fn causal(seq_len: usize) -> Self {
        let mut entries = Tensor::zeros(seq_len, seq_len);
        for i in 0..seq_len {
            for j in i + 1..seq_len {
                entries.set(i, j, f64::NEG_INFINITY);
            }
        }
        MaskMatrix { entries }
    }

    /// Every key visible to every query.
    pub fn unmasked(seq_len: usize) -> Self {
        MaskMatrix {
            entries: Tensor::zeros(seq_len, seq_len),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn masked_count(&self) -> usize {
        self.entries.data().iter().filter(|v| v.is_infinite()).count()
    }
}

pub fn causal_mask(seq_len: usize) -> MaskMatrix {
    MaskMatrix::causal(seq_len)
}

/// Which width the attention logits are divided by (after the square root).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleMode {
    /// √(key width of the head), i.e. √d_k.
    #[default]
    HeadWidth,
    /// √d_model regardless of head count.
    ModelWidth,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub weights: Tensor,
    pub divisor: f64,
}

/// `softmax(QKᵀ/√width + M)·V`, scaled by the width of `Q`.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &MaskMatrix) -> Result<Tensor> {
    let divisor = (q.cols() as f64).sqrt();
    Ok(masked_attention_scaled(q, k, v, mask, divisor)?.0)
}

pub fn masked_attention_scaled(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &MaskMatrix,
    divisor: f64,
) -> Result<(Tensor, AttentionCache)> {
    if q.cols() != k.cols() {
        return Err(Error::shape("masked_attention(Q,K)", q.shape(), k.shape()));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape("masked_attention(K,V)", k.shape(), v.shape()));
    }
    if mask.entries.shape() != (q.rows(), k.rows()) {
        return Err(Error::shape("masked_attention(mask)", (q.rows(), k.rows()), mask.entries.shape()));
    }
    let scores = matmul(q, &k.transpose())?.scale(1.0 / divisor);
    let weights = masked_softmax(&scores, &mask.entries)?;
    let out = matmul(&weights, v)?;
    Ok((
        out,
        AttentionCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            weights,
            divisor,
        },
    ))
}

/// Returns `(dQ, dK, dV)`.
pub fn masked_attention_backward(cache: &AttentionCache, d_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let dv = matmul(&cache.weights.transpose(), d_out)?;
    let d_weights = matmul(d_out, &cache.v.transpose())?;
    let d_scores = softmax_backward(&cache.weights, &d_weights)?.scale(1.0 / cache.divisor);
    let dq = matmul(&d_scores, &cache.k)?;
    let dk = matmul(&d_scores.transpose(), &cache.q)?;
    Ok((dq, dk, dv))
}

/// Multi-head attention weights, stored per head, plus the output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub scale: ScaleMode,
    pub w_q: Vec<ParamId>,
    pub w_k: Vec<ParamId>,
    pub w_v: Vec<ParamId>,
    pub w_o: ParamId,
}

#[derive(Debug, Clone)]
pub struct MultiHeadCache {
    x_q: Tensor,
    x_kv: Tensor,
    heads: Vec<AttentionCache>,
    concat: Tensor,
}

impl MultiHeadCache {
    /// Attention weights of each head, in head order.
    pub fn weights(&self) -> impl Iterator<Item = &Tensor> {
        self.heads.iter().map(|h| &h.weights)
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        scale: ScaleMode,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by head count {heads}"
            )));
        }
        let d_k = d_model / heads;
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut w_q = Vec::with_capacity(heads);
        let mut w_k = Vec::with_capacity(heads);
        let mut w_v = Vec::with_capacity(heads);
        for h in 0..heads {
            w_q.push(store.add(format!("{prefix}.w_q.{h}"), Tensor::uniform(d_model, d_k, bound, rng)));
            w_k.push(store.add(format!("{prefix}.w_k.{h}"), Tensor::uniform(d_model, d_k, bound, rng)));
            w_v.push(store.add(format!("{prefix}.w_v.{h}"), Tensor::uniform(d_model, d_k, bound, rng)));
        }
        let w_o = store.add(format!("{prefix}.w_o"), Tensor::uniform(heads * d_k, d_model, bound, rng));
        Ok(MultiHeadAttention {
            heads,
            d_model,
            d_k,
            scale,
            w_q,
            w_k,
            w_v,
            w_o,
        })
    }

    fn divisor(&self) -> f64 {
        match self.scale {
            ScaleMode::HeadWidth => (self.d_k as f64).sqrt(),
            ScaleMode::ModelWidth => (self.d_model as f64).sqrt(),
        }
    }

    /// Queries from `x_q`, keys and values from `x_kv`.
    pub fn forward(
        &self,
        store: &ParamStore,
        x_q: &Tensor,
        x_kv: &Tensor,
        mask: &MaskMatrix,
    ) -> Result<(Tensor, MultiHeadCache)> {
        if x_q.cols() != self.d_model {
            return Err(Error::shape("multi_head_attention", x_q.shape(), (x_q.rows(), self.d_model)));
        }
        if x_kv.cols() != self.d_model {
            return Err(Error::shape("multi_head_attention", x_kv.shape(), (x_kv.rows(), self.d_model)));
        }
        let divisor = self.divisor();
        let mut head_caches = Vec::with_capacity(self.heads);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = matmul(x_q, store.get(self.w_q[h]))?;
            let k = matmul(x_kv, store.get(self.w_k[h]))?;
            let v = matmul(x_kv, store.get(self.w_v[h]))?;
            let (o, cache) = masked_attention_scaled(&q, &k, &v, mask, divisor)?;
            outs.push(o);
            head_caches.push(cache);
        }
        let concat = Tensor::concat_cols(&outs)?;
        let out = matmul(&concat, store.get(self.w_o))?;
        Ok((
            out,
            MultiHeadCache {
                x_q: x_q.clone(),
                x_kv: x_kv.clone(),
                heads: head_caches,
                concat,
            },
        ))
    }

    /// Accumulates parameter gradients; returns `(dX_q, dX_kv)`.
    pub fn backward(&self, store: &mut ParamStore, cache: &MultiHeadCache, d_out: &Tensor) -> Result<(Tensor, Tensor)> {
        let d_wo = matmul(&cache.concat.transpose(), d_out)?;
        let d_concat = matmul(d_out, &store.get(self.w_o).transpose())?;
        store.accumulate(self.w_o, &d_wo)?;
        let mut dx_q = Tensor::zeros(cache.x_q.rows(), self.d_model);
        let mut dx_kv = Tensor::zeros(cache.x_kv.rows(), self.d_model);
        let xq_t = cache.x_q.transpose();
        let xkv_t = cache.x_kv.transpose();
        for h in 0..self.heads {
            let d_o = d_concat.slice_cols(h * self.d_k, (h + 1) * self.d_k);
            let (dq, dk, dv) = masked_attention_backward(&cache.heads[h], &d_o)?;
            store.accumulate(self.w_q[h], &matmul(&xq_t, &dq)?)?;
            store.accumulate(self.w_k[h], &matmul(&xkv_t, &dk)?)?;
            store.accumulate(self.w_v[h], &matmul(&xkv_t, &dv)?)?;
            dx_q.add_assign(&matmul(&dq, &store.get(self.w_q[h]).transpose())?)?;
            dx_kv.add_assign(&matmul(&dk, &store.get(self.w_k[h]).transpose())?)?;
            dx_kv.add_assign(&matmul(&dv, &store.get(self.w_v[h]).transpose())?)?;
        }
        Ok((dx_q, dx_kv))
    }

    /// Masked multi-head self-attention over `x`.
    pub fn self_attention(&self, store: &ParamStore, x: &Tensor, mask: &MaskMatrix) -> Result<Tensor> {
        Ok(self.forward(store, x, x, mask)?.0)
    }

    /// Queries from the decoder stream, keys/values from the encoder output.
    pub fn cross_attention(
        &self,
        store: &ParamStore,
        h_de: &Tensor,
        h_en: &Tensor,
        mask: &MaskMatrix,
    ) -> Result<Tensor> {
        if h_de.rows() != h_en.rows() {
            return Err(Error::shape("cross_attention", h_de.shape(), h_en.shape()));
        }
        Ok(self.forward(store, h_de, h_en, mask)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, mse_loss, mse_loss_backward};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn causal_mask_examples() {
        assert_eq!(causal_mask(1).entries().data(), &[0.0]);
        let m = causal_mask(2);
        assert_eq!(m.entries().data(), &[0.0, f64::NEG_INFINITY, 0.0, 0.0]);
        assert_eq!(causal_mask(3).masked_count(), 3);
        assert_eq!(causal_mask(7).masked_count(), 7 * 6 / 2);
    }

    #[test]
    fn single_key_rows_copy_values() {
        let mut r = rng(1);
        let q = Tensor::uniform(1, 3, 1.0, &mut r);
        let k = Tensor::uniform(1, 3, 1.0, &mut r);
        let v = Tensor::uniform(1, 3, 1.0, &mut r);
        let out = masked_attention(&q, &k, &v, &causal_mask(1)).unwrap();
        assert_eq!(out.row(0), v.row(0));

        let q = Tensor::uniform(5, 3, 1.0, &mut r);
        let k = Tensor::uniform(5, 3, 1.0, &mut r);
        let v = Tensor::uniform(5, 3, 1.0, &mut r);
        let out = masked_attention(&q, &k, &v, &causal_mask(5)).unwrap();
        assert_eq!(out.row(0), v.row(0));
    }

    #[test]
    fn zero_logits_average_visible_values() {
        let v = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]]).unwrap();
        let z = Tensor::zeros(3, 2);
        let out = masked_attention(&z, &z, &v, &causal_mask(3)).unwrap();
        let expected = [[1.0, 2.0], [2.0, 3.0], [3.0, 5.0]];
        for (i, row) in expected.iter().enumerate() {
            for (j, &e) in row.iter().enumerate() {
                assert!((out.get(i, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_identity_output_projection_is_bitwise_single_head() {
        let mut r = rng(2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 1, ScaleMode::HeadWidth, &mut r).unwrap();
        *store.get_mut(mha.w_o) = Tensor::identity(4);
        let x = Tensor::uniform(6, 4, 1.0, &mut r);
        let mask = causal_mask(6);
        let multi = mha.self_attention(&store, &x, &mask).unwrap();
        let q = matmul(&x, store.get(mha.w_q[0])).unwrap();
        let k = matmul(&x, store.get(mha.w_k[0])).unwrap();
        let v = matmul(&x, store.get(mha.w_v[0])).unwrap();
        let single = masked_attention(&q, &k, &v, &mask).unwrap();
        assert!(multi.data().iter().zip(single.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn head_width_and_shapes() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, ScaleMode::HeadWidth, &mut r).unwrap();
        assert_eq!(mha.d_k, 2);
        assert_eq!(store.get(mha.w_q[1]).shape(), (4, 2));
        let x = Tensor::uniform(5, 4, 1.0, &mut r);
        let out = mha.self_attention(&store, &x, &causal_mask(5)).unwrap();
        assert_eq!(out.shape(), (5, 4));
        assert!(MultiHeadAttention::new(&mut store, "b", 4, 3, ScaleMode::HeadWidth, &mut r).is_err());
    }

    #[test]
    fn cross_attention_collapses_to_self_attention() {
        let mut r = rng(4);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, ScaleMode::HeadWidth, &mut r).unwrap();
        let x = Tensor::uniform(5, 4, 1.0, &mut r);
        let mask = causal_mask(5);
        assert_eq!(
            mha.cross_attention(&store, &x, &x, &mask).unwrap(),
            mha.self_attention(&store, &x, &mask).unwrap()
        );
        let short = Tensor::uniform(4, 4, 1.0, &mut r);
        assert!(mha.cross_attention(&store, &short, &x, &mask).is_err());
    }

    #[test]
    fn cross_attention_single_step_ignores_queries() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, ScaleMode::HeadWidth, &mut r).unwrap();
        let h_en = Tensor::uniform(1, 4, 1.0, &mut r);
        let a = mha.cross_attention(&store, &Tensor::uniform(1, 4, 1.0, &mut r), &h_en, &causal_mask(1)).unwrap();
        let b = mha.cross_attention(&store, &Tensor::uniform(1, 4, 5.0, &mut r), &h_en, &causal_mask(1)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn no_future_leak_self_and_cross() {
        let mut r = rng(6);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 6, 3, ScaleMode::HeadWidth, &mut r).unwrap();
        let t_len = 7;
        let mask = causal_mask(t_len);
        let x = Tensor::uniform(t_len, 6, 1.0, &mut r);
        let h_de = Tensor::uniform(t_len, 6, 1.0, &mut r);
        for t in 0..t_len - 1 {
            let mut xp = x.clone();
            for row in t + 1..t_len {
                for c in 0..6 {
                    xp.set(row, c, xp.get(row, c) + 3.7);
                }
            }
            let base = mha.self_attention(&store, &x, &mask).unwrap();
            let pert = mha.self_attention(&store, &xp, &mask).unwrap();
            let base_c = mha.cross_attention(&store, &h_de, &x, &mask).unwrap();
            let pert_c = mha.cross_attention(&store, &h_de, &xp, &mask).unwrap();
            for row in 0..=t {
                for c in 0..6 {
                    assert!((base.get(row, c) - pert.get(row, c)).abs() <= 1e-12);
                    assert!((base_c.get(row, c) - pert_c.get(row, c)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn joint_key_value_permutation_on_last_row() {
        let mut r = rng(7);
        let q = Tensor::uniform(4, 3, 1.0, &mut r);
        let k = Tensor::uniform(4, 3, 1.0, &mut r);
        let v = Tensor::uniform(4, 3, 1.0, &mut r);
        let swap = |t: &Tensor| {
            let mut s = t.clone();
            s.row_mut(0).copy_from_slice(t.row(2));
            s.row_mut(2).copy_from_slice(t.row(0));
            s
        };
        let mask = causal_mask(4);
        let a = masked_attention(&q, &k, &v, &mask).unwrap();
        let b = masked_attention(&q, &swap(&k), &swap(&v), &mask).unwrap();
        for c in 0..3 {
            assert!((a.get(3, c) - b.get(3, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_head_grad_check() {
        let mut r = rng(8);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, ScaleMode::HeadWidth, &mut r).unwrap();
        let x = Tensor::uniform(4, 4, 1.0, &mut r);
        let target = Tensor::uniform(4, 4, 1.0, &mut r);
        let mask = causal_mask(4);
        let report = grad_check(&mut store, 1e-5, 1e-4, |store| {
            store.zero_grads();
            let (out, cache) = mha.forward(store, &x, &x, &mask)?;
            mha.backward(store, &cache, &mse_loss_backward(&out, &target)?)?;
            mse_loss(&out, &target)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn attention_input_gradients_match_finite_differences() {
        let mut r = rng(9);
        let q = Tensor::uniform(4, 3, 1.0, &mut r);
        let k = Tensor::uniform(4, 3, 1.0, &mut r);
        let v = Tensor::uniform(4, 3, 1.0, &mut r);
        let target = Tensor::uniform(4, 3, 1.0, &mut r);
        let mask = causal_mask(4);
        let mut store = ParamStore::new();
        let ids = [store.add("q", q), store.add("k", k), store.add("v", v)];
        let report = grad_check(&mut store, 1e-5, 1e-4, |s| {
            s.zero_grads();
            let (out, cache) = masked_attention_scaled(s.get(ids[0]), s.get(ids[1]), s.get(ids[2]), &mask, 3f64.sqrt())?;
            let (dq, dk, dv) = masked_attention_backward(&cache, &mse_loss_backward(&out, &target)?)?;
            s.accumulate(ids[0], &dq)?;
            s.accumulate(ids[1], &dk)?;
            s.accumulate(ids[2], &dv)?;
            mse_loss(&out, &target)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
