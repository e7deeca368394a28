//! Parameterized layers. Each `forward` returns a cache that the matching
//! `backward` consumes; `backward` accumulates parameter gradients into the
//! store and returns the gradient with respect to the layer input.

use rand::Rng;

use crate::attention::{MaskMatrix, MultiHeadAttention, MultiHeadCache, ScaleMode};
use crate::error::{Error, Result};
use crate::tensor::{
    layer_norm, layer_norm_backward, matmul, relu, relu_backward, LayerNormCache, ParamId, ParamStore, Tensor,
};

/// Dense map `y = x·W + b` applied to every row.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Uniform ±1/√fan_in initialization for weights and bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{prefix}.w"), Tensor::uniform(fan_in, fan_out, bound, rng));
        let b = bias.then(|| store.add(format!("{prefix}.b"), Tensor::uniform(1, fan_out, bound, rng)));
        Linear { w, b }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = matmul(x, store.get(self.w))?;
        match self.b {
            Some(b) => y.add_row_vector(store.get(b)),
            None => Ok(y),
        }
    }

    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let dw = matmul(&x.transpose(), dy)?;
        let dx = matmul(dy, &store.get(self.w).transpose())?;
        store.accumulate(self.w, &dw)?;
        if let Some(b) = self.b {
            store.accumulate(b, &dy.sum_rows())?;
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub epsilon: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, epsilon: f64) -> Self {
        LayerNorm {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::filled(1, width, 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(1, width)),
            epsilon,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        layer_norm(x, store.get(self.gamma), store.get(self.beta), self.epsilon)
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &LayerNormCache, dy: &Tensor) -> Result<Tensor> {
        let (dx, dgamma, dbeta) = layer_norm_backward(cache, dy)?;
        store.accumulate(self.gamma, &dgamma)?;
        store.accumulate(self.beta, &dbeta)?;
        Ok(dx)
    }
}

/// One-hidden-layer autoencoder feed-forward block: `W₂·ReLU(W₁h + b₁) + b₂`.
#[derive(Debug, Clone)]
pub struct FfnAutoencoder {
    pub encode: Linear,
    pub decode: Linear,
    pub width: usize,
    pub latent: usize,
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    input: Tensor,
    pre_activation: Tensor,
    activation: Tensor,
}

/// Latent width `⌊fraction · width⌋`.
pub fn latent_width(width: usize, fraction: f64) -> usize {
    // the small nudge keeps e.g. 0.7 * 10 from landing on 6.999…
    (fraction * width as f64 + 1e-9).floor() as usize
}

impl FfnAutoencoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        latent_fraction: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let latent = latent_width(width, latent_fraction);
        if latent == 0 {
            return Err(Error::Config(format!(
                "latent width of FFN is zero (width {width}, fraction {latent_fraction})"
            )));
        }
        Ok(FfnAutoencoder {
            encode: Linear::new(store, &format!("{prefix}.w1"), width, latent, true, rng),
            decode: Linear::new(store, &format!("{prefix}.w2"), latent, width, true, rng),
            width,
            latent,
        })
    }

    pub fn forward(&self, store: &ParamStore, h: &Tensor) -> Result<(Tensor, FfnCache)> {
        if h.cols() != self.width {
            return Err(Error::shape("ffn_forward", h.shape(), (h.rows(), self.width)));
        }
        let z = self.encode.forward(store, h)?;
        let a = relu(&z);
        let y = self.decode.forward(store, &a)?;
        Ok((
            y,
            FfnCache {
                input: h.clone(),
                pre_activation: z,
                activation: a,
            },
        ))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &FfnCache, dy: &Tensor) -> Result<Tensor> {
        let da = self.decode.backward(store, &cache.activation, dy)?;
        let dz = relu_backward(&cache.pre_activation, &da)?;
        self.encode.backward(store, &cache.input, &dz)
    }
}

/// Residual arrangement around a sublayer.
#[derive(Debug, Clone)]
pub struct Residual {
    pub norm: LayerNorm,
    /// `true`: `x + sub(LN(x))`; `false`: `LN(x + sub(x))`.
    pub lnf: bool,
}

#[derive(Debug, Clone)]
pub struct ResidualCache<C> {
    norm: LayerNormCache,
    inner: C,
}

impl Residual {
    pub fn forward<C>(
        &self,
        store: &ParamStore,
        x: &Tensor,
        sublayer: impl FnOnce(&Tensor) -> Result<(Tensor, C)>,
    ) -> Result<(Tensor, ResidualCache<C>)> {
        if self.lnf {
            let (normed, norm) = self.norm.forward(store, x)?;
            let (s, inner) = sublayer(&normed)?;
            Ok((x.add(&s)?, ResidualCache { norm, inner }))
        } else {
            let (s, inner) = sublayer(x)?;
            let (y, norm) = self.norm.forward(store, &x.add(&s)?)?;
            Ok((y, ResidualCache { norm, inner }))
        }
    }

    /// `sublayer_back` maps the gradient at the sublayer output to the
    /// gradient at the sublayer input.
    pub fn backward<C>(
        &self,
        store: &mut ParamStore,
        cache: &ResidualCache<C>,
        dy: &Tensor,
        sublayer_back: impl FnOnce(&mut ParamStore, &C, &Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        if self.lnf {
            let d_sub_in = sublayer_back(store, &cache.inner, dy)?;
            let d_norm_in = self.norm.backward(store, &cache.norm, &d_sub_in)?;
            dy.add(&d_norm_in)
        } else {
            let du = self.norm.backward(store, &cache.norm, dy)?;
            let d_sub_in = sublayer_back(store, &cache.inner, &du)?;
            du.add(&d_sub_in)
        }
    }
}

/// Forward-only Add&Norm on a fixed sublayer: post-norm `LN(x + sub(x))` or
/// LNF `x + sub(LN(x))`.
pub fn add_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    epsilon: f64,
    lnf: bool,
    sublayer: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    if lnf {
        let (normed, _) = layer_norm(x, gamma, beta, epsilon)?;
        x.add(&sublayer(&normed)?)
    } else {
        let s = sublayer(x)?;
        Ok(layer_norm(&x.add(&s)?, gamma, beta, epsilon)?.0)
    }
}

/// Masked self-attention and FFN, each wrapped in Add&Norm.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    pub attention_norm: Residual,
    pub ffn: FfnAutoencoder,
    pub ffn_norm: Residual,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    attention: ResidualCache<MultiHeadCache>,
    ffn: ResidualCache<FfnCache>,
}

pub struct BlockDims {
    pub d_model: usize,
    pub heads: usize,
    pub latent_fraction: f64,
    pub scale: ScaleMode,
    pub lnf: bool,
    pub ln_epsilon: f64,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: &BlockDims, rng: &mut R) -> Result<Self> {
        Ok(EncoderBlock {
            attention: MultiHeadAttention::new(store, &format!("{prefix}.self_attn"), dims.d_model, dims.heads, dims.scale, rng)?,
            attention_norm: Residual {
                norm: LayerNorm::new(store, &format!("{prefix}.norm1"), dims.d_model, dims.ln_epsilon),
                lnf: dims.lnf,
            },
            ffn: FfnAutoencoder::new(store, &format!("{prefix}.ffn"), dims.d_model, dims.latent_fraction, rng)?,
            ffn_norm: Residual {
                norm: LayerNorm::new(store, &format!("{prefix}.norm2"), dims.d_model, dims.ln_epsilon),
                lnf: dims.lnf,
            },
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, mask: &MaskMatrix) -> Result<(Tensor, EncoderCache)> {
        let (h, attention) = self
            .attention_norm
            .forward(store, x, |n| self.attention.forward(store, n, n, mask))?;
        let (y, ffn) = self.ffn_norm.forward(store, &h, |n| self.ffn.forward(store, n))?;
        Ok((y, EncoderCache { attention, ffn }))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &EncoderCache, dy: &Tensor) -> Result<Tensor> {
        let dh = self
            .ffn_norm
            .backward(store, &cache.ffn, dy, |s, c, d| self.ffn.backward(s, c, d))?;
        self.attention_norm.backward(store, &cache.attention, &dh, |s, c, d| {
            let (dq, dkv) = self.attention.backward(s, c, d)?;
            dq.add(&dkv)
        })
    }
}

/// Masked self-attention, cross-attention onto the encoder output, then FFN.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_attention: MultiHeadAttention,
    pub self_norm: Residual,
    pub cross_attention: MultiHeadAttention,
    pub cross_norm: Residual,
    pub ffn: FfnAutoencoder,
    pub ffn_norm: Residual,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    self_attention: ResidualCache<MultiHeadCache>,
    cross_attention: ResidualCache<MultiHeadCache>,
    ffn: ResidualCache<FfnCache>,
}

impl DecoderBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: &BlockDims, rng: &mut R) -> Result<Self> {
        let residual = |store: &mut ParamStore, name: &str| Residual {
            norm: LayerNorm::new(store, &format!("{prefix}.{name}"), dims.d_model, dims.ln_epsilon),
            lnf: dims.lnf,
        };
        let self_attention =
            MultiHeadAttention::new(store, &format!("{prefix}.self_attn"), dims.d_model, dims.heads, dims.scale, rng)?;
        let self_norm = residual(store, "norm1");
        let cross_attention =
            MultiHeadAttention::new(store, &format!("{prefix}.cross_attn"), dims.d_model, dims.heads, dims.scale, rng)?;
        let cross_norm = residual(store, "norm2");
        let ffn = FfnAutoencoder::new(store, &format!("{prefix}.ffn"), dims.d_model, dims.latent_fraction, rng)?;
        let ffn_norm = residual(store, "norm3");
        Ok(DecoderBlock {
            self_attention,
            self_norm,
            cross_attention,
            cross_norm,
            ffn,
            ffn_norm,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        encoded: &Tensor,
        self_mask: &MaskMatrix,
        cross_mask: &MaskMatrix,
    ) -> Result<(Tensor, DecoderCache)> {
        if x.rows() != encoded.rows() {
            return Err(Error::shape("cross_attention", x.shape(), encoded.shape()));
        }
        let (h1, self_attention) = self
            .self_norm
            .forward(store, x, |n| self.self_attention.forward(store, n, n, self_mask))?;
        let (h2, cross_attention) = self
            .cross_norm
            .forward(store, &h1, |n| self.cross_attention.forward(store, n, encoded, cross_mask))?;
        let (y, ffn) = self.ffn_norm.forward(store, &h2, |n| self.ffn.forward(store, n))?;
        Ok((
            y,
            DecoderCache {
                self_attention,
                cross_attention,
                ffn,
            },
        ))
    }

    /// Returns `(dx, d_encoded)`.
    pub fn backward(&self, store: &mut ParamStore, cache: &DecoderCache, dy: &Tensor) -> Result<(Tensor, Tensor)> {
        let dh2 = self
            .ffn_norm
            .backward(store, &cache.ffn, dy, |s, c, d| self.ffn.backward(s, c, d))?;
        let mut d_encoded = None;
        let dh1 = self.cross_norm.backward(store, &cache.cross_attention, &dh2, |s, c, d| {
            let (dq, dkv) = self.cross_attention.backward(s, c, d)?;
            d_encoded = Some(dkv);
            Ok(dq)
        })?;
        let dx = self.self_norm.backward(store, &cache.self_attention, &dh1, |s, c, d| {
            let (dq, dkv) = self.self_attention.backward(s, c, d)?;
            dq.add(&dkv)
        })?;
        Ok((dx, d_encoded.expect("cross-attention backward ran")))
    }
}
