//! Model assembly: the pretrain autoencoder and the four model families.
//!
//! ```text
//! PretrainedTransformer: factors → AE latent → embed+PE → encoder ┐
//!                        lagged returns → embed+PE → decoder ← cross ┘ → head
//! Sert:                  factors → AE latent → embed+PE → encoder → head
//! StandardTransformer:   as PretrainedTransformer without the AE
//! EncoderOnly:           as Sert without the AE
//! ```

mod checkpoint;
mod config;
pub mod layers;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use config::{
    matrix_configs, matrix_row, width_for_heads, CrossMask, ModelConfig, ModelFamily, MatrixRow, MODEL_MATRIX,
};
pub use layers::{add_norm, latent_width, FfnAutoencoder, LayerNorm, Linear};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{causal_mask, MaskMatrix};
use crate::encoding::{add_pe, linear_embed, sinusoidal_pe};
use crate::error::{Error, Result};
use crate::tensor::{matmul, mse_loss, mse_loss_backward, relu, relu_backward, ParamId, ParamStore, Tensor};
use crate::training::{adam_step_params, AdamConfig};
use layers::{BlockDims, DecoderBlock, DecoderCache, EncoderBlock, EncoderCache};

/// Dimension-projecting autoencoder trained on the factor panel before the
/// main model. Its ReLU latent layer becomes the Transformer input.
#[derive(Debug, Clone)]
pub struct PretrainAutoencoder {
    pub encoder: Linear,
    pub decoder: Linear,
    pub input_width: usize,
    pub latent_width: usize,
}

impl PretrainAutoencoder {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_width: usize,
        latent_width: usize,
        rng: &mut R,
    ) -> Self {
        PretrainAutoencoder {
            encoder: Linear::new(store, &format!("{prefix}.enc"), input_width, latent_width, true, rng),
            decoder: Linear::new(store, &format!("{prefix}.dec"), latent_width, input_width, true, rng),
            input_width,
            latent_width,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.encoder, &self.decoder]
            .iter()
            .flat_map(|l| std::iter::once(l.w).chain(l.b))
            .collect()
    }

    /// Returns `(latent, pre_activation)`.
    fn encode(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.cols() != self.input_width {
            return Err(Error::shape("pretrain_autoencoder", x.shape(), (x.rows(), self.input_width)));
        }
        let z = self.encoder.forward(store, x)?;
        let latent = relu(&z);
        if !latent.is_finite() {
            return Err(Error::Data("pretrain latent contains non-finite values".into()));
        }
        Ok((latent, z))
    }

    pub fn latent(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode(store, x)?.0)
    }

    pub fn reconstruct(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let latent = self.latent(store, x)?;
        self.decoder.forward(store, &latent)
    }

    /// Full-batch Adam on the reconstruction MSE; returns the per-epoch loss.
    pub fn fit(&self, store: &mut ParamStore, x: &Tensor, epochs: usize, adam: &AdamConfig) -> Result<Vec<f64>> {
        let ids = self.param_ids();
        let mut history = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            store.zero_grads();
            let (latent, z) = self.encode(store, x)?;
            let recon = self.decoder.forward(store, &latent)?;
            let loss = mse_loss(&recon, x)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("pretrain reconstruction loss is {loss}")));
            }
            history.push(loss);
            let d_recon = mse_loss_backward(&recon, x)?;
            let d_latent = self.decoder.backward(store, &latent, &d_recon)?;
            let dz = relu_backward(&z, &d_latent)?;
            self.encoder.backward(store, x, &dz)?;
            adam_step_params(store, &ids, adam)?;
        }
        Ok(history)
    }
}

/// A standalone fitted pretrain autoencoder.
#[derive(Debug, Clone)]
pub struct FittedAutoencoder {
    pub store: ParamStore,
    pub autoencoder: PretrainAutoencoder,
    pub loss_history: Vec<f64>,
}

impl FittedAutoencoder {
    pub fn latent(&self, x: &Tensor) -> Result<Tensor> {
        self.autoencoder.latent(&self.store, x)
    }

    pub fn reconstruction_mse(&self, x: &Tensor) -> Result<f64> {
        mse_loss(&self.autoencoder.reconstruct(&self.store, x)?, x)
    }
}

/// Trains an autoencoder projecting `n_factors` inputs to a `pretrain_out_dim` latent.
pub fn pretrain(factors: &Tensor, cfg: &ModelConfig, epochs: usize, lr: f64) -> Result<FittedAutoencoder> {
    if !factors.is_finite() {
        return Err(Error::Data("pretrain input must be imputed (non-finite values present)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let autoencoder = PretrainAutoencoder::new(&mut store, "pretrain", cfg.n_factors, cfg.pretrain_out_dim, &mut rng);
    let adam = AdamConfig {
        eta: lr,
        ..AdamConfig::default()
    };
    let loss_history = autoencoder.fit(&mut store, factors, epochs, &adam)?;
    Ok(FittedAutoencoder {
        store,
        autoencoder,
        loss_history,
    })
}

/// Row `t` holds `returns[t-1]`; row 0 is zeros.
pub fn lag_returns(returns: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(returns.rows(), returns.cols());
    for t in 1..returns.rows() {
        out.row_mut(t).copy_from_slice(returns.row(t - 1));
    }
    out
}

#[derive(Debug, Clone)]
struct Decoder {
    embed: ParamId,
    blocks: Vec<DecoderBlock>,
}

#[derive(Debug, Clone)]
struct Architecture {
    pretrain: Option<PretrainAutoencoder>,
    embed: ParamId,
    encoder: Vec<EncoderBlock>,
    decoder: Option<Decoder>,
    head: Linear,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub pretrain_loss: Option<f64>,
}

/// Parameters, wiring and training metadata of one model.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    arch: Architecture,
    pub meta: TrainingMeta,
}

/// Everything `TrainedModel::backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    factors: Tensor,
    pretrain_pre_activation: Option<Tensor>,
    embed_input: Tensor,
    encoder: Vec<EncoderCache>,
    decoder: Vec<DecoderCache>,
    lagged: Option<Tensor>,
    head_input: Tensor,
}

/// Wires an untrained parameter set for `cfg`.
pub fn build_model(cfg: &ModelConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let pretrain = cfg.family.has_pretrain().then(|| {
        PretrainAutoencoder::new(&mut store, "pretrain", cfg.n_factors, cfg.pretrain_out_dim, &mut rng)
    });
    if pretrain.is_some() && !cfg.finetune_pretrain {
        store.set_frozen_prefix("pretrain.", true);
    }
    let embed_in = if pretrain.is_some() { cfg.pretrain_out_dim } else { cfg.n_factors };
    let embed = store.add(
        "embed.w",
        Tensor::uniform(embed_in, cfg.d_model, 1.0 / (embed_in as f64).sqrt(), &mut rng),
    );
    let dims = BlockDims {
        d_model: cfg.d_model,
        heads: cfg.heads,
        latent_fraction: cfg.latent_fraction,
        scale: cfg.scale,
        lnf: cfg.lnf,
        ln_epsilon: cfg.ln_epsilon,
    };
    let encoder = (0..cfg.n_blocks)
        .map(|i| EncoderBlock::new(&mut store, &format!("encoder.{i}"), &dims, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let decoder = if cfg.family.has_decoder() {
        let embed = store.add(
            "decoder.embed.w",
            Tensor::uniform(cfg.n_stocks, cfg.d_model, 1.0 / (cfg.n_stocks as f64).sqrt(), &mut rng),
        );
        let blocks = (0..cfg.n_blocks)
            .map(|i| DecoderBlock::new(&mut store, &format!("decoder.{i}"), &dims, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Some(Decoder { embed, blocks })
    } else {
        None
    };
    let head = Linear::new(&mut store, "head", cfg.d_model, cfg.n_stocks, true, &mut rng);
    Ok(TrainedModel {
        config: cfg.clone(),
        store,
        arch: Architecture {
            pretrain,
            embed,
            encoder,
            decoder,
            head,
        },
        meta: TrainingMeta {
            seed: cfg.seed,
            ..TrainingMeta::default()
        },
    })
}

impl TrainedModel {
    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn pretrain_autoencoder(&self) -> Option<&PretrainAutoencoder> {
        self.arch.pretrain.as_ref()
    }

    /// Fits the pretrain autoencoder in place on `factors`. It stays frozen
    /// afterwards unless the config asks for joint fine-tuning.
    pub fn pretrain(&mut self, factors: &Tensor, epochs: usize, adam: &AdamConfig) -> Result<Vec<f64>> {
        let Some(ae) = self.arch.pretrain.clone() else {
            return Ok(Vec::new());
        };
        if !factors.is_finite() {
            return Err(Error::Data("pretrain input must be imputed (non-finite values present)".into()));
        }
        let history = ae.fit(&mut self.store, factors, epochs, adam)?;
        self.store.zero_grads();
        self.meta.pretrain_loss = history.last().copied();
        Ok(history)
    }

    pub fn pretrain_latent(&self, factors: &Tensor) -> Result<Option<Tensor>> {
        self.arch
            .pretrain
            .as_ref()
            .map(|ae| ae.latent(&self.store, factors))
            .transpose()
    }

    pub fn forward(&self, factors: &Tensor, lagged_returns: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_cached(factors, lagged_returns)?.0)
    }

    pub fn forward_cached(&self, factors: &Tensor, lagged_returns: Option<&Tensor>) -> Result<(Tensor, ForwardCache)> {
        let cfg = &self.config;
        let store = &self.store;
        let t_len = factors.rows();
        if factors.cols() != cfg.n_factors {
            return Err(Error::shape("forward(factors)", factors.shape(), (t_len, cfg.n_factors)));
        }
        let (embed_input, pretrain_pre_activation) = match &self.arch.pretrain {
            Some(ae) => {
                let (latent, z) = ae.encode(store, factors)?;
                (latent, Some(z))
            }
            None => (factors.clone(), None),
        };
        let pe = sinusoidal_pe(t_len, cfg.d_model)?;
        let mask = causal_mask(t_len);
        let mut h = add_pe(&linear_embed(&embed_input, store.get(self.arch.embed))?, &pe)?;
        let mut encoder = Vec::with_capacity(self.arch.encoder.len());
        for block in &self.arch.encoder {
            let (next, cache) = block.forward(store, &h, &mask)?;
            encoder.push(cache);
            h = next;
        }
        let mut decoder_caches = Vec::new();
        let mut lagged = None;
        let head_input = match &self.arch.decoder {
            Some(dec) => {
                let returns = lagged_returns.ok_or_else(|| {
                    Error::Config(format!("model `{}` has a decoder and needs lagged returns", cfg.name))
                })?;
                if returns.shape() != (t_len, cfg.n_stocks) {
                    return Err(Error::shape("forward(lagged_returns)", returns.shape(), (t_len, cfg.n_stocks)));
                }
                let cross_mask = match cfg.cross_mask {
                    CrossMask::Causal => mask.clone(),
                    CrossMask::Full => MaskMatrix::unmasked(t_len),
                };
                let mut y = add_pe(&linear_embed(returns, store.get(dec.embed))?, &pe)?;
                for block in &dec.blocks {
                    let (next, cache) = block.forward(store, &y, &h, &mask, &cross_mask)?;
                    decoder_caches.push(cache);
                    y = next;
                }
                lagged = Some(returns.clone());
                y
            }
            None => h,
        };
        let out = self.arch.head.forward(store, &head_input)?;
        Ok((
            out,
            ForwardCache {
                factors: factors.clone(),
                pretrain_pre_activation,
                embed_input,
                encoder,
                decoder: decoder_caches,
                lagged,
                head_input,
            },
        ))
    }

    /// Accumulates `∂L/∂θ` for every parameter (frozen ones included) given `∂L/∂output`.
    pub fn backward(&mut self, cache: &ForwardCache, d_out: &Tensor) -> Result<()> {
        let arch = &self.arch;
        let store = &mut self.store;
        let d_head_in = arch.head.backward(store, &cache.head_input, d_out)?;
        let mut d_h = match &arch.decoder {
            Some(dec) => {
                let mut d_y = d_head_in;
                let mut d_encoded = Tensor::zeros(d_y.rows(), d_y.cols());
                for (block, c) in dec.blocks.iter().zip(&cache.decoder).rev() {
                    let (dy, de) = block.backward(store, c, &d_y)?;
                    d_encoded.add_assign(&de)?;
                    d_y = dy;
                }
                let lagged = cache.lagged.as_ref().expect("decoder forward stores lagged returns");
                store.accumulate(dec.embed, &matmul(&lagged.transpose(), &d_y)?)?;
                d_encoded
            }
            None => d_head_in,
        };
        for (block, c) in arch.encoder.iter().zip(&cache.encoder).rev() {
            d_h = block.backward(store, c, &d_h)?;
        }
        store.accumulate(arch.embed, &matmul(&cache.embed_input.transpose(), &d_h)?)?;
        if let (Some(ae), Some(z)) = (&arch.pretrain, &cache.pretrain_pre_activation) {
            let d_latent = matmul(&d_h, &store.get(arch.embed).transpose())?;
            let dz = relu_backward(z, &d_latent)?;
            ae.encoder.backward(store, &cache.factors, &dz)?;
        }
        Ok(())
    }

    /// Zeroes gradients, runs forward and backward on the MSE against `target`, returns the loss.
    pub fn loss_and_grad(&mut self, factors: &Tensor, lagged: Option<&Tensor>, target: &Tensor) -> Result<f64> {
        self.store.zero_grads();
        let (out, cache) = self.forward_cached(factors, lagged)?;
        let loss = mse_loss(&out, target)?;
        self.backward(&cache, &mse_loss_backward(&out, target)?)?;
        Ok(loss)
    }

    pub(crate) fn replace_store(&mut self, store: ParamStore) {
        self.store = store;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn toy(family: ModelFamily, heads: usize, lnf: bool) -> ModelConfig {
        let mut cfg = ModelConfig::new(family, heads, lnf, 4, 3, 2).with_seed(5);
        cfg.pretrain_out_dim = 3;
        cfg
    }

    fn inputs(seed: u64, t: usize, f: usize, n: usize) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(t, f, 1.0, &mut rng);
        let r = Tensor::uniform(t, n, 1.0, &mut rng);
        (x, lag_returns(&r), r)
    }

    #[test]
    fn lagged_returns_shift_by_one() {
        let r = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(lag_returns(&r).data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn full_model_grad_check_every_family() {
        for family in ModelFamily::ALL {
            for lnf in [false, true] {
                let mut cfg = toy(family, 2, lnf);
                cfg.finetune_pretrain = family.has_pretrain();
                let mut model = build_model(&cfg).unwrap();
                let (x, lagged, r) = inputs(9, 5, 3, 2);
                let lagged = family.has_decoder().then_some(lagged);
                let mut store = model.store.clone();
                let report = grad_check(&mut store, 1e-5, 1e-4, |s| {
                    model.replace_store(s.clone());
                    let loss = model.loss_and_grad(&x, lagged.as_ref(), &r)?;
                    *s = model.store.clone();
                    Ok(loss)
                })
                .unwrap();
                assert!(report.passed(), "{family} lnf={lnf}: {report:?}");
            }
        }
    }

    #[test]
    fn decoder_family_requires_lagged_returns() {
        let model = build_model(&toy(ModelFamily::StandardTransformer, 1, false)).unwrap();
        let (x, _, _) = inputs(1, 4, 3, 2);
        assert!(matches!(model.forward(&x, None), Err(Error::Config(_))));
        let enc = build_model(&toy(ModelFamily::EncoderOnly, 1, false)).unwrap();
        assert_eq!(enc.forward(&x, None).unwrap().shape(), (4, 2));
    }

    #[test]
    fn parameter_counts() {
        for family in ModelFamily::ALL {
            let a = build_model(&toy(family, 2, false)).unwrap().num_params();
            let b = build_model(&toy(family, 2, true)).unwrap().num_params();
            assert_eq!(a, b, "{family}");
        }
        let enc = build_model(&toy(ModelFamily::EncoderOnly, 2, false)).unwrap().num_params();
        let std = build_model(&toy(ModelFamily::StandardTransformer, 2, false)).unwrap().num_params();
        assert!(enc < std);
    }

    #[test]
    fn equal_seeds_give_bitwise_equal_outputs() {
        let cfg = toy(ModelFamily::PretrainedTransformer, 2, false);
        let (x, lagged, _) = inputs(2, 6, 3, 2);
        let a = build_model(&cfg).unwrap().forward(&x, Some(&lagged)).unwrap();
        let b = build_model(&cfg).unwrap().forward(&x, Some(&lagged)).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn pretrain_reaches_identity_on_reachable_data() {
        // bounded inputs: a bias shift keeps every latent unit active, so an exact inverse exists
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(40, 3, 1.0, &mut rng);
        let mut cfg = ModelConfig::new(ModelFamily::Sert, 1, false, 4, 3, 3).with_seed(0);
        cfg.pretrain_out_dim = 3;
        let fitted = pretrain(&x, &cfg, 3000, 0.01).unwrap();
        let mse = fitted.reconstruction_mse(&x).unwrap();
        assert!(mse < 1e-3, "reconstruction mse {mse}");
        let h = &fitted.loss_history;
        assert!(h.last().unwrap() < &h[0]);
    }

    #[test]
    fn pretrain_constant_panel_gives_constant_latent() {
        let x = Tensor::filled(6, 3, 0.3);
        let cfg = ModelConfig::new(ModelFamily::Sert, 1, false, 4, 3, 5).with_seed(3);
        let fitted = pretrain(&x, &cfg, 20, 0.01).unwrap();
        let latent = fitted.latent(&x).unwrap();
        assert_eq!(latent.shape(), (6, 5));
        for r in 1..6 {
            assert_eq!(latent.row(r), latent.row(0));
        }
    }

    #[test]
    fn pretrain_rejects_missing_values() {
        let mut x = Tensor::filled(3, 2, 1.0);
        x.set(1, 1, f64::NAN);
        let cfg = ModelConfig::new(ModelFamily::Sert, 1, false, 4, 2, 2);
        assert!(pretrain(&x, &cfg, 5, 0.01).is_err());
    }

    #[test]
    fn pretrain_divergence_is_reported() {
        let x = Tensor::filled(3, 2, 1e200);
        let cfg = ModelConfig::new(ModelFamily::Sert, 1, false, 4, 2, 2);
        assert!(matches!(pretrain(&x, &cfg, 5, 0.01), Err(Error::Divergence(_)) | Err(Error::Data(_))));
    }
}
