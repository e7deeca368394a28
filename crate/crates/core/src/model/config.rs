use std::fmt;
use std::str::FromStr;

use crate::attention::ScaleMode;
use crate::error::{Error, Result};
use crate::model::layers::latent_width;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelFamily {
    /// Pretrain autoencoder, encoder, decoder over lagged returns, cross-attention.
    PretrainedTransformer,
    /// Pretrain autoencoder and a causally masked encoder only.
    Sert,
    /// Encoder/decoder without the pretrain stage.
    StandardTransformer,
    /// Causally masked encoder without the pretrain stage.
    EncoderOnly,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 4] = [
        ModelFamily::PretrainedTransformer,
        ModelFamily::Sert,
        ModelFamily::StandardTransformer,
        ModelFamily::EncoderOnly,
    ];

    pub fn has_pretrain(self) -> bool {
        matches!(self, ModelFamily::PretrainedTransformer | ModelFamily::Sert)
    }

    pub fn has_decoder(self) -> bool {
        matches!(self, ModelFamily::PretrainedTransformer | ModelFamily::StandardTransformer)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelFamily::PretrainedTransformer => "pretrained-transformer",
            ModelFamily::Sert => "sert",
            ModelFamily::StandardTransformer => "standard-transformer",
            ModelFamily::EncoderOnly => "encoder-only",
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pretrained-transformer" | "pretrained" | "trans" => Ok(ModelFamily::PretrainedTransformer),
            "sert" => Ok(ModelFamily::Sert),
            "standard-transformer" | "standard" => Ok(ModelFamily::StandardTransformer),
            "encoder-only" | "t-en" => Ok(ModelFamily::EncoderOnly),
            other => Err(Error::Config(format!("unknown model family `{other}`"))),
        }
    }
}

/// Visibility of encoder positions from decoder queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossMask {
    #[default]
    Causal,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub family: ModelFamily,
    pub heads: usize,
    pub lnf: bool,
    pub d_model: usize,
    pub latent_fraction: f64,
    pub n_factors: usize,
    pub n_stocks: usize,
    /// Width of the pretrain autoencoder latent layer (the Transformer input).
    pub pretrain_out_dim: usize,
    pub n_blocks: usize,
    pub seed: u64,
    pub scale: ScaleMode,
    pub cross_mask: CrossMask,
    /// Keep training the pretrain encoder together with the main model.
    pub finetune_pretrain: bool,
    pub ln_epsilon: f64,
}

impl ModelConfig {
    pub fn new(family: ModelFamily, heads: usize, lnf: bool, d_model: usize, n_factors: usize, n_stocks: usize) -> Self {
        ModelConfig {
            name: format!("{family}-h{heads}{}", if lnf { "-lnf" } else { "" }),
            family,
            heads,
            lnf,
            d_model,
            latent_fraction: 0.7,
            n_factors,
            n_stocks,
            pretrain_out_dim: n_stocks,
            n_blocks: 1,
            seed: 0,
            scale: ScaleMode::HeadWidth,
            cross_mask: CrossMask::Causal,
            finetune_pretrain: false,
            ln_epsilon: 1e-5,
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("model `{}`: {msg}", self.name)));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("heads {} must divide d_model {}", self.heads, self.d_model));
        }
        if self.d_model < 2 || !self.d_model.is_multiple_of(2) {
            return fail(format!("d_model {} must be even and >= 2", self.d_model));
        }
        if !(self.latent_fraction > 0.0 && self.latent_fraction <= 1.0) {
            return fail(format!("latent_fraction {} outside (0, 1]", self.latent_fraction));
        }
        if latent_width(self.d_model, self.latent_fraction) == 0 {
            return fail("FFN latent width rounds to zero".into());
        }
        if self.n_factors == 0 || self.n_stocks == 0 || self.pretrain_out_dim == 0 {
            return fail("factor, stock and pretrain widths must be positive".into());
        }
        if self.n_blocks == 0 {
            return fail("n_blocks must be at least 1".into());
        }
        if !(self.ln_epsilon >= 0.0) {
            return fail("ln_epsilon must be non-negative".into());
        }
        if self.finetune_pretrain && !self.family.has_pretrain() {
            return fail(format!("family {} has no pretrain stage to fine-tune", self.family));
        }
        Ok(())
    }
}

/// One row of the 20-model configuration matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixRow {
    pub name: &'static str,
    pub family: ModelFamily,
    pub heads: usize,
    pub group: u8,
    pub lnf: bool,
}

const fn row(name: &'static str, family: ModelFamily, heads: usize, group: u8, lnf: bool) -> MatrixRow {
    MatrixRow {
        name,
        family,
        heads,
        group,
        lnf,
    }
}

use ModelFamily::{EncoderOnly, PretrainedTransformer, Sert, StandardTransformer};

pub const MODEL_MATRIX: [MatrixRow; 20] = [
    row("SERT1", Sert, 1, 1, true),
    row("SERT2", Sert, 1, 2, false),
    row("SERT3", Sert, 2, 2, false),
    row("SERT4", Sert, 3, 2, false),
    row("SERT5", Sert, 4, 2, false),
    row("SERT6", Sert, 6, 2, false),
    row("SERT7", Sert, 7, 2, false),
    row("T-En1", EncoderOnly, 1, 3, false),
    row("T-En2", EncoderOnly, 2, 3, false),
    row("T-En3", EncoderOnly, 4, 3, false),
    row("Trans1", PretrainedTransformer, 1, 1, true),
    row("Trans2", PretrainedTransformer, 1, 2, false),
    row("Trans3", PretrainedTransformer, 2, 2, false),
    row("Trans4", PretrainedTransformer, 3, 2, false),
    row("Trans5", PretrainedTransformer, 4, 2, false),
    row("Trans6", PretrainedTransformer, 6, 2, false),
    row("Trans7", PretrainedTransformer, 7, 2, false),
    row("Trans8", StandardTransformer, 1, 3, false),
    row("Trans9", StandardTransformer, 2, 3, false),
    row("Trans10", StandardTransformer, 4, 3, false),
];

pub fn matrix_row(name: &str) -> Option<&'static MatrixRow> {
    MODEL_MATRIX.iter().find(|r| r.name.eq_ignore_ascii_case(name))
}

/// Smallest even multiple of `heads` that is at least `base`.
pub fn width_for_heads(base: usize, heads: usize) -> usize {
    let mut d = base.max(2).div_ceil(heads) * heads;
    while !d.is_multiple_of(2) {
        d += heads;
    }
    d
}

impl MatrixRow {
    /// Config for this row; `d_model` is `base_d_model` rounded up so the head count divides it.
    pub fn config(&self, base_d_model: usize, n_factors: usize, n_stocks: usize) -> ModelConfig {
        ModelConfig::new(
            self.family,
            self.heads,
            self.lnf,
            width_for_heads(base_d_model, self.heads),
            n_factors,
            n_stocks,
        )
        .with_name(self.name)
    }
}

/// All 20 rows at the given widths.
pub fn matrix_configs(base_d_model: usize, n_factors: usize, n_stocks: usize, seed: u64) -> Vec<ModelConfig> {
    MODEL_MATRIX
        .iter()
        .map(|r| r.config(base_d_model, n_factors, n_stocks).with_seed(seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_rows() {
        let sert1 = matrix_row("SERT1").unwrap();
        assert_eq!((sert1.family, sert1.heads, sert1.lnf), (Sert, 1, true));
        let trans4 = matrix_row("Trans4").unwrap();
        assert_eq!((trans4.family, trans4.heads, trans4.group, trans4.lnf), (PretrainedTransformer, 3, 2, false));
        assert_eq!(MODEL_MATRIX.iter().filter(|r| r.lnf).count(), 2);
        assert_eq!(MODEL_MATRIX.iter().filter(|r| r.family.has_decoder()).count(), 10);
    }

    #[test]
    fn widths_are_divisible_and_even() {
        for heads in [1, 2, 3, 4, 6, 7] {
            let d = width_for_heads(8, heads);
            assert!(d >= 8 && d.is_multiple_of(heads) && d.is_multiple_of(2), "{heads} -> {d}");
        }
        assert_eq!(width_for_heads(420, 7), 420);
        for cfg in matrix_configs(8, 6, 5, 1) {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = ModelConfig::new(Sert, 3, false, 8, 4, 4);
        assert!(cfg.validate().is_err());
        cfg.heads = 2;
        cfg.validate().unwrap();
        cfg.latent_fraction = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::new(EncoderOnly, 1, false, 8, 4, 4);
        cfg.finetune_pretrain = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn family_parse() {
        assert_eq!("SERT".parse::<ModelFamily>().unwrap(), Sert);
        assert_eq!("encoder-only".parse::<ModelFamily>().unwrap(), EncoderOnly);
        assert!("gpt".parse::<ModelFamily>().is_err());
    }
}
