//! Binary checkpoint: magic, version, a `key=value` header echoing the
//! config and training metadata, then every parameter as raw little-endian f64.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{build_model, CrossMask, ModelConfig, ModelFamily, TrainedModel, TrainingMeta};
use crate::attention::ScaleMode;
use crate::error::{Error, Result};
use crate::tensor::ParamStore;

const MAGIC: &[u8; 8] = b"SERTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn header(model: &TrainedModel) -> String {
    let c = &model.config;
    let m = &model.meta;
    let mut lines = vec![
        ("name", c.name.clone()),
        ("family", c.family.as_str().to_string()),
        ("heads", c.heads.to_string()),
        ("lnf", c.lnf.to_string()),
        ("d_model", c.d_model.to_string()),
        ("latent_fraction", bits(c.latent_fraction)),
        ("n_factors", c.n_factors.to_string()),
        ("n_stocks", c.n_stocks.to_string()),
        ("pretrain_out_dim", c.pretrain_out_dim.to_string()),
        ("n_blocks", c.n_blocks.to_string()),
        ("seed", c.seed.to_string()),
        (
            "scale",
            match c.scale {
                ScaleMode::HeadWidth => "head",
                ScaleMode::ModelWidth => "model",
            }
            .to_string(),
        ),
        (
            "cross_mask",
            match c.cross_mask {
                CrossMask::Causal => "causal",
                CrossMask::Full => "full",
            }
            .to_string(),
        ),
        ("finetune_pretrain", c.finetune_pretrain.to_string()),
        ("ln_epsilon", bits(c.ln_epsilon)),
        ("meta.seed", m.seed.to_string()),
        ("meta.epochs_run", m.epochs_run.to_string()),
        ("meta.best_epoch", m.best_epoch.to_string()),
    ];
    if let Some(v) = m.best_val_loss {
        lines.push(("meta.best_val_loss", bits(v)));
    }
    if let Some(v) = m.pretrain_loss {
        lines.push(("meta.pretrain_loss", bits(v)));
    }
    lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

struct Header(BTreeMap<String, String>);

impl Header {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed header line `{line}`")))?;
            map.insert(k.to_string(), v.to_string());
        }
        Ok(Header(map))
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("header is missing `{key}`")))
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.raw(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad value for `{key}`")))
    }

    fn float(&self, key: &str) -> Result<f64> {
        u64::from_str_radix(self.raw(key)?, 16)
            .map(f64::from_bits)
            .map_err(|_| Error::Checkpoint(format!("bad float bits for `{key}`")))
    }

    fn opt_float(&self, key: &str) -> Result<Option<f64>> {
        if self.0.contains_key(key) {
            self.float(key).map(Some)
        } else {
            Ok(None)
        }
    }

    fn config(&self) -> Result<ModelConfig> {
        let family: ModelFamily = self.raw("family")?.parse()?;
        let mut cfg = ModelConfig::new(
            family,
            self.parse_as("heads")?,
            self.parse_as("lnf")?,
            self.parse_as("d_model")?,
            self.parse_as("n_factors")?,
            self.parse_as("n_stocks")?,
        )
        .with_name(self.raw("name")?)
        .with_seed(self.parse_as("seed")?);
        cfg.latent_fraction = self.float("latent_fraction")?;
        cfg.pretrain_out_dim = self.parse_as("pretrain_out_dim")?;
        cfg.n_blocks = self.parse_as("n_blocks")?;
        cfg.scale = match self.raw("scale")? {
            "head" => ScaleMode::HeadWidth,
            "model" => ScaleMode::ModelWidth,
            other => return Err(Error::Checkpoint(format!("unknown scale `{other}`"))),
        };
        cfg.cross_mask = match self.raw("cross_mask")? {
            "causal" => CrossMask::Causal,
            "full" => CrossMask::Full,
            other => return Err(Error::Checkpoint(format!("unknown cross mask `{other}`"))),
        };
        cfg.finetune_pretrain = self.parse_as("finetune_pretrain")?;
        cfg.ln_epsilon = self.float("ln_epsilon")?;
        Ok(cfg)
    }

    fn meta(&self) -> Result<TrainingMeta> {
        Ok(TrainingMeta {
            seed: self.parse_as("meta.seed")?,
            epochs_run: self.parse_as("meta.epochs_run")?,
            best_epoch: self.parse_as("meta.best_epoch")?,
            best_val_loss: self.opt_float("meta.best_val_loss")?,
            pretrain_loss: self.opt_float("meta.pretrain_loss")?,
        })
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-UTF-8 text in checkpoint".into()))
}

pub fn write_checkpoint<W: Write>(model: &TrainedModel, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    let head = header(model);
    write_u32(w, head.len() as u32)?;
    w.write_all(head.as_bytes())?;
    write_u32(w, model.store.len() as u32)?;
    for p in model.store.iter() {
        write_u32(w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        write_u64(w, p.value.rows() as u64)?;
        write_u64(w, p.value.cols() as u64)?;
        w.write_all(&[u8::from(p.frozen)])?;
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<TrainedModel> {
    let magic: [u8; 8] = read_array(r)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let head_len = read_u32(r)? as usize;
    let head = Header::parse(&read_string(r, head_len)?)?;
    let mut model = build_model(&head.config()?)?;
    model.meta = head.meta()?;
    let count = read_u32(r)? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} parameters, the configured model has {}",
            model.store.len()
        )));
    }
    let mut store: ParamStore = model.store.clone();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let name = read_string(r, name_len)?;
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        let frozen = read_array::<_, 1>(r)?[0] != 0;
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if store.get(id).shape() != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` is {rows}x{cols}, model expects {:?}",
                store.get(id).shape()
            )));
        }
        for v in store.get_mut(id).data_mut() {
            *v = f64::from_le_bytes(read_array(r)?);
        }
        store.param_mut(id).frozen = frozen;
    }
    model.replace_store(store);
    Ok(model)
}

pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut cfg = ModelConfig::new(ModelFamily::PretrainedTransformer, 2, true, 6, 4, 3).with_seed(17);
        cfg.cross_mask = CrossMask::Full;
        cfg.ln_epsilon = 1e-6;
        let mut model = build_model(&cfg).unwrap();
        model.meta.best_val_loss = Some(0.123456789);
        model.meta.best_epoch = 4;
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.meta, model.meta);
        for (a, b) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.frozen, b.frozen);
            assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let x = Tensor::filled(5, 4, 0.2);
        let lag = Tensor::filled(5, 3, 0.01);
        let p = model.forward(&x, Some(&lag)).unwrap();
        let q = back.forward(&x, Some(&lag)).unwrap();
        assert!(p.data().iter().zip(q.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(matches!(read_checkpoint(&mut &b"NOTACKPT"[..]), Err(Error::Checkpoint(_))));
        let model = build_model(&ModelConfig::new(ModelFamily::Sert, 1, false, 4, 2, 2)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint(&mut buf.as_slice()), Err(Error::Checkpoint(_))));
    }
}
