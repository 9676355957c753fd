//! Parameter checkpoints.
//!
//! ```text
//! "PPMK"  u8 version  u32 count
//! count x { u32 name_len, name (utf-8), u32 blob_len, PPMT blob }
//! ```
//!
//! The model configuration is stored as TOML text in a u8 entry named
//! [`CONFIG_ENTRY`]. Entries are written in name order.

use std::fs;
use std::path::Path;

use super::tensor_file::{decode_tensor, encode_tensor};
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PPMK";
pub const CHECKPOINT_VERSION: u8 = 1;
pub const CONFIG_ENTRY: &str = "__config__";

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn push_entry(out: &mut Vec<u8>, name: &str, blob: &[u8]) {
    push_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    push_u32(out, blob.len());
    out.extend_from_slice(blob);
}

/// Serialize `store` together with the configuration that produced it.
pub fn write_checkpoint(store: &ParamStore<f32>, config: &ModelConfig) -> Result<Vec<u8>> {
    let toml = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    let cfg = Tensor::from_vec(&[toml.len()], toml.into_bytes())?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    push_u32(&mut out, store.len() + 1);
    push_entry(&mut out, CONFIG_ENTRY, &encode_tensor(&cfg));
    for (name, t) in store.iter() {
        push_entry(&mut out, name, &encode_tensor(t));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format { offset: self.bytes.len() as u64, reason: "truncated checkpoint".into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Parse a checkpoint and check every parameter against the stored
/// configuration.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamStore<f32>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, reason: "not a checkpoint (bad magic)".into() });
    }
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format { offset: 4, reason: format!("unsupported checkpoint version {version}") });
    }
    let count = r.u32()?;
    let mut config = None;
    let mut store = ParamStore::default();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format { offset: at as u64, reason: "entry name is not utf-8".into() })?
            .to_string();
        let len = r.u32()?;
        let blob = r.take(len)?;
        if name == CONFIG_ENTRY {
            let text = decode_tensor::<u8>(blob)?.into_data();
            let text = String::from_utf8(text).map_err(|_| Error::Checkpoint("config entry is not utf-8".into()))?;
            let cfg: ModelConfig = toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
            config = Some(cfg);
        } else {
            store
                .insert(&name, decode_tensor::<f32>(blob)?)
                .map_err(|_| Error::Checkpoint(format!("duplicate entry {name:?}")))?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format { offset: r.pos as u64, reason: "trailing bytes after last entry".into() });
    }
    let config = config.ok_or_else(|| Error::Checkpoint("no stored model config".into()))?;
    check_store(&store, &config)?;
    Ok((config, store))
}

fn check_store(store: &ParamStore<f32>, config: &ModelConfig) -> Result<()> {
    let specs = config.param_specs()?;
    for spec in &specs {
        match store.get(&spec.name) {
            None => return Err(Error::Checkpoint(format!("missing parameter {:?}", spec.name))),
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?} has shape {:?}, config expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )))
            }
            Some(_) => {}
        }
    }
    if store.len() != specs.len() {
        let extra = store.names().find(|n| !specs.iter().any(|s| s.name == *n)).unwrap_or("?");
        return Err(Error::Checkpoint(format!("unexpected parameter {extra:?}")));
    }
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore<f32>, config: &ModelConfig) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_checkpoint(store, config)?).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint that must have been produced with `expected`.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, store) = read_checkpoint(&bytes)?;
    if &config != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained with a different model config: stored {config:?}, requested {expected:?}"
        )));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { base_channels: 8, depths: vec![1, 1, 1, 1], num_classes: 3, state_dim: 4, ..Default::default() }
    }

    fn store(cfg: &ModelConfig, seed: u64) -> ParamStore<f32> {
        ParamStore::init(&cfg.param_specs().unwrap(), seed).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = tiny();
        let s = store(&cfg, 3);
        let bytes = write_checkpoint(&s, &cfg).unwrap();
        assert_eq!(&bytes[..4], b"PPMK");
        let (c2, s2) = read_checkpoint(&bytes).unwrap();
        assert_eq!(c2, cfg);
        for (name, t) in s.iter() {
            let u = s2.get(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            assert!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(write_checkpoint(&s2, &c2).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip_and_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ppmk");
        let cfg = tiny();
        save_checkpoint(&path, &store(&cfg, 1), &cfg).unwrap();
        assert_eq!(load_checkpoint(&path, &cfg).unwrap(), store(&cfg, 1));
        let other = ModelConfig { num_classes: 4, ..cfg.clone() };
        assert!(matches!(load_checkpoint(&path, &other), Err(Error::Checkpoint(_))));
        assert!(load_checkpoint(dir.path().join("absent"), &tiny()).unwrap_err().is_io());
    }

    #[test]
    fn shape_mismatch_and_missing_entries() {
        let cfg = tiny();
        let s = store(&cfg, 2);
        let bigger = ModelConfig { num_classes: 5, ..cfg.clone() };
        let bytes = write_checkpoint(&s, &bigger).unwrap();
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Checkpoint(_))));

        let mut partial = ParamStore::default();
        for (name, t) in s.iter().skip(1) {
            partial.insert(name, t.clone()).unwrap();
        }
        let bytes = write_checkpoint(&partial, &cfg).unwrap();
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_container() {
        let cfg = tiny();
        let mut bytes = write_checkpoint(&store(&cfg, 2), &cfg).unwrap();
        let good = bytes.clone();
        bytes[0] = b'X';
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(read_checkpoint(&good[..good.len() - 3]), Err(Error::Format { .. })));
        let mut long = good;
        long.push(0);
        assert!(matches!(read_checkpoint(&long), Err(Error::Format { .. })));
    }
}
