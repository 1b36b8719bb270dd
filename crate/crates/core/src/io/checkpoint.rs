use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};
use crate::train::{HeadKind, Scope};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Downstream head stored alongside the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ClassifierMeta {
    pub scope: Scope,
    pub head: HeadKind,
    pub classes: Vec<String>,
}

/// Configuration block of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Epochs completed when the file was written.
    pub epoch: usize,
    #[serde(default)]
    pub classifier: Option<ClassifierMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    /// Fail unless the stored model configuration equals `expected`, naming
    /// the differing keys.
    pub fn expect_model(&self, expected: &ModelConfig) -> Result<()> {
        if &self.config.model == expected {
            return Ok(());
        }
        let ours = serde_json::to_value(&self.config.model)?;
        let theirs = serde_json::to_value(expected)?;
        let keys: Vec<String> = ours
            .as_object()
            .into_iter()
            .flatten()
            .filter(|(k, v)| theirs.get(k.as_str()) != Some(v))
            .map(|(k, v)| format!("{k} (checkpoint {v}, requested {})", theirs[k.as_str()]))
            .collect();
        Err(Error::ConfigMismatch(keys.join(", ")))
    }

    /// Little-endian container: magic, version, JSON config block, then the
    /// tensors sorted by name.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)?;
        let mut out = Vec::with_capacity(config.len() + 4 * self.params.numel() + 64);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.trainable as u8);
            let shape = p.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4).map_err(|_| Error::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnknownVersion(version));
        }
        let len = r.u64()? as usize;
        let config: CheckpointConfig = serde_json::from_slice(r.take(len)?)?;
        let count = r.u64()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Truncated)?;
            let trainable = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel.checked_mul(4).ok_or(Error::Truncated)?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(name, Tensor::new(shape, data)?, trainable)?;
        }
        if r.at != bytes.len() {
            return Err(Error::Truncated);
        }
        Ok(Checkpoint { config, params })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated)?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
