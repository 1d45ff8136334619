//! Single-file checkpoints.
//!
//! Layout: magic `PCSACKPT`, a `u64` LE manifest length, the TOML manifest,
//! then every tensor listed in the manifest as little-endian `f32`, in order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StepRecord;
use crate::tensor::{Shape, Volume};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"PCSACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dims: [usize; 5],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub fingerprint: String,
    pub step: u64,
    pub generator_adam_t: u64,
    pub discriminator_adam_t: u64,
    /// The resolved run configuration the checkpoint was trained with.
    pub config: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub history: Vec<StepRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<Volume>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let text = toml::to_string(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for t in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.into());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing PCSACKPT magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let text = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| corrupt("truncated manifest"))?;
        let text = std::str::from_utf8(text).map_err(|_| corrupt("manifest is not UTF-8"))?;
        let manifest: CheckpointManifest =
            toml::from_str(text).map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::CorruptCheckpoint(format!("unsupported format version {}", manifest.format_version)));
        }
        let mut payload = &bytes[16 + len..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let shape = Shape::from_dims(entry.dims).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
            let n = shape.numel() * 4;
            if payload.len() < n {
                return Err(Error::CorruptCheckpoint(format!("payload ends inside tensor {}", entry.name)));
            }
            let data = payload[..n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(Volume::from_vec(shape, data)?);
            payload = &payload[n..];
        }
        if !payload.is_empty() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }

    /// Tensor by manifest name.
    pub fn tensor(&self, name: &str) -> Option<&Volume> {
        self.manifest.tensors.iter().position(|e| e.name == name).map(|i| &self.tensors[i])
    }
}
