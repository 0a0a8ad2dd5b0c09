//! Checkpoint files.
//!
//! ```text
//! "LFADSCKP"            8-byte magic
//! u32 LE                format version
//! u64 LE                header length in bytes
//! header                UTF-8 JSON: config hash, model and trainer configs,
//!                       train state, parameter layout
//! f64 LE × P            parameters, canonical order
//! f64 LE × P            Adam first moments
//! f64 LE × P            Adam second moments
//! u32 LE                CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use lfads_core::model::{LfadsConfig, ModelParams};
use lfads_core::optim::Adam;
use lfads_core::rng::stream;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset_io::{f64_from_le, f64_to_le};
use crate::error::{ForgeError, Result};
use crate::trainer::{TrainState, TrainerConfig};

pub const MAGIC: &[u8; 8] = b"LFADSCKP";
pub const VERSION: u32 = 1;

/// SHA-256 (hex) of the model configuration's canonical JSON encoding.
pub fn config_hash(cfg: &LfadsConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serialises");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config_hash: String,
    model: LfadsConfig,
    trainer: TrainerConfig,
    state: TrainState,
    layout: Vec<LayoutEntry>,
    num_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LfadsConfig,
    pub trainer: TrainerConfig,
    pub state: TrainState,
    pub params: ModelParams,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let layout = self
            .params
            .tensors()
            .into_iter()
            .map(|(name, t)| LayoutEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect();
        let header = Header {
            config_hash: config_hash(&self.model),
            model: self.model.clone(),
            trainer: self.trainer.clone(),
            state: self.state.clone(),
            layout,
            num_params: self.params.num_params(),
        };
        let json = serde_json::to_vec(&header).map_err(ForgeError::json("checkpoint header"))?;
        let mut out = Vec::with_capacity(json.len() + 24 * header.num_params + 24);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend(f64_to_le(&self.params.to_flat()));
        out.extend(f64_to_le(&self.adam.m));
        out.extend(f64_to_le(&self.adam.v));
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses and verifies a checkpoint. With `expected`, the stored model
    /// configuration must hash identically.
    pub fn from_bytes(bytes: &[u8], path: &Path, expected: Option<&LfadsConfig>) -> Result<Self> {
        let bad = |reason: &str| ForgeError::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(bad("checksum mismatch (file corrupt or truncated)"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("header length out of range"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])
            .map_err(ForgeError::json(format!("{}: checkpoint header", path.display())))?;
        let found = config_hash(&header.model);
        if found != header.config_hash {
            return Err(bad("header config hash does not match its config"));
        }
        if let Some(exp) = expected {
            let want = config_hash(exp);
            if want != found {
                return Err(ForgeError::ConfigMismatch { expected: want, found });
            }
        }
        let p = header.num_params;
        let blocks = &body[header_end..];
        if blocks.len() != 3 * 8 * p {
            return Err(bad("parameter block size mismatch"));
        }
        let flat = f64_from_le(blocks).expect("length checked");
        let mut params = ModelParams::init(&header.model, &mut stream(0, &[]))?;
        let layout: Vec<LayoutEntry> = params
            .tensors()
            .into_iter()
            .map(|(name, t)| LayoutEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect();
        if layout != header.layout || params.num_params() != p {
            return Err(bad("parameter layout does not match the model config"));
        }
        params.load_flat(&flat[..p])?;
        let adam = Adam {
            m: flat[p..2 * p].to_vec(),
            v: flat[2 * p..].to_vec(),
            t: header.state.step,
        };
        Ok(Self {
            model: header.model,
            trainer: header.trainer,
            state: header.state,
            params,
            adam,
        })
    }

    /// Writes atomically (temp file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(ForgeError::io(&tmp))?;
        fs::rename(&tmp, path).map_err(ForgeError::io(path))
    }

    pub fn load(path: &Path, expected: Option<&LfadsConfig>) -> Result<Self> {
        let bytes = fs::read(path).map_err(ForgeError::io(path))?;
        Self::from_bytes(&bytes, path, expected)
    }
}
