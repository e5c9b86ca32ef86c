//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "SLOTCKPT"
//! version   u32
//! length    u64      byte length of the manifest
//! manifest  JSON     CheckpointManifest
//! payload            arrays back to back, row-major, little-endian
//! ```
//!
//! Array names carry a prefix: `param/` for model parameters, `adam_m/`
//! and `adam_v/` for optimizer moments. The manifest records each array's
//! dtype, shape, offset and length within the payload, and the SHA-256 of
//! the whole payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slotenergy_autograd::{Float, Tensor};

use crate::datasets::atomic_write;
use crate::model::{Model, ModelConfig};
use crate::params::Params;
use crate::training::{AdamState, TrainState};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SLOTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub step: u64,
    pub rng: RngState,
    pub arrays: Vec<ArrayEntry>,
    pub payload_sha256: String,
}

/// A model snapshot, optionally with optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F: Float> {
    pub model: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub params: Params<F>,
    pub adam: Option<AdamState<F>>,
}

impl<F: Float> Checkpoint<F> {
    pub fn from_state(model: &ModelConfig, state: &TrainState<F>, with_optimizer: bool) -> Self {
        Checkpoint {
            model: model.clone(),
            step: state.step,
            seed: state.seed,
            params: state.params.clone(),
            adam: with_optimizer.then(|| state.adam.clone()),
        }
    }

    /// Parameters only, for use outside training.
    pub fn exported(&self) -> Self {
        Checkpoint {
            adam: None,
            ..self.clone()
        }
    }

    /// Restores a training state; missing moments restart at zero.
    pub fn into_train_state(self, model: &Model) -> Result<TrainState<F>> {
        self.params.check_layout(&model.init_params(0))?;
        let adam = match self.adam {
            Some(a) => a,
            None => AdamState::new(&self.params),
        };
        Ok(TrainState {
            params: self.params,
            adam,
            step: self.step,
            seed: self.seed,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut groups: Vec<(&str, &Params<F>)> = vec![("param", &self.params)];
        if let Some(a) = &self.adam {
            groups.push(("adam_m", &a.m));
            groups.push(("adam_v", &a.v));
        }
        let mut payload = Vec::new();
        let mut arrays = Vec::new();
        for (prefix, params) in groups {
            for (name, t) in params.iter() {
                let offset = payload.len() as u64;
                write_le(t.data(), &mut payload);
                arrays.push(ArrayEntry {
                    name: format!("{prefix}/{name}"),
                    dtype: F::DTYPE.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                    nbytes: payload.len() as u64 - offset,
                });
            }
        }
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            step: self.step,
            rng: RngState {
                seed: self.seed,
                step: self.step,
            },
            arrays,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec_pretty(&manifest)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Writes atomically: a crash leaves any previous file intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }
}

fn write_le<F: Float>(data: &[F], out: &mut Vec<u8>) {
    for v in data {
        match F::DTYPE {
            "f32" => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Splits a file into its manifest and payload, validating the header and
/// checksum.
pub fn read_manifest<'a>(bytes: &'a [u8], path: &Path) -> Result<(CheckpointManifest, &'a [u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if len > body.len() {
        return Err(bad(path, "truncated manifest"));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&body[..len])?;
    let payload = &body[len..];
    if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    Ok((manifest, payload))
}

fn decode_array<F: Float>(entry: &ArrayEntry, payload: &[u8], path: &Path) -> Result<Tensor<F>> {
    let width = match entry.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(path, format!("unknown dtype {other} for {}", entry.name))),
    };
    let numel: usize = entry.shape.iter().product();
    if entry.nbytes != (numel * width) as u64 {
        return Err(bad(path, format!("{} declares {} bytes for shape {:?}", entry.name, entry.nbytes, entry.shape)));
    }
    let start = entry.offset as usize;
    let end = start
        .checked_add(entry.nbytes as usize)
        .filter(|&e| e <= payload.len())
        .ok_or_else(|| bad(path, format!("{} lies outside the payload", entry.name)))?;
    let raw = &payload[start..end];
    let data = if width == 4 {
        raw.chunks_exact(4)
            .map(|c| F::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect()
    } else {
        raw.chunks_exact(8)
            .map(|c| F::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect()
    };
    Ok(Tensor::new(entry.shape.clone(), data))
}

pub fn from_bytes<F: Float>(bytes: &[u8], path: &Path) -> Result<Checkpoint<F>> {
    let (manifest, payload) = read_manifest(bytes, path)?;
    let mut params = Params::new();
    let mut m = Params::new();
    let mut v = Params::new();
    for entry in &manifest.arrays {
        let (group, name) = entry
            .name
            .split_once('/')
            .ok_or_else(|| bad(path, format!("array name {} has no group", entry.name)))?;
        let target = match group {
            "param" => &mut params,
            "adam_m" => &mut m,
            "adam_v" => &mut v,
            other => return Err(bad(path, format!("unknown array group {other}"))),
        };
        if target.contains(name) {
            return Err(bad(path, format!("array {} listed twice", entry.name)));
        }
        target.insert(name, decode_array(entry, payload, path)?);
    }
    let model = Model::new(manifest.model.clone())?;
    let reference = model.init_params::<F>(0);
    params
        .check_layout(&reference)
        .map_err(|e| bad(path, e.to_string()))?;
    let adam = if m.is_empty() && v.is_empty() {
        None
    } else {
        m.check_layout(&reference).map_err(|e| bad(path, e.to_string()))?;
        v.check_layout(&reference).map_err(|e| bad(path, e.to_string()))?;
        Some(AdamState { m, v })
    };
    Ok(Checkpoint {
        model: manifest.model,
        step: manifest.step,
        seed: manifest.rng.seed,
        params,
        adam,
    })
}

pub fn load<F: Float>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Writes a parameters-only copy of the checkpoint at `src` to `dst`.
pub fn export(src: &Path, dst: &Path) -> Result<CheckpointManifest> {
    let bytes = fs::read(src).map_err(|e| Error::io(src, e))?;
    let (manifest, _) = read_manifest(&bytes, src)?;
    let out = match manifest.arrays.first().map(|a| a.dtype.as_str()) {
        Some("f64") => from_bytes::<f64>(&bytes, src)?.exported().to_bytes()?,
        _ => from_bytes::<f32>(&bytes, src)?.exported().to_bytes()?,
    };
    atomic_write(dst, &out)?;
    Ok(read_manifest(&out, dst)?.0)
}
