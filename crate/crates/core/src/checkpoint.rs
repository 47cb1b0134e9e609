//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   8 bytes   magic "BCNETCKP"
//! 8   u32       format version (currently 1)
//! 12  u32       header length H in bytes
//! 16  H bytes   UTF-8 JSON header (see `Header`)
//! 16+H          payload: scalars of `dtype` width, addressed by element offsets in the header
//! ```
//!
//! The header carries the model config, class-bin count, the SHA-256 of the gamut fixture the
//! model was trained against, the training step, an optional training config, the weight
//! table and optional Adam moments.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{Bcnet, ModelConfig};
use crate::params::{Adam, AdamConfig};
use crate::quantizer::ColorGamut;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"BCNETCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 4],
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    lr: f64,
    step: u64,
    /// `(param name, first moment offset, second moment offset)`; shapes follow the weight.
    moments: Vec<(String, usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    bins: usize,
    gamut_sha256: String,
    step: u64,
    train_config: Option<serde_json::Value>,
    tensors: Vec<Entry>,
    optimizer: Option<OptimizerHeader>,
}

/// A model plus its provenance and optional optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Bcnet<T>,
    pub gamut_sha256: String,
    pub step: u64,
    pub train_config: Option<serde_json::Value>,
    pub optimizer: Option<Adam<T>>,
}

fn dtype_name<T: Scalar>() -> &'static str {
    if T::BYTES == 4 {
        "f32"
    } else {
        "f64"
    }
}

fn push<T: Scalar>(payload: &mut Vec<u8>, t: &Tensor<T>) -> usize {
    let offset = payload.len() / T::BYTES;
    for &v in t.data() {
        let v = v.to_f64_lossy();
        if T::BYTES == 4 {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        } else {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    offset
}

fn read<T: Scalar>(payload: &[u8], offset: usize, shape: Shape) -> Result<Tensor<T>> {
    let start = offset * T::BYTES;
    let end = start + shape.numel() * T::BYTES;
    let bytes = payload
        .get(start..end)
        .ok_or_else(|| Error::Checkpoint(format!("payload truncated at element {offset}")))?;
    let data = bytes
        .chunks_exact(T::BYTES)
        .map(|c| {
            let v = if T::BYTES == 4 {
                f32::from_le_bytes(c.try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(c.try_into().unwrap())
            };
            T::from_f64(v).unwrap_or_else(T::nan)
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Short content id: first 16 hex digits of the SHA-256 of the encoded checkpoint.
pub fn model_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: Bcnet<T>, gamut: &ColorGamut) -> Self {
        Checkpoint { model, gamut_sha256: gamut.fingerprint(), step: 0, train_config: None, optimizer: None }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let params = self.model.params();
        let tensors = params
            .iter()
            .map(|(name, t)| Entry { name: name.to_string(), shape: t.shape().0, offset: push(&mut payload, t) })
            .collect();
        let optimizer = self.optimizer.as_ref().map(|opt| OptimizerHeader {
            config: opt.config,
            lr: opt.lr,
            step: opt.step,
            moments: opt
                .moments()
                .map(|(id, m, v)| (params.name(id).to_string(), push(&mut payload, m), push(&mut payload, v)))
                .collect(),
        });
        let header = Header {
            dtype: dtype_name::<T>().into(),
            model: *self.model.config(),
            bins: self.model.bins(),
            gamut_sha256: self.gamut_sha256.clone(),
            step: self.step,
            train_config: self.train_config.clone(),
            tensors,
            optimizer,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a checkpoint and checks it against the runtime gamut.
    pub fn from_bytes(bytes: &[u8], gamut: &ColorGamut) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16 + hlen).ok_or_else(|| bad("header truncated"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.dtype != dtype_name::<T>() {
            return Err(Error::Checkpoint(format!("stored as {}, requested {}", header.dtype, dtype_name::<T>())));
        }
        let found = gamut.fingerprint();
        if header.gamut_sha256 != found {
            return Err(Error::GamutMismatch { expected: header.gamut_sha256, found });
        }
        if header.bins != gamut.len() {
            return Err(Error::Checkpoint(format!("{} bins vs gamut of {}", header.bins, gamut.len())));
        }
        let payload = &bytes[16 + hlen..];
        let mut model = Bcnet::new(header.model, header.bins, 0)?;
        if header.tensors.len() != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model expects {}",
                header.tensors.len(),
                model.params().len()
            )));
        }
        for e in &header.tensors {
            let t = read(payload, e.offset, Shape(e.shape))?;
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("non-finite weights in {}", e.name)));
            }
            model.params_mut().assign(&e.name, t)?;
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let mut adam = Adam::new(o.config);
                adam.lr = o.lr;
                adam.step = o.step;
                for (name, mo, vo) in o.moments {
                    let id = model.params().id(&name).ok_or_else(|| Error::Checkpoint(format!("moment for unknown {name}")))?;
                    let shape = model.params().get(id).shape();
                    adam.set_moments(id, read(payload, mo, shape)?, read(payload, vo, shape)?);
                }
                Some(adam)
            }
            None => None,
        };
        Ok(Checkpoint {
            model,
            gamut_sha256: header.gamut_sha256,
            step: header.step,
            train_config: header.train_config,
            optimizer,
        })
    }

    /// Writes via a temporary file and rename so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, gamut: &ColorGamut) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, gamut).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
