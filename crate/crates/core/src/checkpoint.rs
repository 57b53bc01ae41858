//! `.lnkc` model checkpoints: every trainable tensor by name and shape with
//! f32 payloads, plus an echo of the model and training configuration.
//!
//! ```text
//! magic        4 bytes  "LNKC"
//! version      u32      1
//! header       u32 length + UTF-8 JSON {model, train, corpus_seed}
//! n_tensors    u32
//! n_tensors × { name (u32 length + UTF-8), ndim u32, dims u32…, f32 payload }
//! ```
//!
//! A checkpoint's identity is the SHA-256 of its bytes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{put_f32s, put_str, put_u32, Cursor};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"LNKC";
pub const VERSION: u32 = 1;

pub type Hash = [u8; 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    corpus_seed: u64,
}

/// A trained model with the settings that produced it.
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub corpus_seed: u64,
}

pub fn hash_bytes(bytes: &[u8]) -> Hash {
    Sha256::digest(bytes).into()
}

pub fn hex(hash: &Hash) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.config().clone(),
            train: self.train.clone(),
            corpus_seed: self.corpus_seed,
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        let io = |e: std::io::Error| Error::Format(e.to_string());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &json, "header").map_err(io)?;
        let specs = self.model.registry().specs();
        put_u32(&mut out, specs.len(), "tensor count").map_err(io)?;
        for spec in specs {
            put_str(&mut out, &spec.name, "tensor name").map_err(io)?;
            put_u32(&mut out, spec.shape.len(), "rank").map_err(io)?;
            for &dim in &spec.shape {
                put_u32(&mut out, dim, "dimension").map_err(io)?;
            }
            let vals: Vec<f32> = self.model.params[spec.range()].iter().map(|&v| v as f32).collect();
            if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("tensor {} holds {bad}", spec.name)));
            }
            put_f32s(&mut out, &vals).map_err(io)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        c.magic(MAGIC)?;
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(Error::Version(format!("unsupported checkpoint version {version}")));
        }
        let json = c.string("header")?;
        let header: Header = serde_json::from_str(&json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        header.model.validate()?;
        let mut model = Model::new(header.model, 0)?;
        let n = c.u32("tensor count")? as usize;
        let expected = model.registry().specs().to_vec();
        if n != expected.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {n} tensors, the {} model has {}",
                model.mode(),
                expected.len()
            )));
        }
        for spec in &expected {
            let name = c.string("tensor name")?;
            if name != spec.name {
                return Err(Error::Shape(format!("expected tensor {}, found {name}", spec.name)));
            }
            let rank = c.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| c.u32("dimension").map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != spec.shape {
                return Err(Error::Shape(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    spec.shape
                )));
            }
            let vals = c.f32s(spec.len(), &name)?;
            for (dst, v) in model.params[spec.range()].iter_mut().zip(vals) {
                *dst = v as f64;
            }
        }
        c.finish()?;
        Ok(Self {
            model,
            train: header.train,
            corpus_seed: header.corpus_seed,
        })
    }

    /// Writes atomically; returns the checkpoint hash.
    pub fn save(&self, path: &Path) -> Result<Hash> {
        let bytes = self.encode()?;
        crate::atomic::write_with(path, |w: &mut dyn Write| w.write_all(&bytes))?;
        Ok(hash_bytes(&bytes))
    }

    pub fn load(path: &Path) -> Result<(Self, Hash)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::decode(&bytes)?, hash_bytes(&bytes)))
    }
}
