//! Binary checkpoints: a JSON header with a named parameter manifest followed
//! by a flat little-endian f32 payload.
//!
//! ```text
//! "OKTCKPT\0" | u32 version | u64 header length | header JSON | payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{CheckpointError, ModelError};
use crate::module::Module;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"OKTCKPT\0";
pub const VERSION: u32 = 1;

/// Manifest record of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

impl ParamRecord {
    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * 4
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
    params: Vec<ParamRecord>,
}

/// A named set of f32 parameters plus the config and free-form metadata
/// (task spec, vocabulary) needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: ModelConfig,
    pub meta: serde_json::Value,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_module<T: Scalar, M: Module<T>>(
        kind: &str,
        config: &ModelConfig,
        meta: serde_json::Value,
        model: &M,
    ) -> Self {
        let params = model
            .named_params()
            .into_iter()
            .map(|(n, t)| {
                let mut c = t.cast::<f32>();
                c.requires_grad = false;
                (n, c)
            })
            .collect();
        Self {
            kind: kind.to_string(),
            config: config.clone(),
            meta,
            params,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn manifest(&self) -> Vec<ParamRecord> {
        let mut offset = 0;
        self.params
            .iter()
            .map(|(name, t)| {
                let r = ParamRecord {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += r.byte_len();
                r
            })
            .collect()
    }

    /// Copies every parameter of `model` from the checkpoint, by name. The
    /// checkpoint must hold exactly the model's parameters.
    pub fn apply_to<T: Scalar, M: Module<T>>(&self, model: &mut M) -> Result<(), ModelError> {
        let mut err = None;
        let mut seen = 0;
        model.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.get(name) {
                None => err = Some(ModelError::MissingParameter(name.to_string())),
                Some(src) if src.shape() != t.shape() => {
                    err = Some(ModelError::ParameterShape {
                        name: name.to_string(),
                        expected: t.shape().to_vec(),
                        found: src.shape().to_vec(),
                    })
                }
                Some(src) => {
                    for (d, s) in t.data_mut().iter_mut().zip(src.data()) {
                        *d = T::of_f32(*s);
                    }
                    seen += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != self.params.len() {
            return Err(ModelError::Config(format!(
                "checkpoint holds {} parameters, model uses {seen}",
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            params: self.manifest(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload_len: usize = header.params.iter().map(ParamRecord::byte_len).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if header_len > body.len() {
            return Err(CheckpointError::Corrupt(
                "header runs past end of file".into(),
            ));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])?;
        let payload = &body[header_len..];

        let mut expected_offset = 0;
        let mut params = Vec::with_capacity(header.params.len());
        for r in &header.params {
            if r.offset != expected_offset {
                return Err(CheckpointError::Corrupt(format!(
                    "parameter `{}` at offset {}, expected {expected_offset}",
                    r.name, r.offset
                )));
            }
            let end = r.offset + r.byte_len();
            if end > payload.len() {
                return Err(CheckpointError::Corrupt(format!(
                    "parameter `{}` runs past end of payload",
                    r.name
                )));
            }
            let data: Vec<f32> = payload[r.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(&r.shape, data)
                .map_err(|e| CheckpointError::Corrupt(format!("parameter `{}`: {e}", r.name)))?;
            params.push((r.name.clone(), t));
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset
            )));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
