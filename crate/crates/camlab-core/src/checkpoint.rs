//! Versioned model checkpoint container.
//!
//! Layout: the magic string `CAMLAB1`, a little-endian u64 byte length,
//! a JSON header (version, model config, training metadata, tensor
//! directory with shapes and byte offsets), then each tensor's payload as
//! little-endian 64-bit floats in directory order.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 7] = b"CAMLAB1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainMeta {
    pub epochs: usize,
    pub lambda_ce: f64,
    pub lambda_sal: f64,
    pub seed: u64,
    /// Free-form tag of the training regime ("plain", "mask", "sham", ...).
    pub regime: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    meta: TrainMeta,
    directory: Vec<DirEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub meta: TrainMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: TrainMeta) -> Checkpoint {
        let tensors = model
            .param_names()
            .into_iter()
            .zip(model.params().into_iter().cloned())
            .collect();
        Checkpoint {
            version: FORMAT_VERSION,
            config: model.config.clone(),
            meta,
            tensors,
        }
    }

    /// Rebuild a model, checking that the directory matches the config's
    /// parameter layout exactly.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::build(self.config.clone())?;
        let names = model.param_names();
        if names.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, config implies {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for ((want_name, slot), (name, tensor)) in
            names.iter().zip(model.params_mut()).zip(&self.tensors)
        {
            if want_name != name || slot.shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "checkpoint entry {} {:?} does not match expected {} {:?}",
                    name,
                    tensor.shape(),
                    want_name,
                    slot.shape()
                )));
            }
            *slot = tensor.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut directory = Vec::new();
        let mut offset = 0u64;
        for (name, tensor) in &self.tensors {
            directory.push(DirEntry {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                offset,
            });
            offset += (tensor.numel() * 8) as u64;
        }
        let header = Header {
            version: self.version,
            config: self.config.clone(),
            meta: self.meta.clone(),
            directory,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Format(format!("header encode: {}", e)))?;
        let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + header_json.len() + offset as usize);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        for (_, tensor) in &self.tensors {
            for v in tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::decode(&bytes).map_err(|msg| Error::Format(format!("{}: {}", path.display(), msg)))
    }

    fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err("file too short for header".into());
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err("bad magic bytes".into());
        }
        let mut len8 = [0u8; 8];
        len8.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let header_len = u64::from_le_bytes(len8) as usize;
        let header_start = MAGIC.len() + 8;
        let payload_start = header_start + header_len;
        if payload_start > bytes.len() {
            return Err("corrupt header length".into());
        }
        let header: Header = serde_json::from_slice(&bytes[header_start..payload_start])
            .map_err(|e| format!("header decode: {}", e))?;
        if header.version != FORMAT_VERSION {
            return Err(format!(
                "unsupported checkpoint version {} (supported: {})",
                header.version, FORMAT_VERSION
            ));
        }
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(header.directory.len());
        for entry in &header.directory {
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + numel * 8;
            if end > payload.len() {
                return Err(format!(
                    "truncated tensor payload for {} (need {} bytes, have {})",
                    entry.name,
                    end,
                    payload.len()
                ));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| e.to_string())?;
            tensors.push((entry.name.clone(), tensor));
        }
        Ok(Checkpoint {
            version: header.version,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }
}

/// Save a model with its training metadata.
pub fn save_model(model: &Model, meta: TrainMeta, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, meta).save(path)
}

/// Load a model back from a checkpoint file.
pub fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::load(path)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn toy() -> Model {
        Model::build(ModelConfig::new(3, 77)).unwrap()
    }

    #[test]
    fn round_trip_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = toy();
        save_model(&model, TrainMeta::default(), &path).unwrap();
        let back = load_model(&path).unwrap();
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(a.shape(), b.shape());
            // Bit-level comparison.
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&toy(), TrainMeta::default(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{}", err);
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ckpt = Checkpoint::from_model(&toy(), TrainMeta::default());
        ckpt.version = 99;
        ckpt.save(&path).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("unsupported checkpoint version"), "{}", err);
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&toy(), TrainMeta::default(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("truncated tensor payload"), "{}", err);
    }
}
