//! Checkpoint serialization.
//!
//! Deterministic container: a magic tag, a JSON header (metadata plus the
//! sorted tensor index), then raw little-endian blobs in index order. Saving
//! the same parameters always produces identical bytes, and a load/save round
//! trip is the identity.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"PSNETCK1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: u8,
    pub global_step: usize,
    pub config: ModelConfig,
    pub rng_seed: u64,
    /// ChaCha word position of the training stream, for exact resume.
    pub rng_word_pos: u128,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    /// "param" or "buffer".
    kind: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_from_bytes(bytes: &[u8], dtype: &str, shape: &[usize]) -> Result<Tensor> {
    let dev = Device::Cpu;
    let t = match dtype {
        "f32" => {
            let vals: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(vals, shape, &dev)?
        }
        "f64" => {
            let vals: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(vals, shape, &dev)?
        }
        other => return Err(Error::Checkpoint(format!("unknown dtype '{other}'"))),
    };
    Ok(t)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blobs: Vec<Vec<u8>> = Vec::new();
    for (kind, list) in [("param", store.trainable()), ("buffer", store.state_buffers())] {
        for (name, var) in list {
            let t = var.as_tensor();
            tensors.push(TensorEntry {
                name,
                kind: kind.to_string(),
                dtype: dtype_name(t.dtype())?.to_string(),
                shape: t.dims().to_vec(),
            });
            blobs.push(tensor_bytes(t)?);
        }
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors,
    })?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header.len() as u64).to_le_bytes())?;
    file.write_all(&header)?;
    for blob in &blobs {
        file.write_all(blob)?;
    }
    Ok(())
}

pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    /// Parameters and buffers in one flat name space.
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut file = std::fs::File::open(path)
        .map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a psnet checkpoint",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let elem = entry.shape.iter().product::<usize>();
        let width = if entry.dtype == "f32" { 4 } else { 8 };
        let mut bytes = vec![0u8; elem * width];
        file.read_exact(&mut bytes)?;
        tensors.insert(
            entry.name.clone(),
            tensor_from_bytes(&bytes, &entry.dtype, &entry.shape)?,
        );
    }
    Ok(LoadedCheckpoint {
        meta: header.meta,
        tensors,
    })
}

/// The compatibility contract for loading parameters into a live model.
pub fn check_compatible(loaded: &CheckpointMeta, cfg: &ModelConfig) -> Result<()> {
    if loaded.config.decoder_width != cfg.decoder_width {
        return Err(Error::CheckpointIncompatible(format!(
            "decoder_width {} vs {}",
            loaded.config.decoder_width, cfg.decoder_width
        )));
    }
    if loaded.config.backbone != cfg.backbone {
        return Err(Error::CheckpointIncompatible(format!(
            "backbone '{}' vs '{}'",
            loaded.config.backbone, cfg.backbone
        )));
    }
    if loaded.config.backbone == "tiny" && loaded.config.tiny_width != cfg.tiny_width {
        return Err(Error::CheckpointIncompatible(format!(
            "tiny_width {} vs {}",
            loaded.config.tiny_width, cfg.tiny_width
        )));
    }
    Ok(())
}
