//! Checkpoint files.
//!
//! Layout: an 8-byte magic (`LVCKPT01`), a little-endian u32 header length,
//! a JSON header `{version, config, tensors: [{name, shape}]}`, then raw
//! little-endian f64 data for each tensor in header order. The format is
//! byte-stable for fixed weights, so identical training runs produce
//! identical files.

use super::model::MmaNet;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Arr;
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LVCKPT01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
}

/// Write a model's configuration and weights.
pub fn save_checkpoint(net: &MmaNet, path: &Path) -> Result<()> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: net.cfg.clone(),
        tensors: net
            .params
            .iter()
            .map(|(name, v)| TensorMeta {
                name: name.to_string(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, tensor) in net.params.iter() {
        for v in tensor.iter() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Load a checkpoint back into a freshly built model.
pub fn load_checkpoint(path: &Path) -> Result<MmaNet> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Integrity(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }

    let mut net = MmaNet::new(&header.config, 0)?;
    if header.tensors.len() != net.params.len() {
        return Err(Error::Integrity(format!(
            "checkpoint has {} tensors, model expects {}",
            header.tensors.len(),
            net.params.len()
        )));
    }
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            file.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let arr = Arr::from_shape_vec(IxDyn(&meta.shape), data)
            .map_err(|e| Error::Integrity(format!("tensor {}: {e}", meta.name)))?;
        let id = net.params.id_of(&meta.name).ok_or_else(|| {
            Error::Integrity(format!("unknown tensor {} in checkpoint", meta.name))
        })?;
        net.params.set(id, arr)?;
    }
    Ok(net)
}
