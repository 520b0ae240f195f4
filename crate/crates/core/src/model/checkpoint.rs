//! Binary checkpoint: magic, JSON header, little-endian `f32` payload.

use super::{class_order, Architecture, Layer, LatentCodebook, ModelError, ModelState};
use crate::autodiff::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"S2HCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("malformed checkpoint header")]
    Header(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint class order {found:?} differs from {expected:?}; the file was written for another label set")]
    ClassOrder { found: Vec<String>, expected: Vec<String> },
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Trained network plus the training-set latent codes.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub codebook: LatentCodebook,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    architecture: Architecture,
    class_order: Vec<String>,
    latent_dim: usize,
    lambda: f64,
    tensors: Vec<TensorEntry>,
    latent_ids: Vec<String>,
}

impl Checkpoint {
    /// The same checkpoint with every value rounded to stored (`f32`) precision.
    pub fn quantized(&self) -> Checkpoint {
        let mut out = self.clone();
        for s in out.model.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        for c in &mut out.codebook.codes {
            c.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, mut w: impl Write) -> Result<(), CheckpointError> {
    let model = &ckpt.model;
    let params = model.named_params();
    if ckpt.codebook.codes.iter().any(|c| c.len() != model.latent_dim()) {
        return Err(CheckpointError::Inconsistent("latent code length differs from the model".into()));
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        architecture: model.arch().clone(),
        class_order: class_order(),
        latent_dim: model.latent_dim(),
        lambda: ckpt.codebook.lambda,
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        latent_ids: ckpt.codebook.ids.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let values = params
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .chain(ckpt.codebook.codes.iter().flatten());
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(header.format_version));
    }
    if header.class_order != class_order() {
        return Err(CheckpointError::ClassOrder {
            found: header.class_order,
            expected: class_order(),
        });
    }
    if header.latent_dim != header.architecture.latent_dim {
        return Err(CheckpointError::Inconsistent("latent_dim disagrees with architecture".into()));
    }
    // The template fixes which blocks exist and their order.
    let template = ModelState::init(header.architecture.clone(), 0)?;
    let expected: Vec<(String, Vec<usize>)> = template
        .named_params()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    let found: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if expected != found {
        return Err(CheckpointError::Inconsistent("tensor table does not match the architecture".into()));
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let n_params: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let n_values = n_params + header.latent_ids.len() * header.latent_dim;
    if payload.len() != 4 * n_values {
        return Err(CheckpointError::Inconsistent(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            4 * n_values
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };

    let layers = template
        .layers()
        .iter()
        .map(|l| {
            let mut read = |t: &Tensor| Tensor::from_vec(t.shape(), take(t.len()));
            Layer {
                w_h: l.w_h.as_ref().map(&mut read),
                w_x: l.w_x.as_ref().map(&mut read),
                w_z: l.w_z.as_ref().map(&mut read),
                b: read(&l.b),
            }
        })
        .collect();
    let model = ModelState::from_layers(header.architecture, layers)?;
    let codes = header.latent_ids.iter().map(|_| take(header.latent_dim)).collect();
    Ok(Checkpoint {
        model,
        codebook: LatentCodebook {
            ids: header.latent_ids,
            codes,
            lambda: header.lambda,
        },
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    write_checkpoint(ckpt, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
