//! Single-file checkpoints: an 8-byte magic, the little-endian length of a
//! JSON header, the header, then every parameter as little-endian `f32` in
//! the header's declared order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::LabelingScheme;
use crate::model::transformer::BACKBONE_PREFIXES;
use crate::model::{Classifier, ModelConfig, ModelKind};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VXCKPT01";

pub const SCRATCH: &str = "scratch";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// What a checkpoint records besides the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    /// `"scratch"` or `"pretrained:<path>"`.
    pub backbone_init: String,
    pub scheme: LabelingScheme,
    /// Subjects whose scans were used for training; evaluation refuses them.
    pub training_subjects: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: CheckpointMeta,
    params: Vec<ParamRecord>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, meta: &CheckpointMeta, model: &dyn Classifier) -> Result<()> {
    let path = path.as_ref();
    if meta.model != model.config() {
        return Err(Error::Validation(
            "checkpoint config does not describe the model".into(),
        ));
    }
    let entries = model.store().entries();
    let header = Header {
        meta: meta.clone(),
        params: entries
            .iter()
            .map(|e| ParamRecord {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let blob_len: usize = entries.iter().map(|e| e.value.len()).sum();
    let mut bytes = Vec::with_capacity(16 + json.len() + 4 * blob_len);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for e in entries {
        for &v in e.value.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Validation(format!("bad checkpoint {}: {}", path.display(), reason.into()))
}

/// Rebuild the model described by the header and load its weights.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointMeta, Box<dyn Classifier>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "missing magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    let mut model = header.meta.model.build(header.meta.seed)?;
    let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let blob = &bytes[header_end..];
    if blob.len() != 4 * expected {
        return Err(corrupt(
            path,
            format!("expected {} weight bytes, found {}", 4 * expected, blob.len()),
        ));
    }
    let store = model.store_mut();
    if store.len() != header.params.len() {
        return Err(corrupt(path, "parameter list does not match the architecture"));
    }
    let mut offset = 0;
    for record in &header.params {
        let id = store
            .id(&record.name)
            .ok_or_else(|| corrupt(path, format!("unknown parameter {}", record.name)))?;
        let n: usize = record.shape.iter().product();
        let values = blob[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        store.set(id, Tensor::new(record.shape.clone(), values)?)?;
        offset += 4 * n;
    }
    Ok((header.meta, model))
}

/// Initialize a transformer's stem and backbone from another transformer
/// checkpoint. Returns the number of tensors copied; the rest of the model
/// keeps its own initialization and everything stays trainable.
pub fn load_pretrained_backbone(model: &mut dyn Classifier, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    if model.kind() != ModelKind::Transformer {
        return Err(Error::Config(format!(
            "a pretrained backbone only applies to the transformer, not {}",
            model.kind()
        )));
    }
    let (_, source) = load_checkpoint(path)?;
    if source.kind() != ModelKind::Transformer {
        return Err(corrupt(
            path,
            format!("holds a {} model, not a transformer", source.kind()),
        ));
    }
    let mut copied = 0;
    for prefix in BACKBONE_PREFIXES {
        copied += model.store_mut().copy_prefix_from(source.store(), prefix)?;
    }
    Ok(copied)
}
