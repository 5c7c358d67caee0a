//! Weights exchange format: a little-endian f32 payload file plus a JSON
//! descriptor (`<stem>.json` next to `<stem>.bin`) declaring family,
//! pretext, input geometry, channel-normalization constants, architecture,
//! and the tensor index. Checkpoints use the same format.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::transformer::TransformerConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangeDescriptor {
    pub format_version: u32,
    pub family: String,
    pub pretext: String,
    pub input_side: usize,
    pub num_layers: usize,
    pub default_layer: usize,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
    pub arch: ArchDescriptor,
    /// Payload filename relative to the descriptor.
    pub payload: String,
    pub payload_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchDescriptor {
    Transformer {
        patch_size: usize,
        width: usize,
        num_heads: usize,
        mlp_hidden: usize,
        in_channels: usize,
    },
    Resnet {
        stem: String,
        stage_blocks: Vec<usize>,
        base_channels: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset_bytes: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

pub struct ExchangeFile {
    pub descriptor: ExchangeDescriptor,
    pub tensors: BTreeMap<String, Vec<f32>>,
}

/// `base` may point at either the descriptor (`.json`) or the payload.
pub fn descriptor_path(base: &Path) -> PathBuf {
    if base.extension().and_then(|e| e.to_str()) == Some("json") {
        base.to_path_buf()
    } else {
        base.with_extension("json")
    }
}

pub fn load(base: &Path) -> Result<ExchangeFile> {
    let desc_path = descriptor_path(base);
    if !desc_path.exists() {
        return Err(Error::config(format!(
            "pretrained weights descriptor not found at {}; pretrained encoders are \
             external assets — export them to the weights exchange format (JSON \
             descriptor + f32 payload, see README \"Pretrained weights\") and point \
             the config at the descriptor",
            desc_path.display()
        )));
    }
    let text = std::fs::read_to_string(&desc_path).map_err(|e| Error::io(&desc_path, e))?;
    let descriptor: ExchangeDescriptor =
        serde_json::from_str(&text).map_err(|e| Error::config(format!(
            "{}: invalid descriptor: {e}",
            desc_path.display()
        )))?;
    if descriptor.format_version != FORMAT_VERSION {
        return Err(Error::config(format!(
            "{}: unsupported format_version {}",
            desc_path.display(),
            descriptor.format_version
        )));
    }

    let payload_path = desc_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&descriptor.payload);
    let bytes = std::fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != descriptor.payload_sha256 {
        return Err(Error::data(format!(
            "{}: payload checksum mismatch (corrupt or stale weights file)",
            payload_path.display()
        )));
    }

    let mut tensors = BTreeMap::new();
    for entry in &descriptor.tensors {
        let end = entry.offset_bytes + entry.len * 4;
        if end > bytes.len() {
            return Err(Error::data(format!(
                "{}: tensor `{}` extends past end of payload",
                payload_path.display(),
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(entry.len);
        for chunk in bytes[entry.offset_bytes..end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        tensors.insert(entry.name.clone(), data);
    }
    Ok(ExchangeFile { descriptor, tensors })
}

/// Write descriptor + payload for a set of named tensors. Tensors are laid
/// out in the order given.
pub fn save(
    base: &Path,
    mut descriptor: ExchangeDescriptor,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<()> {
    let desc_path = descriptor_path(base);
    let payload_path = desc_path.with_extension("bin");
    let mut bytes: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for (name, shape, data) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            offset_bytes: bytes.len(),
            len: data.len(),
            shape: shape.clone(),
        });
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    descriptor.tensors = entries;
    descriptor.payload = payload_path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("weights.bin")
        .to_string();
    descriptor.payload_sha256 = hex::encode(Sha256::digest(&bytes));

    if let Some(parent) = desc_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(&payload_path, &bytes).map_err(|e| Error::io(&payload_path, e))?;
    let json = serde_json::to_string_pretty(&descriptor)
        .map_err(|e| Error::data(e.to_string()))?;
    std::fs::write(&desc_path, json).map_err(|e| Error::io(&desc_path, e))?;
    Ok(())
}

pub fn transformer_arch(cfg: &TransformerConfig) -> ArchDescriptor {
    ArchDescriptor::Transformer {
        patch_size: cfg.patch_size,
        width: cfg.width,
        num_heads: cfg.num_heads,
        mlp_hidden: cfg.mlp_hidden,
        in_channels: cfg.in_channels,
    }
}
