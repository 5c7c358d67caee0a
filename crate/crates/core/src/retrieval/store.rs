//! Persisted embedding store: one little-endian f32 flat payload file plus
//! a JSON index keyed by `(object_id, style, azimuth_deg, layer)`.
//! Re-embedding with unchanged inputs is a no-op via a source content hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{ShapeRecord, SketchView, ViewKey};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::preprocess;
use crate::retrieval::GalleryEmbeddings;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StoreEntry {
    pub object_id: String,
    pub style: String,
    pub azimuth_deg: f64,
    pub layer: usize,
    pub offset_bytes: usize,
    pub dim: usize,
    pub content_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreIndex {
    version: u32,
    source_hash: String,
    entries: Vec<StoreEntry>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    pub source_hash: String,
    entries: Vec<StoreEntry>,
    payload: Vec<f32>,
    lookup: BTreeMap<(String, String, u64, usize), usize>,
}

fn index_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

fn payload_path(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

impl EmbeddingStore {
    fn build_lookup(entries: &[StoreEntry]) -> BTreeMap<(String, String, u64, usize), usize> {
        entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                (
                    (
                        e.object_id.clone(),
                        e.style.clone(),
                        e.azimuth_deg.to_bits(),
                        e.layer,
                    ),
                    i,
                )
            })
            .collect()
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    pub fn get(&self, object_id: &str, style: &str, azimuth_deg: f64, layer: usize) -> Option<&[f32]> {
        let idx = *self.lookup.get(&(
            object_id.to_string(),
            style.to_string(),
            azimuth_deg.to_bits(),
            layer,
        ))?;
        let e = &self.entries[idx];
        let start = e.offset_bytes / 4;
        Some(&self.payload[start..start + e.dim])
    }

    /// Gallery map (object -> view embeddings) for one style and layer.
    pub fn gallery(&self, style: &str, layer: usize) -> GalleryEmbeddings {
        let mut out = GalleryEmbeddings::new();
        for e in &self.entries {
            if e.style != style || e.layer != layer {
                continue;
            }
            let start = e.offset_bytes / 4;
            let values = self.payload[start..start + e.dim].to_vec();
            let key = ViewKey {
                object_id: e.object_id.clone(),
                class_label: String::new(),
                style: e.style.clone(),
                azimuth_deg: e.azimuth_deg,
                zenith_deg: 0.0,
            };
            out.entry(e.object_id.clone()).or_default().push((key, values));
        }
        out
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        if let Some(parent) = base.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut bytes = Vec::with_capacity(self.payload.len() * 4);
        for v in &self.payload {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let p = payload_path(base);
        std::fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
        let index = StoreIndex {
            version: 1,
            source_hash: self.source_hash.clone(),
            entries: self.entries.clone(),
        };
        let json =
            serde_json::to_string_pretty(&index).map_err(|e| Error::data(e.to_string()))?;
        let ip = index_path(base);
        std::fs::write(&ip, json).map_err(|e| Error::io(&ip, e))?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<EmbeddingStore> {
        let ip = index_path(base);
        let text = std::fs::read_to_string(&ip).map_err(|e| Error::io(&ip, e))?;
        let index: StoreIndex = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: invalid index: {e}", ip.display())))?;
        let pp = payload_path(base);
        let bytes = std::fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
        let mut payload = Vec::with_capacity(bytes.len() / 4);
        for chunk in bytes.chunks_exact(4) {
            payload.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        for e in &index.entries {
            let end = e.offset_bytes + e.dim * 4;
            if e.offset_bytes % 4 != 0 || end > bytes.len() {
                return Err(Error::data(format!(
                    "store entry {}/{}/az{} layer {} extends past payload end \
                     (corrupt store?)",
                    e.object_id, e.style, e.azimuth_deg, e.layer
                )));
            }
            let start = e.offset_bytes / 4;
            let digest = hash_f32(&payload[start..start + e.dim]);
            if digest != e.content_hash {
                return Err(Error::data(format!(
                    "store entry {}/{}/az{} layer {} failed its content hash",
                    e.object_id, e.style, e.azimuth_deg, e.layer
                )));
            }
        }
        Ok(EmbeddingStore {
            source_hash: index.source_hash,
            lookup: Self::build_lookup(&index.entries),
            entries: index.entries,
            payload,
        })
    }
}

fn hash_f32(values: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Hash of everything the store contents depend on.
fn source_hash(views: &[&SketchView], encoder: &Encoder, layers: &[usize]) -> String {
    let mut h = Sha256::new();
    h.update(encoder.params_hash().as_bytes());
    for l in layers {
        h.update(l.to_le_bytes());
    }
    for v in views {
        h.update(v.content_hash().as_bytes());
    }
    hex::encode(h.finalize())
}

/// Embed every view of `records` at the requested layers and persist the
/// store at `base`. Views must already be preprocessed; vector payloads are
/// rasterized at the encoder's input side. When a store with an identical
/// source hash exists it is loaded instead (no-op re-run).
pub fn embed_gallery(
    records: &[ShapeRecord],
    encoder: &Encoder,
    layers: &[usize],
    base: &Path,
) -> Result<EmbeddingStore> {
    let mut views: Vec<&SketchView> = Vec::new();
    for rec in records {
        for list in rec.views.values() {
            for v in list {
                views.push(v);
            }
        }
    }
    views.sort_by(|a, b| a.key.cmp(&b.key));
    let source = source_hash(&views, encoder, layers);

    if index_path(base).exists() {
        if let Ok(existing) = EmbeddingStore::load(base) {
            if existing.source_hash == source {
                return Ok(existing);
            }
        }
    }

    let embedded: Vec<Vec<(usize, Vec<f32>)>> = views
        .par_iter()
        .map(|view| -> Result<Vec<(usize, Vec<f32>)>> {
            let img = match &view.payload {
                crate::dataset::Payload::Vector(_) => {
                    preprocess::rasterize(view, encoder.input_side())?
                }
                crate::dataset::Payload::Raster(img) => img.clone(),
            };
            let taps = encoder.embed_layers(&img, layers)?;
            Ok(taps.into_iter().map(|t| (t.layer, t.values)).collect())
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (view, taps) in views.iter().zip(embedded) {
        for (layer, values) in taps {
            let offset_bytes = payload.len() * 4;
            entries.push(StoreEntry {
                object_id: view.key.object_id.clone(),
                style: view.key.style.clone(),
                azimuth_deg: view.key.azimuth_deg,
                layer,
                offset_bytes,
                dim: values.len(),
                content_hash: hash_f32(&values),
            });
            payload.extend_from_slice(&values);
        }
    }

    let store = EmbeddingStore {
        source_hash: source,
        lookup: EmbeddingStore::build_lookup(&entries),
        entries,
        payload,
    };
    store.save(base)?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::procedural::generate_procedural_dataset;
    use crate::encoder::toy_encoder;

    #[test]
    fn store_round_trip_is_bit_exact_and_counts_entries() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("emb");
        let records = generate_procedural_dataset(3, 4).unwrap();
        let enc = toy_encoder(1);
        let store = embed_gallery(&records, &enc, &[2], &base).unwrap();
        // 4 objects x 2 styles x 5 views x 1 layer
        assert_eq!(store.entries().len(), 40);

        let loaded = EmbeddingStore::load(&base).unwrap();
        assert_eq!(loaded.entries(), store.entries());
        let a = store.get("obj0000", "npr", 45.0, 2).unwrap();
        let b = loaded.get("obj0000", "npr", 45.0, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 544);
    }

    #[test]
    fn rerun_with_unchanged_inputs_is_a_noop() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("emb");
        let records = generate_procedural_dataset(3, 2).unwrap();
        let enc = toy_encoder(1);
        let first = embed_gallery(&records, &enc, &[2], &base).unwrap();
        let bytes_before = std::fs::read(base.with_extension("bin")).unwrap();
        let mtime = std::fs::metadata(base.with_extension("bin"))
            .unwrap()
            .modified()
            .unwrap();
        let second = embed_gallery(&records, &enc, &[2], &base).unwrap();
        assert_eq!(first.source_hash, second.source_hash);
        let mtime2 = std::fs::metadata(base.with_extension("bin"))
            .unwrap()
            .modified()
            .unwrap();
        assert_eq!(mtime, mtime2, "payload was rewritten");
        assert_eq!(bytes_before, std::fs::read(base.with_extension("bin")).unwrap());

        // a different encoder seed invalidates the store
        let third = embed_gallery(&records, &toy_encoder(2), &[2], &base).unwrap();
        assert_ne!(third.source_hash, second.source_hash);
    }

    #[test]
    fn truncated_payload_names_offending_entry() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("emb");
        let records = generate_procedural_dataset(3, 2).unwrap();
        let store = embed_gallery(&records, &toy_encoder(1), &[2], &base).unwrap();
        let last = store.entries().last().unwrap().clone();
        let bin = base.with_extension("bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        let err = EmbeddingStore::load(&base).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&last.object_id) && msg.contains(&last.style), "{msg}");
    }

    #[test]
    fn gallery_view_groups_by_object() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("emb");
        let records = generate_procedural_dataset(3, 3).unwrap();
        let store = embed_gallery(&records, &toy_encoder(1), &[2], &base).unwrap();
        let gallery = store.gallery("npr", 2);
        assert_eq!(gallery.len(), 3);
        assert!(gallery.values().all(|v| v.len() == 5));
    }
}
