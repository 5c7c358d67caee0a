//! Dataset identities, manifests, and deterministic splits.
//!
//! A view is identified by `(object_id, style, azimuth_deg)`. A shape is the
//! set of its style-tagged views; galleries are built from shapes carrying
//! the five canonical azimuths.

pub mod procedural;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::preprocess::raster::RasterImage;
use crate::preprocess::svg;

pub const STYLE_NPR: &str = "npr";
pub const STYLE_ANIME: &str = "anime";
pub const STYLE_FREEHAND: &str = "freehand";

/// Azimuths every gallery shape must provide.
pub const GALLERY_AZIMUTHS: [f64; 5] = [0.0, 30.0, 45.0, 75.0, 90.0];

/// Camera elevation shared by all views.
pub const DEFAULT_ZENITH_DEG: f64 = 20.0;

/// One 2D point in canvas coordinates (pixels, y down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// Open polyline with a uniform width in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub points: Vec<Point>,
    pub width: f64,
}

/// Identity of a single rendered or drawn view.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewKey {
    pub object_id: String,
    pub class_label: String,
    pub style: String,
    pub azimuth_deg: f64,
    pub zenith_deg: f64,
}

impl ViewKey {
    pub fn new(
        object_id: impl Into<String>,
        class_label: impl Into<String>,
        style: impl Into<String>,
        azimuth_deg: f64,
        zenith_deg: f64,
    ) -> Result<Self> {
        if !(0.0..360.0).contains(&azimuth_deg) {
            return Err(Error::data(format!(
                "azimuth {azimuth_deg} outside [0, 360)"
            )));
        }
        if !(0.0..=90.0).contains(&zenith_deg) {
            return Err(Error::data(format!("zenith {zenith_deg} outside [0, 90]")));
        }
        Ok(ViewKey {
            object_id: object_id.into(),
            class_label: class_label.into(),
            style: style.into(),
            // normalize -0.0 so bit-level identity matches numeric identity
            azimuth_deg: azimuth_deg + 0.0,
            zenith_deg: zenith_deg + 0.0,
        })
    }
}

impl fmt::Display for ViewKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/az{}",
            self.object_id, self.style, self.azimuth_deg
        )
    }
}

impl PartialEq for ViewKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for ViewKey {}

impl Ord for ViewKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.object_id
            .cmp(&other.object_id)
            .then_with(|| self.style.cmp(&other.style))
            .then_with(|| self.azimuth_deg.total_cmp(&other.azimuth_deg))
            .then_with(|| self.zenith_deg.total_cmp(&other.zenith_deg))
            .then_with(|| self.class_label.cmp(&other.class_label))
    }
}
impl PartialOrd for ViewKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Hash for ViewKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.object_id.hash(state);
        self.style.hash(state);
        self.azimuth_deg.to_bits().hash(state);
        self.zenith_deg.to_bits().hash(state);
        self.class_label.hash(state);
    }
}

/// Image payload of a view: vector strokes or a raster grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Vector(Vec<Stroke>),
    Raster(RasterImage),
}

/// One view with its payload on a square canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchView {
    pub key: ViewKey,
    pub payload: Payload,
    pub canvas_size: u32,
}

impl SketchView {
    pub fn validate(&self) -> Result<()> {
        match &self.payload {
            Payload::Vector(strokes) => {
                if strokes.is_empty() {
                    return Err(Error::data(format!("{}: no strokes", self.key)));
                }
                for s in strokes {
                    if s.points.len() < 2 {
                        return Err(Error::data(format!(
                            "{}: stroke with fewer than 2 points",
                            self.key
                        )));
                    }
                    if s.width <= 0.0 {
                        return Err(Error::data(format!("{}: non-positive width", self.key)));
                    }
                }
            }
            Payload::Raster(img) => {
                if img.side() != self.canvas_size as usize {
                    return Err(Error::data(format!(
                        "{}: raster side {} != canvas {}",
                        self.key,
                        img.side(),
                        self.canvas_size
                    )));
                }
            }
        }
        Ok(())
    }

    /// Content digest over the payload bytes; used for store invalidation.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canvas_size.to_le_bytes());
        match &self.payload {
            Payload::Vector(strokes) => {
                h.update(b"vector");
                for s in strokes {
                    h.update(s.width.to_le_bytes());
                    for p in &s.points {
                        h.update(p.x.to_le_bytes());
                        h.update(p.y.to_le_bytes());
                    }
                }
            }
            Payload::Raster(img) => {
                h.update(b"raster");
                for v in img.pixels() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// A 3D shape as its set of style-tagged views.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRecord {
    pub object_id: String,
    pub class_label: String,
    /// style -> views sorted by azimuth
    pub views: BTreeMap<String, Vec<SketchView>>,
    pub split: Option<String>,
}

impl ShapeRecord {
    pub fn views_for(&self, style: &str) -> &[SketchView] {
        self.views.get(style).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn view_at(&self, style: &str, azimuth_deg: f64) -> Option<&SketchView> {
        self.views_for(style)
            .iter()
            .find(|v| v.key.azimuth_deg == azimuth_deg)
    }
}

/// Disjoint train/val/test id partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// One JSON line of a manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub object_id: String,
    pub class: String,
    pub style: String,
    pub azimuth_deg: f64,
    pub zenith_deg: f64,
    /// SVG or PNG path, relative to the manifest's directory.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

/// Load a JSON Lines manifest and its referenced image payloads.
///
/// Records are grouped by object in ascending id order; views are
/// deduplicated by `(object_id, style, azimuth_deg)`. Re-listing the same
/// view with the same path is idempotent; relisting it with a different
/// path is an error.
pub fn load_manifest(path: &Path) -> Result<Vec<ShapeRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut by_key: BTreeMap<ViewKey, ManifestRecord> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        let key = ViewKey::new(
            rec.object_id.clone(),
            rec.class.clone(),
            rec.style.clone(),
            rec.azimuth_deg,
            rec.zenith_deg,
        )
        .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        if let Some(prev) = by_key.get(&key) {
            if prev.path != rec.path {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!(
                        "duplicate view {key} with conflicting paths `{}` vs `{}`",
                        prev.path, rec.path
                    ),
                ));
            }
            continue;
        }
        by_key.insert(key, rec);
    }

    let mut records: BTreeMap<String, ShapeRecord> = BTreeMap::new();
    for (key, rec) in by_key {
        let img_path = base.join(&rec.path);
        let view = load_view_payload(&img_path, key.clone())?;
        view.validate()?;
        let entry = records
            .entry(key.object_id.clone())
            .or_insert_with(|| ShapeRecord {
                object_id: key.object_id.clone(),
                class_label: key.class_label.clone(),
                views: BTreeMap::new(),
                split: None,
            });
        if entry.class_label != key.class_label {
            return Err(Error::data(format!(
                "object {} listed with classes `{}` and `{}`",
                key.object_id, entry.class_label, key.class_label
            )));
        }
        match (&entry.split, &rec.split) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::data(format!(
                    "object {} listed with splits `{a}` and `{b}`",
                    key.object_id
                )));
            }
            (None, Some(b)) => entry.split = Some(b.clone()),
            _ => {}
        }
        entry.views.entry(key.style.clone()).or_default().push(view);
    }

    let mut out: Vec<ShapeRecord> = records.into_values().collect();
    for rec in &mut out {
        for views in rec.views.values_mut() {
            views.sort_by(|a, b| a.key.cmp(&b.key));
        }
    }
    Ok(out)
}

fn load_view_payload(img_path: &Path, key: ViewKey) -> Result<SketchView> {
    let ext = img_path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "svg" => {
            let text = std::fs::read_to_string(img_path).map_err(|e| Error::io(img_path, e))?;
            let (strokes, canvas) = svg::parse_svg(&text)
                .map_err(|e| Error::data(format!("{}: {e}", img_path.display())))?;
            Ok(SketchView {
                key,
                payload: Payload::Vector(strokes),
                canvas_size: canvas,
            })
        }
        "png" => {
            let img = RasterImage::from_png_path(img_path)?;
            let canvas = img.side() as u32;
            Ok(SketchView {
                key,
                payload: Payload::Raster(img),
                canvas_size: canvas,
            })
        }
        other => Err(Error::data(format!(
            "{}: unsupported payload extension `{other}` (expected svg or png)",
            img_path.display()
        ))),
    }
}

/// Write records as a manifest plus per-view SVG/PNG payloads under
/// `views/` next to the manifest.
pub fn save_manifest(records: &[ShapeRecord], manifest_path: &Path) -> Result<()> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let views_dir = base.join("views");
    std::fs::create_dir_all(&views_dir).map_err(|e| Error::io(&views_dir, e))?;

    let mut lines: Vec<(ViewKey, ManifestRecord)> = Vec::new();
    for rec in records {
        for views in rec.views.values() {
            for view in views {
                let ext = match &view.payload {
                    Payload::Vector(_) => "svg",
                    Payload::Raster(_) => "png",
                };
                let fname = format!(
                    "{}__{}__az{}.{ext}",
                    view.key.object_id, view.key.style, view.key.azimuth_deg
                );
                let rel = format!("views/{fname}");
                let full = base.join(&rel);
                match &view.payload {
                    Payload::Vector(strokes) => {
                        let text = svg::write_svg(strokes, view.canvas_size);
                        std::fs::write(&full, text).map_err(|e| Error::io(&full, e))?;
                    }
                    Payload::Raster(img) => img.save_png_path(&full)?,
                }
                lines.push((
                    view.key.clone(),
                    ManifestRecord {
                        object_id: view.key.object_id.clone(),
                        class: view.key.class_label.clone(),
                        style: view.key.style.clone(),
                        azimuth_deg: view.key.azimuth_deg,
                        zenith_deg: view.key.zenith_deg,
                        path: rel,
                        split: rec.split.clone(),
                    },
                ));
            }
        }
    }
    lines.sort_by(|a, b| a.0.cmp(&b.0));

    let mut file = std::fs::File::create(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    for (_, rec) in &lines {
        let json = serde_json::to_string(rec).map_err(|e| Error::data(e.to_string()))?;
        writeln!(file, "{json}").map_err(|e| Error::io(manifest_path, e))?;
    }
    Ok(())
}

/// Check that every record carries exactly the required azimuths in `style`.
/// With `allow_missing` the check is skipped for absent views (aggregation
/// then runs over whatever is available).
pub fn validate_gallery_views(
    records: &[ShapeRecord],
    style: &str,
    azimuths: &[f64],
    allow_missing: bool,
) -> Result<()> {
    if allow_missing {
        return Ok(());
    }
    for rec in records {
        for &az in azimuths {
            if rec.view_at(style, az).is_none() {
                return Err(Error::data(format!(
                    "object {} is missing {style} view at azimuth {az}",
                    rec.object_id
                )));
            }
        }
    }
    Ok(())
}

/// Deterministic 70/15/15 partition of ids.
///
/// Ids are sorted before the seeded shuffle, so the split depends only on
/// the id *set* and the seed, never on input order.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<DatasetSplit> {
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    let n = sorted.len();
    if n < 3 {
        return Err(Error::data(format!("need at least 3 ids, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let mut train: Vec<String> = sorted[..n_train].to_vec();
    let mut val: Vec<String> = sorted[n_train..n_train + n_val].to_vec();
    let mut test: Vec<String> = sorted[n_train + n_val..].to_vec();
    train.sort();
    val.sort();
    test.sort();
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed,
    })
}

/// Pick `n` gallery ids out of the eligible pool, deterministically in `seed`.
pub fn select_test_gallery(ids: &[String], n: usize, seed: u64) -> Result<Vec<String>> {
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if n > sorted.len() {
        return Err(Error::data(format!(
            "requested {n} gallery shapes but only {} are eligible",
            sorted.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let mut out: Vec<String> = sorted[..n].to_vec();
    out.sort();
    Ok(out)
}

/// splitmix64-based mixer for deriving stream seeds.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
