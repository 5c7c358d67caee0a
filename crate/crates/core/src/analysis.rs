//! Cross-domain distance matrices: aggregated shape-to-shape distances and
//! per-view matching distances, with CSV and heatmap export.
//!
//! A cell is the mean-squared difference of layer embeddings (averaged over
//! vector components so values stay comparable across layers of different
//! widths), averaged over views (shape matrices) or over objects (view
//! matrices, with a 95% confidence half-width per cell).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::preprocess::raster::RasterImage;

/// Embeddings keyed by `(object_id, style, azimuth bits)`.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingSet {
    map: BTreeMap<(String, String, u64), Vec<f32>>,
}

impl EmbeddingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, object_id: &str, style: &str, azimuth_deg: f64, values: Vec<f32>) {
        self.map.insert(
            (object_id.to_string(), style.to_string(), azimuth_deg.to_bits()),
            values,
        );
    }

    pub fn get(&self, object_id: &str, style: &str, azimuth_deg: f64) -> Option<&[f32]> {
        self.map
            .get(&(object_id.to_string(), style.to_string(), azimuth_deg.to_bits()))
            .map(Vec::as_slice)
    }

    pub fn from_store(store: &crate::retrieval::store::EmbeddingStore, layer: usize) -> Self {
        let mut set = EmbeddingSet::new();
        for e in store.entries() {
            if e.layer == layer {
                if let Some(values) = store.get(&e.object_id, &e.style, e.azimuth_deg, layer) {
                    set.insert(&e.object_id, &e.style, e.azimuth_deg, values.to_vec());
                }
            }
        }
        set
    }

    /// Multiply every embedding by a constant (homogeneity experiments).
    pub fn scaled(&self, factor: f32) -> Self {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|x| x * factor).collect()))
            .collect();
        EmbeddingSet { map }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Row-major values, all finite and non-negative.
    pub values: Vec<f64>,
    /// 95% confidence half-width per cell (view matrices only).
    pub ci_half: Option<Vec<f64>>,
    pub domains: (String, String),
    pub layer: usize,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.col_labels.len() + j]
    }

    pub fn mean_diagonal(&self) -> f64 {
        let n = self.row_labels.len().min(self.col_labels.len());
        (0..n).map(|i| self.get(i, i)).sum::<f64>() / n as f64
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let (r, c) = (self.row_labels.len(), self.col_labels.len());
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..r {
            for j in 0..c {
                if i != j {
                    sum += self.get(i, j);
                    count += 1;
                }
            }
        }
        sum / count.max(1) as f64
    }
}

fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::data(format!(
            "embedding dims differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    Ok(acc / a.len() as f64)
}

/// Shape-to-shape distances: cell `(A, B)` averages the per-view embedding
/// MSE between `A` in `domain_i` and `B` in `domain_j` over the shared
/// `azimuths`.
pub fn shape_distance_matrix(
    objects: &[String],
    azimuths: &[f64],
    domain_i: &str,
    domain_j: &str,
    set: &EmbeddingSet,
    layer: usize,
) -> Result<DistanceMatrix> {
    if azimuths.is_empty() {
        return Err(Error::data("need at least one shared view"));
    }
    let lookup = |obj: &str, domain: &str, az: f64| -> Result<&[f32]> {
        set.get(obj, domain, az).ok_or_else(|| {
            Error::data(format!("missing embedding for {obj}/{domain}/az{az}"))
        })
    };
    let n = objects.len();
    let mut values = vec![0.0f64; n * n];
    for (ai, a) in objects.iter().enumerate() {
        for (bi, b) in objects.iter().enumerate() {
            let mut acc = 0.0;
            for &az in azimuths {
                acc += mse(lookup(a, domain_i, az)?, lookup(b, domain_j, az)?)?;
            }
            values[ai * n + bi] = acc / azimuths.len() as f64;
        }
    }
    Ok(DistanceMatrix {
        row_labels: objects.to_vec(),
        col_labels: objects.to_vec(),
        values,
        ci_half: None,
        domains: (domain_i.to_string(), domain_j.to_string()),
        layer,
    })
}

/// View-to-view distances: cell `(k, h)` averages over objects the
/// embedding MSE between view `k` in `domain_i` and view `h` in
/// `domain_j`, with a 95% confidence half-width over objects.
pub fn view_distance_matrix(
    azimuths: &[f64],
    domain_i: &str,
    domain_j: &str,
    objects: &[String],
    set: &EmbeddingSet,
    layer: usize,
) -> Result<DistanceMatrix> {
    if objects.is_empty() {
        return Err(Error::data("need at least one object"));
    }
    let v = azimuths.len();
    let mut values = vec![0.0f64; v * v];
    let mut ci = vec![0.0f64; v * v];
    for (ki, &k) in azimuths.iter().enumerate() {
        for (hi, &h) in azimuths.iter().enumerate() {
            let mut per_object = Vec::with_capacity(objects.len());
            for obj in objects {
                let a = set.get(obj, domain_i, k).ok_or_else(|| {
                    Error::data(format!("missing embedding for {obj}/{domain_i}/az{k}"))
                })?;
                let b = set.get(obj, domain_j, h).ok_or_else(|| {
                    Error::data(format!("missing embedding for {obj}/{domain_j}/az{h}"))
                })?;
                per_object.push(mse(a, b)?);
            }
            let n = per_object.len() as f64;
            let mean = per_object.iter().sum::<f64>() / n;
            values[ki * v + hi] = mean;
            if per_object.len() > 1 {
                let var = per_object
                    .iter()
                    .map(|x| (x - mean) * (x - mean))
                    .sum::<f64>()
                    / (n - 1.0);
                ci[ki * v + hi] = 1.96 * (var / n).sqrt();
            }
        }
    }
    let labels: Vec<String> = azimuths.iter().map(|a| format!("az{a}")).collect();
    Ok(DistanceMatrix {
        row_labels: labels.clone(),
        col_labels: labels,
        values,
        ci_half: Some(ci),
        domains: (domain_i.to_string(), domain_j.to_string()),
        layer,
    })
}

/// CSV of the raw values (`row` label column, one column per col label).
pub fn write_matrix_csv(matrix: &DistanceMatrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(e.to_string()))?;
    let mut header = vec!["row".to_string()];
    header.extend(matrix.col_labels.iter().cloned());
    w.write_record(&header).map_err(|e| Error::data(e.to_string()))?;
    for (i, label) in matrix.row_labels.iter().enumerate() {
        let mut rec = vec![label.clone()];
        for j in 0..matrix.col_labels.len() {
            rec.push(matrix.get(i, j).to_string());
        }
        w.write_record(&rec).map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::data(e.to_string()))?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Vec<String>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(e.to_string()))?;
    let headers = r.headers().map_err(|e| Error::data(e.to_string()))?.clone();
    let col_labels: Vec<String> = headers.iter().skip(1).map(String::from).collect();
    let mut row_labels = Vec::new();
    let mut values = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| Error::data(e.to_string()))?;
        row_labels.push(record[0].to_string());
        for field in record.iter().skip(1) {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|e| Error::data(format!("bad matrix value `{field}`: {e}")))?,
            );
        }
    }
    Ok((row_labels, col_labels, values))
}

/// Render the matrix as a grayscale heatmap (darker = smaller distance)
/// plus a CSV of raw values. Files are named `{pair}_{layer}_{kind}.*`.
pub fn emit_heatmaps(matrix: &DistanceMatrix, dir: &Path, kind: &str) -> Result<(PathBuf, PathBuf)> {
    if matrix.values.is_empty() {
        return Err(Error::data("empty matrix"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = format!(
        "{}-{}_{}_{}",
        matrix.domains.0, matrix.domains.1, matrix.layer, kind
    );
    let csv_path = dir.join(format!("{stem}.csv"));
    write_matrix_csv(matrix, &csv_path)?;

    let rows = matrix.row_labels.len();
    let cols = matrix.col_labels.len();
    let min = matrix.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = matrix
        .values
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let cell = (256usize / rows.max(cols)).clamp(4, 32);
    let mut img = RasterImage::new_white(rows.max(cols) * cell);
    for i in 0..rows {
        for j in 0..cols {
            let v = matrix.values[i * cols + j];
            let shade = if span > 0.0 {
                ((v - min) / span) as f32
            } else {
                0.5
            };
            for y in 0..cell {
                for x in 0..cell {
                    img.set(j * cell + x, i * cell + y, shade);
                }
            }
        }
    }
    let png_path = dir.join(format!("{stem}.png"));
    img.save_png_path(&png_path)?;
    Ok((csv_path, png_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_1d(pairs: &[(&str, &str, f64, f32)]) -> EmbeddingSet {
        let mut set = EmbeddingSet::new();
        for (obj, dom, az, v) in pairs {
            set.insert(obj, dom, *az, vec![*v]);
        }
        set
    }

    #[test]
    fn single_view_matrix_matches_forced_arithmetic() {
        // domain x: {A: 2, B: 5}; domain y: {A: 2.5, B: 4}
        let set = set_1d(&[
            ("A", "x", 0.0, 2.0),
            ("B", "x", 0.0, 5.0),
            ("A", "y", 0.0, 2.5),
            ("B", "y", 0.0, 4.0),
        ]);
        let m = shape_distance_matrix(
            &["A".into(), "B".into()],
            &[0.0],
            "x",
            "y",
            &set,
            3,
        )
        .unwrap();
        assert_eq!(m.get(0, 0), 0.25); // (2 - 2.5)^2
        assert_eq!(m.get(0, 1), 4.0); // (2 - 4)^2
    }

    #[test]
    fn same_domain_identical_renderings_zero_diagonal() {
        let mut set = EmbeddingSet::new();
        for (obj, v) in [("A", 1.0f32), ("B", -2.0), ("C", 0.5)] {
            for az in [0.0, 30.0, 75.0] {
                set.insert(obj, "npr", az, vec![v, v * 2.0]);
            }
        }
        let objects: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let m = shape_distance_matrix(&objects, &[0.0, 30.0, 75.0], "npr", "npr", &set, 1).unwrap();
        for i in 0..3 {
            assert_eq!(m.get(i, i), 0.0);
        }
        assert!(m.get(0, 1) > 0.0);
        // swap symmetry when domains coincide
        assert_eq!(m.get(0, 1), m.get(1, 0));
    }

    #[test]
    fn quadratic_homogeneity_under_embedding_doubling() {
        let mut set = EmbeddingSet::new();
        for (i, obj) in ["A", "B", "C", "D"].iter().enumerate() {
            for az in [0.0, 30.0] {
                set.insert(
                    obj,
                    "x",
                    az,
                    vec![i as f32 * 0.7, 1.0 - i as f32, az as f32 / 10.0],
                );
                set.insert(obj, "y", az, vec![i as f32, 0.5, -az as f32 / 20.0]);
            }
        }
        let objects: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
        let base = shape_distance_matrix(&objects, &[0.0, 30.0], "x", "y", &set, 1).unwrap();
        let doubled =
            shape_distance_matrix(&objects, &[0.0, 30.0], "x", "y", &set.scaled(2.0), 1).unwrap();
        for (a, b) in base.values.iter().zip(&doubled.values) {
            if *a == 0.0 {
                assert_eq!(*b, 0.0);
            } else {
                assert!(((b / a) - 4.0).abs() < 1e-6, "{b} / {a}");
            }
        }
    }

    #[test]
    fn swap_symmetry_across_domains() {
        let set = set_1d(&[
            ("A", "x", 0.0, 1.0),
            ("B", "x", 0.0, 3.0),
            ("A", "y", 0.0, -1.0),
            ("B", "y", 0.0, 2.0),
        ]);
        let objects: Vec<String> = vec!["A".into(), "B".into()];
        let xy = shape_distance_matrix(&objects, &[0.0], "x", "y", &set, 1).unwrap();
        let yx = shape_distance_matrix(&objects, &[0.0], "y", "x", &set, 1).unwrap();
        // d(A^x, B^y) == d(B^y, A^x)
        assert_eq!(xy.get(0, 1), yx.get(1, 0));
        assert_eq!(xy.get(1, 0), yx.get(0, 1));
    }

    #[test]
    fn view_matrix_is_v_by_v_with_ci() {
        let mut set = EmbeddingSet::new();
        for obj in ["A", "B", "C", "D", "E"] {
            for (i, az) in [0.0, 30.0, 75.0].iter().enumerate() {
                let base = obj.as_bytes()[0] as f32 / 64.0;
                set.insert(obj, "x", *az, vec![base + i as f32]);
                set.insert(obj, "y", *az, vec![base + i as f32 + 0.1]);
            }
        }
        let objects: Vec<String> = ["A", "B", "C", "D", "E"].iter().map(|s| s.to_string()).collect();
        let m = view_distance_matrix(&[0.0, 30.0, 75.0], "x", "y", &objects, &set, 1).unwrap();
        assert_eq!(m.row_labels.len(), 3);
        assert_eq!(m.col_labels.len(), 3);
        let ci = m.ci_half.as_ref().unwrap();
        assert_eq!(ci.len(), 9);
        assert!(m.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        // matched views are closer than mismatched ones by construction
        assert!(m.mean_diagonal() < m.mean_off_diagonal());
    }

    #[test]
    fn missing_view_is_an_error() {
        let set = set_1d(&[("A", "x", 0.0, 1.0)]);
        let err = shape_distance_matrix(&["A".into()], &[0.0], "x", "y", &set, 1).unwrap_err();
        assert!(err.to_string().contains("A/y"), "{err}");
    }

    #[test]
    fn csv_round_trip_and_heatmap_emission() {
        let dir = tempfile::tempdir().unwrap();
        let set = set_1d(&[
            ("A", "x", 0.0, 1.25),
            ("B", "x", 0.0, 3.5),
            ("A", "y", 0.0, -0.75),
            ("B", "y", 0.0, 2.125),
        ]);
        let objects: Vec<String> = vec!["A".into(), "B".into()];
        let m = shape_distance_matrix(&objects, &[0.0], "x", "y", &set, 2).unwrap();
        let (csv_path, png_path) = emit_heatmaps(&m, dir.path(), "shape").unwrap();
        assert!(png_path.exists());
        let (rows, cols, values) = read_matrix_csv(&csv_path).unwrap();
        assert_eq!(rows, m.row_labels);
        assert_eq!(cols, m.col_labels);
        for (a, b) in values.iter().zip(&m.values) {
            assert!((a - b).abs() < 1e-6);
        }

        // constant matrix renders a uniform image
        let flat = DistanceMatrix {
            row_labels: vec!["a".into(), "b".into()],
            col_labels: vec!["a".into(), "b".into()],
            values: vec![3.0; 4],
            ci_half: None,
            domains: ("x".into(), "x".into()),
            layer: 1,
        };
        let (_, png) = emit_heatmaps(&flat, dir.path(), "flat").unwrap();
        let img = RasterImage::from_png_path(&png).unwrap();
        let first = img.get(0, 0);
        assert!(img.pixels().iter().all(|v| *v == first));
    }
}
