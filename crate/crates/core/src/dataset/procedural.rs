//! Procedural two-style sketch generator.
//!
//! Stand-in producer for desk-scale runs: random wireframe solids built from
//! 2-4 box/frustum primitives, projected under the shared camera (elevation
//! 20 deg, distance 2.5) to vector strokes. Each view is emitted twice:
//! style-1 as clean uniform-width polylines, style-2 as the same geometry
//! with bounded per-vertex jitter, stroke dropout, and per-stroke widths, so
//! the two styles stay spatially aligned view by view.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    mix_seed, Payload, Point, ShapeRecord, SketchView, Stroke, ViewKey, DEFAULT_ZENITH_DEG,
    GALLERY_AZIMUTHS, STYLE_ANIME, STYLE_NPR,
};
use crate::error::{Error, Result};

/// Generator knobs. Defaults imitate the spatial alignment between clean
/// and degraded synthetic styles; they are configuration, not constants.
#[derive(Debug, Clone)]
pub struct ProceduralConfig {
    pub canvas: u32,
    pub azimuths: Vec<f64>,
    pub zenith_deg: f64,
    pub camera_distance: f64,
    pub focal: f64,
    pub style1: String,
    pub style2: String,
    pub style1_width: f64,
    pub style2_width_range: (f64, f64),
    /// Maximum Euclidean displacement of a style-2 vertex, in pixels.
    pub jitter_px: f64,
    /// Probability that a style-2 stroke is dropped.
    pub dropout: f64,
}

impl Default for ProceduralConfig {
    fn default() -> Self {
        ProceduralConfig {
            canvas: 224,
            azimuths: GALLERY_AZIMUTHS.to_vec(),
            zenith_deg: DEFAULT_ZENITH_DEG,
            camera_distance: 2.5,
            focal: 220.0,
            style1: STYLE_NPR.to_string(),
            style2: STYLE_ANIME.to_string(),
            style1_width: 2.2,
            style2_width_range: (1.0, 2.2),
            jitter_px: 2.0,
            dropout: 0.10,
        }
    }
}

/// Generate `n_objects` two-style shape records with default settings.
pub fn generate_procedural_dataset(seed: u64, n_objects: usize) -> Result<Vec<ShapeRecord>> {
    generate_with_config(seed, n_objects, &ProceduralConfig::default())
}

pub fn generate_with_config(
    seed: u64,
    n_objects: usize,
    cfg: &ProceduralConfig,
) -> Result<Vec<ShapeRecord>> {
    if n_objects < 2 {
        return Err(Error::data(format!(
            "need at least 2 objects, got {n_objects}"
        )));
    }
    let mut out = Vec::with_capacity(n_objects);
    for idx in 0..n_objects {
        let mut geo_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, idx as u64, 0xB0D1]));
        let (class, edges) = random_solid(&mut geo_rng);
        let object_id = format!("obj{idx:04}");

        let mut views: BTreeMap<String, Vec<SketchView>> = BTreeMap::new();
        for (view_idx, &az) in cfg.azimuths.iter().enumerate() {
            let strokes = project_edges(&edges, az, cfg);
            let key1 = ViewKey::new(&object_id, class, &cfg.style1, az, cfg.zenith_deg)?;
            let clean: Vec<Stroke> = strokes
                .iter()
                .map(|s| Stroke {
                    points: s.clone(),
                    width: cfg.style1_width,
                })
                .collect();
            views.entry(cfg.style1.clone()).or_default().push(SketchView {
                key: key1,
                payload: Payload::Vector(clean),
                canvas_size: cfg.canvas,
            });

            let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                seed,
                idx as u64,
                view_idx as u64,
                0x57E2,
            ]));
            let key2 = ViewKey::new(&object_id, class, &cfg.style2, az, cfg.zenith_deg)?;
            let degraded = degrade_strokes(&strokes, cfg, &mut noise_rng);
            views.entry(cfg.style2.clone()).or_default().push(SketchView {
                key: key2,
                payload: Payload::Vector(degraded),
                canvas_size: cfg.canvas,
            });
        }
        for list in views.values_mut() {
            list.sort_by(|a, b| a.key.cmp(&b.key));
        }
        out.push(ShapeRecord {
            object_id,
            class_label: class.to_string(),
            views,
            split: None,
        });
    }
    Ok(out)
}

fn degrade_strokes(strokes: &[Vec<Point>], cfg: &ProceduralConfig, rng: &mut ChaCha8Rng) -> Vec<Stroke> {
    let mut out = Vec::new();
    for pts in strokes {
        // consume randomness for every stroke so dropout does not shift the
        // stream consumed by later strokes
        let drop: f64 = rng.gen();
        let width = rng.gen_range(cfg.style2_width_range.0..=cfg.style2_width_range.1);
        let jittered: Vec<Point> = pts
            .iter()
            .map(|p| {
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let radius = rng.gen_range(0.0..=cfg.jitter_px);
                Point {
                    x: p.x + radius * angle.cos(),
                    y: p.y + radius * angle.sin(),
                }
            })
            .collect();
        if drop < cfg.dropout {
            continue;
        }
        out.push(Stroke {
            points: jittered,
            width,
        });
    }
    if out.is_empty() {
        // pathological dropout draw; keep the first stroke so the view stays valid
        out.push(Stroke {
            points: strokes[0].clone(),
            width: cfg.style1_width,
        });
    }
    out
}

type V3 = [f64; 3];
type Edge = (V3, V3);

fn random_solid(rng: &mut ChaCha8Rng) -> (&'static str, Vec<Edge>) {
    let archetype = rng.gen_range(0..3u32);
    let mut edges = match archetype {
        0 => box_stack(rng),
        1 => tower(rng),
        _ => lamp_like(rng),
    };
    let class = match archetype {
        0 => "boxstack",
        1 => "tower",
        _ => "lamplike",
    };
    fit_to_unit(&mut edges);
    (class, edges)
}

/// 2-4 cuboids stacked with lateral offsets. Parameter ranges are kept
/// narrow so shapes within a gallery stay confusable.
fn box_stack(rng: &mut ChaCha8Rng) -> Vec<Edge> {
    let k = rng.gen_range(2..=4usize);
    let mut edges = Vec::new();
    let mut y = -0.5;
    for _ in 0..k {
        let hx = rng.gen_range(0.26..0.38);
        let hz = rng.gen_range(0.26..0.38);
        let hy = rng.gen_range(0.10..0.18);
        let cx = rng.gen_range(-0.05..0.05);
        let cz = rng.gen_range(-0.05..0.05);
        edges.extend(box_edges([cx, y + hy, cz], [hx, hy, hz]));
        y += 2.0 * hy;
    }
    edges
}

/// Base box, tapered mid section, optional cap.
fn tower(rng: &mut ChaCha8Rng) -> Vec<Edge> {
    let mut edges = Vec::new();
    let base_h = rng.gen_range(0.10..0.16);
    let base_half = rng.gen_range(0.34..0.44);
    edges.extend(box_edges([0.0, -0.5 + base_h, 0.0], [base_half, base_h, base_half]));
    let top_y = -0.5 + 2.0 * base_h;
    let fr_h = rng.gen_range(0.42..0.55);
    let bottom = rng.gen_range(0.24..0.32);
    let top = rng.gen_range(0.10..0.16);
    edges.extend(frustum_edges(top_y, top_y + fr_h, bottom, bottom, top, top));
    if rng.gen_bool(0.5) {
        let cap = rng.gen_range(0.10..0.15);
        edges.extend(box_edges(
            [0.0, top_y + fr_h + cap * 0.6, 0.0],
            [cap, cap * 0.6, cap],
        ));
    }
    edges
}

/// Flat base, thin pole, flaring shade, optional finial.
fn lamp_like(rng: &mut ChaCha8Rng) -> Vec<Edge> {
    let mut edges = Vec::new();
    let base_half = rng.gen_range(0.26..0.34);
    let base_h = rng.gen_range(0.03..0.05);
    edges.extend(box_edges([0.0, -0.5 + base_h, 0.0], [base_half, base_h, base_half]));
    let pole_h = rng.gen_range(0.36..0.46);
    let pole_half = rng.gen_range(0.02..0.035);
    let pole_y0 = -0.5 + 2.0 * base_h;
    edges.extend(box_edges(
        [0.0, pole_y0 + pole_h, 0.0],
        [pole_half, pole_h, pole_half],
    ));
    let shade_h = rng.gen_range(0.22..0.30);
    let shade_top = rng.gen_range(0.10..0.15);
    let shade_bottom = rng.gen_range(0.28..0.38);
    let shade_y0 = pole_y0 + 2.0 * pole_h;
    edges.extend(frustum_edges(
        shade_y0,
        shade_y0 + shade_h,
        shade_bottom,
        shade_bottom,
        shade_top,
        shade_top,
    ));
    if rng.gen_bool(0.4) {
        let f = rng.gen_range(0.04..0.07);
        edges.extend(box_edges([0.0, shade_y0 + shade_h + f, 0.0], [f, f, f]));
    }
    edges
}

fn box_edges(center: V3, half: V3) -> Vec<Edge> {
    let [cx, cy, cz] = center;
    let [hx, hy, hz] = half;
    let corner = |sx: f64, sy: f64, sz: f64| [cx + sx * hx, cy + sy * hy, cz + sz * hz];
    let c = [
        corner(-1.0, -1.0, -1.0),
        corner(1.0, -1.0, -1.0),
        corner(1.0, -1.0, 1.0),
        corner(-1.0, -1.0, 1.0),
        corner(-1.0, 1.0, -1.0),
        corner(1.0, 1.0, -1.0),
        corner(1.0, 1.0, 1.0),
        corner(-1.0, 1.0, 1.0),
    ];
    vec![
        (c[0], c[1]),
        (c[1], c[2]),
        (c[2], c[3]),
        (c[3], c[0]),
        (c[4], c[5]),
        (c[5], c[6]),
        (c[6], c[7]),
        (c[7], c[4]),
        (c[0], c[4]),
        (c[1], c[5]),
        (c[2], c[6]),
        (c[3], c[7]),
    ]
}

fn frustum_edges(y0: f64, y1: f64, bx: f64, bz: f64, tx: f64, tz: f64) -> Vec<Edge> {
    let b = [
        [-bx, y0, -bz],
        [bx, y0, -bz],
        [bx, y0, bz],
        [-bx, y0, bz],
    ];
    let t = [
        [-tx, y1, -tz],
        [tx, y1, -tz],
        [tx, y1, tz],
        [-tx, y1, tz],
    ];
    let mut edges = Vec::new();
    for i in 0..4 {
        edges.push((b[i], b[(i + 1) % 4]));
        edges.push((t[i], t[(i + 1) % 4]));
        edges.push((b[i], t[i]));
    }
    edges
}

/// Scale so every vertex lies within Euclidean radius 0.8 of the origin;
/// keeps projections inside the canvas for all camera azimuths.
fn fit_to_unit(edges: &mut [Edge]) {
    let mut max_r = 0.0f64;
    for (a, b) in edges.iter() {
        for p in [a, b] {
            max_r = max_r.max(dot(*p, *p).sqrt());
        }
    }
    if max_r == 0.0 {
        return;
    }
    let s = 0.8 / max_r;
    for (a, b) in edges.iter_mut() {
        for c in a.iter_mut().chain(b.iter_mut()) {
            *c *= s;
        }
    }
}

/// Perspective-project edges for one camera azimuth; each edge becomes a
/// two-point polyline in canvas coordinates.
fn project_edges(edges: &[Edge], azimuth_deg: f64, cfg: &ProceduralConfig) -> Vec<Vec<Point>> {
    let az = azimuth_deg.to_radians();
    let el = cfg.zenith_deg.to_radians();
    let d = cfg.camera_distance;
    let eye = [d * el.cos() * az.sin(), d * el.sin(), d * el.cos() * az.cos()];

    // look-at basis toward the origin, +y up
    let fwd = normalize([-eye[0], -eye[1], -eye[2]]);
    let right = normalize(cross(fwd, [0.0, 1.0, 0.0]));
    let up = cross(right, fwd);

    let cx = cfg.canvas as f64 / 2.0;
    let cy = cfg.canvas as f64 / 2.0;
    let project = |p: &V3| -> Point {
        let rel = [p[0] - eye[0], p[1] - eye[1], p[2] - eye[2]];
        let x = dot(rel, right);
        let y = dot(rel, up);
        let z = dot(rel, fwd);
        Point {
            x: cx + cfg.focal * x / z,
            y: cy - cfg.focal * y / z,
        }
    };
    edges
        .iter()
        .map(|(a, b)| vec![project(a), project(b)])
        .collect()
}

fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: V3) -> V3 {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}
