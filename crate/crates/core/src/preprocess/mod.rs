//! Image-space normalization: bounding boxes, centering/scaling to a target
//! box, stroke-width assignment, rasterization, affine augmentation, and the
//! bounding-box scale sweep.

pub mod raster;
pub mod svg;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Payload, Point, SketchView, Stroke};
use crate::error::{Error, Result};
use raster::{rasterize_strokes, RasterImage};

/// Axis-aligned extent in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BoundingBox {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    /// Longest side; the square variant uses this as its side.
    pub fn longest_side(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.min_x + self.max_x) / 2.0,
            (self.min_y + self.max_y) / 2.0,
        )
    }
}

/// Canvas size, target object box, and stroke width for one input profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub canvas: u32,
    pub target_box: u32,
    pub stroke_width: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        NormalizationSpec {
            canvas: 224,
            target_box: 129,
            stroke_width: 2.2,
        }
    }
}

impl NormalizationSpec {
    /// Profile for a given encoder input side: 224 -> 129, 384 -> 291.
    pub fn for_input_side(side: u32) -> Self {
        match side {
            384 => NormalizationSpec {
                canvas: 384,
                target_box: 291,
                stroke_width: 2.2,
            },
            other => NormalizationSpec {
                canvas: other,
                target_box: (other as f64 * 129.0 / 224.0).round() as u32,
                stroke_width: 2.2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_box == 0 || self.target_box > self.canvas {
            return Err(Error::config(format!(
                "target_box {} must lie in (0, canvas {}]",
                self.target_box, self.canvas
            )));
        }
        if !(self.stroke_width > 0.0) {
            return Err(Error::config("stroke_width must be positive"));
        }
        Ok(())
    }
}

/// Affine augmentation parameters; all fields live in closed ranges
/// ([-0.10, 0.10] fractions, [-10, 10] degrees).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub translate_frac: (f64, f64),
    pub rotate_deg: f64,
    pub scale_frac: f64,
}

pub const MAX_TRANSLATE_FRAC: f64 = 0.10;
pub const MAX_ROTATE_DEG: f64 = 10.0;
pub const MAX_SCALE_FRAC: f64 = 0.10;

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            translate_frac: (0.0, 0.0),
            rotate_deg: 0.0,
            scale_frac: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (tx, ty) = self.translate_frac;
        if tx.abs() > MAX_TRANSLATE_FRAC || ty.abs() > MAX_TRANSLATE_FRAC {
            return Err(Error::config(format!(
                "translation ({tx}, {ty}) outside +/-{MAX_TRANSLATE_FRAC}"
            )));
        }
        if self.rotate_deg.abs() > MAX_ROTATE_DEG {
            return Err(Error::config(format!(
                "rotation {} outside +/-{MAX_ROTATE_DEG} degrees",
                self.rotate_deg
            )));
        }
        if self.scale_frac.abs() > MAX_SCALE_FRAC {
            return Err(Error::config(format!(
                "scale {} outside +/-{MAX_SCALE_FRAC}",
                self.scale_frac
            )));
        }
        Ok(())
    }

    /// Draw parameters uniformly from the full closed ranges.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        AugmentParams {
            translate_frac: (
                rng.gen_range(-MAX_TRANSLATE_FRAC..=MAX_TRANSLATE_FRAC),
                rng.gen_range(-MAX_TRANSLATE_FRAC..=MAX_TRANSLATE_FRAC),
            ),
            rotate_deg: rng.gen_range(-MAX_ROTATE_DEG..=MAX_ROTATE_DEG),
            scale_frac: rng.gen_range(-MAX_SCALE_FRAC..=MAX_SCALE_FRAC),
        }
    }
}

/// Tightest box covering the view's ink: stroke geometry for vector
/// payloads, ink pixels for rasters.
pub fn bounding_box(view: &SketchView) -> Result<BoundingBox> {
    match &view.payload {
        Payload::Vector(strokes) => {
            let mut bbox: Option<BoundingBox> = None;
            for s in strokes {
                for p in &s.points {
                    let b = bbox.get_or_insert(BoundingBox {
                        min_x: p.x,
                        min_y: p.y,
                        max_x: p.x,
                        max_y: p.y,
                    });
                    b.min_x = b.min_x.min(p.x);
                    b.min_y = b.min_y.min(p.y);
                    b.max_x = b.max_x.max(p.x);
                    b.max_y = b.max_y.max(p.y);
                }
            }
            bbox.ok_or(Error::EmptySketch)
        }
        Payload::Raster(img) => img.ink_bbox().ok_or(Error::EmptySketch),
    }
}

/// Isotropically scale and center the object so its longest bounding-box
/// side equals `spec.target_box` on a `spec.canvas` square. Vector payloads
/// keep vector form; rasters are resampled bilinearly.
pub fn normalize_object(view: &SketchView, spec: &NormalizationSpec) -> Result<SketchView> {
    spec.validate()?;
    let bbox = bounding_box(view)?;
    let side = bbox.longest_side();
    if side < 1e-9 {
        return Err(Error::data(format!(
            "{}: degenerate bounding box (side 0), cannot normalize",
            view.key
        )));
    }
    let scale = spec.target_box as f64 / side;
    let (cx, cy) = bbox.center();
    let half_canvas = spec.canvas as f64 / 2.0;

    match &view.payload {
        Payload::Vector(strokes) => {
            let moved: Vec<Stroke> = strokes
                .iter()
                .map(|s| Stroke {
                    points: s
                        .points
                        .iter()
                        .map(|p| Point {
                            x: (p.x - cx) * scale + half_canvas,
                            y: (p.y - cy) * scale + half_canvas,
                        })
                        .collect(),
                    width: s.width,
                })
                .collect();
            Ok(SketchView {
                key: view.key.clone(),
                payload: Payload::Vector(moved),
                canvas_size: spec.canvas,
            })
        }
        Payload::Raster(img) => {
            let out = rescale_about_center(img, scale, (cx, cy), spec.canvas as usize);
            Ok(SketchView {
                key: view.key.clone(),
                payload: Payload::Raster(out),
                canvas_size: spec.canvas,
            })
        }
    }
}

/// Resample so that the point `center` maps to the output canvas center and
/// distances scale by `scale`.
fn rescale_about_center(
    img: &RasterImage,
    scale: f64,
    center: (f64, f64),
    out_side: usize,
) -> RasterImage {
    let half_out = out_side as f64 / 2.0;
    let mut out = RasterImage::new_white(out_side);
    for y in 0..out_side {
        for x in 0..out_side {
            let u = (x as f64 - half_out) / scale + center.0;
            let v = (y as f64 - half_out) / scale + center.1;
            out.set(x, y, img.sample(u, v));
        }
    }
    out
}

/// Assign a uniform width to every stroke; geometry is untouched.
pub fn set_stroke_width(view: &SketchView, width: f64) -> Result<SketchView> {
    if !(width > 0.0) {
        return Err(Error::config(format!("stroke width {width} must be > 0")));
    }
    let Payload::Vector(strokes) = &view.payload else {
        return Err(Error::VectorOnly);
    };
    let restyled = strokes
        .iter()
        .map(|s| Stroke {
            points: s.points.clone(),
            width,
        })
        .collect();
    Ok(SketchView {
        key: view.key.clone(),
        payload: Payload::Vector(restyled),
        canvas_size: view.canvas_size,
    })
}

/// Render a vector view to an anti-aliased dark-on-white raster.
pub fn rasterize(view: &SketchView, side: usize) -> Result<RasterImage> {
    if side == 0 {
        return Err(Error::config("raster side must be positive"));
    }
    let Payload::Vector(strokes) = &view.payload else {
        return Err(Error::VectorOnly);
    };
    Ok(rasterize_strokes(strokes, view.canvas_size as f64, side))
}

/// Affine augmentation about the image center, applied in the order
/// scale -> rotate -> translate. Translation is an integer pixel count
/// (`round(frac * side)`), background fills white.
pub fn augment(image: &RasterImage, params: &AugmentParams) -> Result<RasterImage> {
    params.validate()?;
    let side = image.side();
    let c = side as f64 / 2.0;
    let tx = (params.translate_frac.0 * side as f64).round();
    let ty = (params.translate_frac.1 * side as f64).round();
    let s = 1.0 + params.scale_frac;
    let theta = params.rotate_deg.to_radians();
    let (sin, cos) = (theta.sin(), theta.cos());

    // inverse map: undo translate, undo rotate, undo scale
    let mut out = RasterImage::new_white(side);
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - c - tx;
            let dy = y as f64 - c - ty;
            let rx = cos * dx + sin * dy;
            let ry = -sin * dx + cos * dy;
            let u = rx / s + c;
            let v = ry / s + c;
            out.set(x, y, image.sample(u, v));
        }
    }
    Ok(out)
}

/// Rescale a previously normalized raster so its ink box side becomes
/// `bbox_target`, re-centered on the same canvas.
pub fn scale_sweep_transform(image: &RasterImage, bbox_target: f64) -> Result<RasterImage> {
    let side = image.side() as f64;
    if !(1.0..=side).contains(&bbox_target) {
        return Err(Error::config(format!(
            "bbox target {bbox_target} outside [1, {side}]"
        )));
    }
    let bbox = image.ink_bbox().ok_or(Error::EmptySketch)?;
    let current = bbox.longest_side();
    if current < 1e-9 {
        return Err(Error::data("degenerate ink box, cannot rescale"));
    }
    let scale = bbox_target / current;
    Ok(rescale_about_center(
        image,
        scale,
        bbox.center(),
        image.side(),
    ))
}

/// Uniformly spaced sweep targets, inclusive on both ends.
pub fn sweep_targets(min: f64, max: f64, steps: usize) -> Vec<f64> {
    if steps <= 1 {
        return vec![min];
    }
    let step = (max - min) / (steps - 1) as f64;
    (0..steps).map(|i| min + step * i as f64).collect()
}
