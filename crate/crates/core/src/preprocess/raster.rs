//! Grayscale raster canvas, anti-aliased stroke rendering, and PNG I/O.
//!
//! Pixel convention: the image is a `side x side` grid of unit pixels whose
//! centers sit at integer coordinates `(x, y)`, `x` to the right, `y` down.
//! Values are intensities in `[0, 1]`, white background (1.0), dark ink.
//! The three channels of the external interface are identical, so a single
//! luminance plane is stored; PNG export replicates it to RGB.

use std::path::Path;

use crate::dataset::Stroke;
use crate::error::{Error, Result};
use crate::preprocess::BoundingBox;

/// Intensities strictly below this count as ink when measuring extents.
/// Chosen so faint anti-aliasing tails (and their PNG quantization) do not
/// smear bounding boxes.
pub const INK_THRESHOLD: f32 = 0.99;

/// Square grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    side: usize,
    pixels: Vec<f32>,
}

impl RasterImage {
    /// All-white canvas.
    pub fn new_white(side: usize) -> Self {
        RasterImage {
            side,
            pixels: vec![1.0; side * side],
        }
    }

    pub fn from_pixels(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(Error::data(format!(
                "raster payload length {} does not match side {}",
                pixels.len(),
                side
            )));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::data("raster intensities must lie in [0, 1]"));
        }
        Ok(RasterImage { side, pixels })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.side + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.side + x] = v.clamp(0.0, 1.0);
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Bilinear sample at continuous coordinates; outside the grid reads
    /// as background white.
    pub fn sample(&self, u: f64, v: f64) -> f32 {
        let last = (self.side - 1) as f64;
        if u < 0.0 || v < 0.0 || u > last || v > last {
            return 1.0;
        }
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        if fx == 0.0 && fy == 0.0 {
            return self.get(x0, y0);
        }
        let x1 = (x0 + 1).min(self.side - 1);
        let y1 = (y0 + 1).min(self.side - 1);
        let a = self.get(x0, y0) as f64;
        let b = self.get(x1, y0) as f64;
        let c = self.get(x0, y1) as f64;
        let d = self.get(x1, y1) as f64;
        let top = a + (b - a) * fx;
        let bot = c + (d - c) * fx;
        (top + (bot - top) * fy) as f32
    }

    /// Mean absolute per-pixel difference against another image of equal side.
    pub fn mean_abs_diff(&self, other: &RasterImage) -> Result<f64> {
        if self.side != other.side {
            return Err(Error::data("image sides differ"));
        }
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum();
        Ok(sum / self.pixels.len() as f64)
    }

    /// Tight box around ink pixels (intensity < [`INK_THRESHOLD`]), in pixel
    /// center coordinates. `None` when the canvas is blank.
    pub fn ink_bbox(&self) -> Option<BoundingBox> {
        let mut min_x = usize::MAX;
        let mut min_y = usize::MAX;
        let mut max_x = 0usize;
        let mut max_y = 0usize;
        let mut any = false;
        for y in 0..self.side {
            for x in 0..self.side {
                if self.get(x, y) < INK_THRESHOLD {
                    any = true;
                    min_x = min_x.min(x);
                    min_y = min_y.min(y);
                    max_x = max_x.max(x);
                    max_y = max_y.max(y);
                }
            }
        }
        if !any {
            return None;
        }
        Some(BoundingBox {
            min_x: min_x as f64,
            min_y: min_y as f64,
            max_x: max_x as f64,
            max_y: max_y as f64,
        })
    }

    pub fn from_png_path(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::data(format!("{}: failed to decode PNG: {e}", path.display())))?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w != h {
            return Err(Error::data(format!(
                "{}: raster views must be square, got {w}x{h}",
                path.display()
            )));
        }
        let pixels = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        RasterImage::from_pixels(w, pixels)
    }

    pub fn save_png_path(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.side as u32, self.side as u32);
        for y in 0..self.side {
            for x in 0..self.side {
                let v = (self.get(x, y) * 255.0).round().clamp(0.0, 255.0) as u8;
                buf.put_pixel(x as u32, y as u32, image::Rgb([v, v, v]));
            }
        }
        buf.save(path)
            .map_err(|e| Error::data(format!("{}: failed to write PNG: {e}", path.display())))
    }
}

/// Render strokes onto a white canvas with anti-aliasing and round caps.
///
/// Coverage is distance-based: a pixel at distance `d` from a segment of
/// width `w` receives alpha `clamp(w/2 + 0.5 - d, 0, 1)`; overlapping strokes
/// blend with darkest-wins, so stroke order never matters. `src_canvas` is
/// the coordinate space of the strokes; when it differs from `side` both
/// geometry and widths are scaled by `side / src_canvas`.
pub fn rasterize_strokes(strokes: &[Stroke], src_canvas: f64, side: usize) -> RasterImage {
    let mut img = RasterImage::new_white(side);
    let scale = side as f64 / src_canvas;
    for stroke in strokes {
        let w = stroke.width * scale;
        let half = w / 2.0;
        let reach = half + 1.0;
        for seg in stroke.points.windows(2) {
            let (x0, y0) = (seg[0].x * scale, seg[0].y * scale);
            let (x1, y1) = (seg[1].x * scale, seg[1].y * scale);
            let px_min = (x0.min(x1) - reach).floor().max(0.0) as usize;
            let px_max = (x0.max(x1) + reach).ceil().min((side - 1) as f64) as usize;
            let py_min = (y0.min(y1) - reach).floor().max(0.0) as usize;
            let py_max = (y0.max(y1) + reach).ceil().min((side - 1) as f64) as usize;
            if px_min > px_max || py_min > py_max {
                continue;
            }
            for py in py_min..=py_max {
                for px in px_min..=px_max {
                    let d = dist_point_segment(px as f64, py as f64, x0, y0, x1, y1);
                    let alpha = (half + 0.5 - d).clamp(0.0, 1.0) as f32;
                    if alpha > 0.0 {
                        let v = 1.0 - alpha;
                        let cur = img.get(px, py);
                        if v < cur {
                            img.set(px, py, v);
                        }
                    }
                }
            }
        }
    }
    img
}

fn dist_point_segment(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let dx = x1 - x0;
    let dy = y1 - y0;
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let cx = x0 + t * dx;
    let cy = y0 + t * dy;
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Point;

    fn hline(y: f64, x0: f64, x1: f64, width: f64) -> Stroke {
        Stroke {
            points: vec![Point { x: x0, y }, Point { x: x1, y }],
            width,
        }
    }

    #[test]
    fn horizontal_stroke_ink_thickness() {
        let img = rasterize_strokes(&[hline(100.0, 40.0, 180.0, 2.2)], 224.0, 224);
        // count rows darker than mid-gray at a column well inside the stroke
        let rows = (0..224).filter(|&y| img.get(112, y) < 0.5).count();
        assert!((2..=3).contains(&rows), "ink thickness {rows} not in 2..=3");
    }

    #[test]
    fn rasterize_is_deterministic() {
        let strokes = vec![hline(50.0, 10.0, 200.0, 2.2), hline(90.3, 15.5, 120.7, 1.0)];
        let a = rasterize_strokes(&strokes, 224.0, 224);
        let b = rasterize_strokes(&strokes, 224.0, 224);
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn untouched_region_stays_white() {
        let img = rasterize_strokes(&[hline(10.0, 5.0, 30.0, 2.2)], 224.0, 224);
        assert_eq!(img.get(200, 200), 1.0);
        assert_eq!(img.get(112, 112), 1.0);
    }

    #[test]
    fn blank_canvas_has_no_ink_bbox() {
        assert!(RasterImage::new_white(64).ink_bbox().is_none());
    }

    #[test]
    fn values_stay_in_unit_range() {
        let strokes = vec![
            hline(20.0, 0.0, 223.0, 5.0),
            hline(20.5, 0.0, 223.0, 5.0),
            hline(21.0, 0.0, 223.0, 5.0),
        ];
        let img = rasterize_strokes(&strokes, 224.0, 224);
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn png_round_trip_preserves_quantized_pixels(){
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = rasterize_strokes(&[hline(30.0, 5.0, 60.0, 2.2)], 64.0, 64);
        img.save_png_path(&path).unwrap();
        let back = RasterImage::from_png_path(&path).unwrap();
        let reload = {
            back.save_png_path(&path).unwrap();
            RasterImage::from_png_path(&path).unwrap()
        };
        assert_eq!(back.pixels(), reload.pixels());
    }
}
