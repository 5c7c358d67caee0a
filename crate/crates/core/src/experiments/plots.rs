//! Dependency-free plot rendering: accuracy-vs-axis line plots and grid
//! heatmaps drawn with the stroke rasterizer plus a tiny 3x5 digit font.
//! Output is deterministic pixel-for-pixel.

use crate::dataset::{Point, Stroke};
use crate::preprocess::raster::{rasterize_strokes, RasterImage};

const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;

fn glyph(c: char) -> Option<[u8; GLYPH_H]> {
    // 3-bit rows, MSB left
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b011, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        _ => return None,
    })
}

fn blit_text(img: &mut RasterImage, x: usize, y: usize, text: &str, scale: usize) {
    let mut cx = x;
    for c in text.chars() {
        if let Some(rows) = glyph(c) {
            for (ry, row) in rows.iter().enumerate() {
                for rx in 0..GLYPH_W {
                    if row & (1 << (GLYPH_W - 1 - rx)) != 0 {
                        for sy in 0..scale {
                            for sx in 0..scale {
                                let px = cx + rx * scale + sx;
                                let py = y + ry * scale + sy;
                                if px < img.side() && py < img.side() {
                                    img.set(px, py, 0.0);
                                }
                            }
                        }
                    }
                }
            }
        }
        cx += (GLYPH_W + 1) * scale;
    }
}

fn format_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.1}")
    }
}

/// Line plot of `(x, y)` points on a square canvas; y spans `y_range`
/// (accuracy plots use 0..100).
pub fn line_plot(points: &[(f64, f64)], y_range: (f64, f64), side: usize) -> RasterImage {
    let margin_l = 34.0;
    let margin_b = 24.0;
    let margin_t = 10.0;
    let margin_r = 10.0;
    let plot_w = side as f64 - margin_l - margin_r;
    let plot_h = side as f64 - margin_t - margin_b;

    let (x_min, x_max) = points.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
        (lo.min(p.0), hi.max(p.0))
    });
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let (y_min, y_max) = y_range;
    let y_span = if y_max > y_min { y_max - y_min } else { 1.0 };

    let to_px = |x: f64, y: f64| Point {
        x: margin_l + (x - x_min) / x_span * plot_w,
        y: margin_t + (1.0 - (y - y_min) / y_span) * plot_h,
    };

    let mut strokes = Vec::new();
    // axes
    strokes.push(Stroke {
        points: vec![to_px(x_min, y_min), to_px(x_max, y_min)],
        width: 1.0,
    });
    strokes.push(Stroke {
        points: vec![to_px(x_min, y_min), to_px(x_min, y_max)],
        width: 1.0,
    });
    // data polyline
    if points.len() >= 2 {
        let mut sorted = points.to_vec();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        strokes.push(Stroke {
            points: sorted.iter().map(|&(x, y)| to_px(x, y)).collect(),
            width: 1.6,
        });
    }
    let mut img = rasterize_strokes(&strokes, side as f64, side);

    // tick labels: x extremes, y extremes and midpoint
    let scale = 2;
    let xl = to_px(x_min, y_min);
    blit_text(&mut img, xl.x as usize, (xl.y + 6.0) as usize, &format_tick(x_min), scale);
    let xr = to_px(x_max, y_min);
    let label = format_tick(x_max);
    let w = label.chars().count() * (GLYPH_W + 1) * scale;
    blit_text(&mut img, (xr.x as usize).saturating_sub(w), (xr.y + 6.0) as usize, &label, scale);
    for frac in [0.0, 0.5, 1.0] {
        let yv = y_min + frac * y_span;
        let p = to_px(x_min, yv);
        blit_text(
            &mut img,
            2,
            (p.y as usize).saturating_sub(GLYPH_H * scale / 2),
            &format_tick(yv),
            scale,
        );
    }
    img
}

/// Grid heatmap; `values[r * cols + c]` maps to gray where dark = low.
pub fn heatmap_grid(values: &[f64], rows: usize, cols: usize, lo: f64, hi: f64) -> RasterImage {
    let cell = (320usize / rows.max(cols).max(1)).clamp(4, 40);
    let side = rows.max(cols) * cell;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RasterImage::new_white(side);
    for r in 0..rows {
        for c in 0..cols {
            let v = ((values[r * cols + c] - lo) / span).clamp(0.0, 1.0) as f32;
            for y in 0..cell {
                for x in 0..cell {
                    img.set(c * cell + x, r * cell + y, v);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_plot_is_deterministic_and_bounded() {
        let pts: Vec<(f64, f64)> = (0..60)
            .map(|i| (85.0 + i as f64 * 1.7288, 40.0 + (i % 7) as f64 * 5.0))
            .collect();
        let a = line_plot(&pts, (0.0, 100.0), 360);
        let b = line_plot(&pts, (0.0, 100.0), 360);
        assert_eq!(a.pixels(), b.pixels());
        assert!(a.pixels().iter().any(|&v| v < 0.5), "plot has ink");
    }

    #[test]
    fn heatmap_shades_span_lo_hi() {
        let img = heatmap_grid(&[0.0, 50.0, 100.0, 25.0], 2, 2, 0.0, 100.0);
        assert_eq!(img.get(0, 0), 0.0); // value 0 -> black
        assert_eq!(img.get(0, img.side() - 1), 1.0); // value 100 -> white
        assert!((img.get(img.side() - 1, 0) - 0.5).abs() < 1e-6); // value 50
    }
}
