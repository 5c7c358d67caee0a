//! Minimal SVG 1.1 reader/writer for the polyline/path/line subset used by
//! the sketch pipeline. Coordinates are written with Rust's shortest
//! round-trip float formatting so save -> load is exact.

use crate::dataset::{Point, Stroke};
use crate::error::{Error, Result};

/// Serialize strokes as a standalone SVG document on a square canvas.
pub fn write_svg(strokes: &[Stroke], canvas: u32) -> String {
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{canvas}\" height=\"{canvas}\" viewBox=\"0 0 {canvas} {canvas}\">\n"
    ));
    for stroke in strokes {
        let pts: Vec<String> = stroke
            .points
            .iter()
            .map(|p| format!("{},{}", p.x, p.y))
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"{}\" stroke-linecap=\"round\"/>\n",
            pts.join(" "),
            stroke.width
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Parse the supported subset: `polyline`, `line`, and `path` with
/// `M/m/L/l/H/h/V/v/Z/z` commands. Returns strokes plus the canvas side.
pub fn parse_svg(text: &str) -> Result<(Vec<Stroke>, u32)> {
    let mut canvas: Option<u32> = None;
    let mut strokes = Vec::new();

    for tag in iter_tags(text) {
        let (name, attrs) = parse_tag(tag)?;
        match name.as_str() {
            "svg" => {
                canvas = Some(svg_canvas(&attrs)?);
            }
            "polyline" | "polygon" => {
                let pts_attr = attr(&attrs, "points")
                    .ok_or_else(|| Error::data("polyline without points attribute"))?;
                let mut points = parse_points(pts_attr)?;
                if name == "polygon" && points.len() >= 2 {
                    points.push(points[0]);
                }
                strokes.push(Stroke {
                    points,
                    width: stroke_width(&attrs),
                });
            }
            "line" => {
                let num = |k: &str| -> Result<f64> {
                    attr(&attrs, k)
                        .ok_or_else(|| Error::data(format!("line without {k}")))?
                        .parse::<f64>()
                        .map_err(|e| Error::data(format!("bad {k}: {e}")))
                };
                strokes.push(Stroke {
                    points: vec![
                        Point {
                            x: num("x1")?,
                            y: num("y1")?,
                        },
                        Point {
                            x: num("x2")?,
                            y: num("y2")?,
                        },
                    ],
                    width: stroke_width(&attrs),
                });
            }
            "path" => {
                let d = attr(&attrs, "d").ok_or_else(|| Error::data("path without d"))?;
                let width = stroke_width(&attrs);
                for points in parse_path(d)? {
                    strokes.push(Stroke { points, width });
                }
            }
            _ => {}
        }
    }

    let canvas = canvas.ok_or_else(|| Error::data("missing <svg> root element"))?;
    Ok((strokes, canvas))
}

fn svg_canvas(attrs: &[(String, String)]) -> Result<u32> {
    let parse_len = |v: &str| -> Option<f64> { v.trim().trim_end_matches("px").parse().ok() };
    if let Some(vb) = attr(attrs, "viewBox") {
        let nums: Vec<f64> = vb
            .split([' ', ','])
            .filter(|s| !s.is_empty())
            .filter_map(|s| s.parse().ok())
            .collect();
        if nums.len() == 4 {
            return Ok(nums[2].max(nums[3]).round() as u32);
        }
    }
    match (
        attr(attrs, "width").and_then(|v| parse_len(v)),
        attr(attrs, "height").and_then(|v| parse_len(v)),
    ) {
        (Some(w), Some(h)) => Ok(w.max(h).round() as u32),
        _ => Err(Error::data("svg element lacks viewBox and width/height")),
    }
}

fn stroke_width(attrs: &[(String, String)]) -> f64 {
    attr(attrs, "stroke-width")
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(1.0)
}

fn attr<'a>(attrs: &'a [(String, String)], name: &str) -> Option<&'a str> {
    attrs
        .iter()
        .find(|(k, _)| k == name)
        .map(|(_, v)| v.as_str())
}

/// Yield the inside of each `<...>` tag, skipping comments and declarations.
fn iter_tags(text: &str) -> Vec<&str> {
    let mut tags = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'<' {
            i += 1;
            continue;
        }
        if text[i..].starts_with("<!--") {
            match text[i..].find("-->") {
                Some(off) => i += off + 3,
                None => break,
            }
            continue;
        }
        let mut j = i + 1;
        let mut quote: Option<u8> = None;
        while j < bytes.len() {
            let b = bytes[j];
            match quote {
                Some(q) if b == q => quote = None,
                None if b == b'"' || b == b'\'' => quote = Some(b),
                None if b == b'>' => break,
                _ => {}
            }
            j += 1;
        }
        if j >= bytes.len() {
            break;
        }
        let inner = &text[i + 1..j];
        // skip declarations and closing tags
        if !inner.starts_with('?') && !inner.starts_with('!') && !inner.starts_with('/') {
            tags.push(inner);
        }
        i = j + 1;
    }
    tags
}

fn parse_tag(tag: &str) -> Result<(String, Vec<(String, String)>)> {
    let tag = tag.trim().trim_end_matches('/').trim();
    let mut chars = tag.char_indices().peekable();
    let mut name_end = tag.len();
    for (idx, c) in chars.by_ref() {
        if c.is_whitespace() {
            name_end = idx;
            break;
        }
    }
    let name = tag[..name_end].trim().to_string();
    let mut attrs = Vec::new();
    let rest = &tag[name_end..];
    let bytes = rest.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        while i < bytes.len() && (bytes[i] as char).is_whitespace() {
            i += 1;
        }
        if i >= bytes.len() {
            break;
        }
        let key_start = i;
        while i < bytes.len() && bytes[i] != b'=' && !(bytes[i] as char).is_whitespace() {
            i += 1;
        }
        let key = rest[key_start..i].to_string();
        while i < bytes.len() && (bytes[i] as char).is_whitespace() {
            i += 1;
        }
        if i >= bytes.len() || bytes[i] != b'=' {
            // bare attribute, ignore
            continue;
        }
        i += 1;
        while i < bytes.len() && (bytes[i] as char).is_whitespace() {
            i += 1;
        }
        if i >= bytes.len() || (bytes[i] != b'"' && bytes[i] != b'\'') {
            return Err(Error::data(format!("unquoted attribute value for `{key}`")));
        }
        let q = bytes[i];
        i += 1;
        let val_start = i;
        while i < bytes.len() && bytes[i] != q {
            i += 1;
        }
        if i >= bytes.len() {
            return Err(Error::data(format!("unterminated value for `{key}`")));
        }
        attrs.push((key, rest[val_start..i].to_string()));
        i += 1;
    }
    Ok((name, attrs))
}

fn parse_points(s: &str) -> Result<Vec<Point>> {
    let nums: Vec<f64> = s
        .split([' ', ',', '\t', '\n', '\r'])
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| Error::data(format!("bad point value `{t}`: {e}")))
        })
        .collect::<Result<_>>()?;
    if nums.len() < 4 || nums.len() % 2 != 0 {
        return Err(Error::data(format!(
            "points list must hold >= 2 x,y pairs, got {} values",
            nums.len()
        )));
    }
    Ok(nums
        .chunks(2)
        .map(|c| Point { x: c[0], y: c[1] })
        .collect())
}

struct PathCursor {
    tokens: Vec<PathToken>,
    i: usize,
}

impl PathCursor {
    fn next_is_num(&self) -> bool {
        matches!(self.tokens.get(self.i), Some(PathToken::Num(_)))
    }

    fn take(&mut self, n: usize, cmd: char) -> Result<Vec<f64>> {
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            match self.tokens.get(self.i) {
                Some(PathToken::Num(v)) => {
                    vals.push(*v);
                    self.i += 1;
                }
                _ => return Err(Error::data(format!("command `{cmd}` missing operand"))),
            }
        }
        Ok(vals)
    }
}

/// Straight-line path subset; each `M` starts a new polyline.
fn parse_path(d: &str) -> Result<Vec<Vec<Point>>> {
    let mut polylines: Vec<Vec<Point>> = Vec::new();
    let mut current: Vec<Point> = Vec::new();
    let mut pos = Point { x: 0.0, y: 0.0 };
    let mut start = pos;

    let mut cur = PathCursor {
        tokens: tokenize_path(d)?,
        i: 0,
    };
    while cur.i < cur.tokens.len() {
        let PathToken::Cmd(cmd) = cur.tokens[cur.i] else {
            return Err(Error::data("path data must start with a command"));
        };
        cur.i += 1;
        match cmd {
            'M' | 'm' => {
                let v = cur.take(2, cmd)?;
                if current.len() >= 2 {
                    polylines.push(std::mem::take(&mut current));
                } else {
                    current.clear();
                }
                pos = if cmd == 'm' {
                    Point {
                        x: pos.x + v[0],
                        y: pos.y + v[1],
                    }
                } else {
                    Point { x: v[0], y: v[1] }
                };
                start = pos;
                current.push(pos);
                // subsequent pairs after a moveto are implicit linetos
                while cur.next_is_num() {
                    let v = cur.take(2, cmd)?;
                    pos = if cmd == 'm' {
                        Point {
                            x: pos.x + v[0],
                            y: pos.y + v[1],
                        }
                    } else {
                        Point { x: v[0], y: v[1] }
                    };
                    current.push(pos);
                }
            }
            'L' | 'l' => loop {
                let v = cur.take(2, cmd)?;
                pos = if cmd == 'l' {
                    Point {
                        x: pos.x + v[0],
                        y: pos.y + v[1],
                    }
                } else {
                    Point { x: v[0], y: v[1] }
                };
                current.push(pos);
                if !cur.next_is_num() {
                    break;
                }
            },
            'H' | 'h' => loop {
                let v = cur.take(1, cmd)?;
                pos = Point {
                    x: if cmd == 'h' { pos.x + v[0] } else { v[0] },
                    y: pos.y,
                };
                current.push(pos);
                if !cur.next_is_num() {
                    break;
                }
            },
            'V' | 'v' => loop {
                let v = cur.take(1, cmd)?;
                pos = Point {
                    x: pos.x,
                    y: if cmd == 'v' { pos.y + v[0] } else { v[0] },
                };
                current.push(pos);
                if !cur.next_is_num() {
                    break;
                }
            },
            'Z' | 'z' => {
                pos = start;
                current.push(pos);
            }
            other => {
                return Err(Error::data(format!(
                    "unsupported path command `{other}` (straight-line subset only)"
                )));
            }
        }
    }
    if current.len() >= 2 {
        polylines.push(current);
    }
    Ok(polylines)
}

#[derive(Debug, Clone, Copy)]
enum PathToken {
    Cmd(char),
    Num(f64),
}

fn tokenize_path(d: &str) -> Result<Vec<PathToken>> {
    let mut tokens = Vec::new();
    let bytes = d.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_whitespace() || c == ',' {
            i += 1;
        } else if c.is_ascii_alphabetic() {
            tokens.push(PathToken::Cmd(c));
            i += 1;
        } else {
            let start = i;
            i += 1; // sign or first digit
            while i < bytes.len() {
                let b = bytes[i] as char;
                let is_num = b.is_ascii_digit()
                    || b == '.'
                    || ((b == 'e' || b == 'E') && i + 1 < bytes.len())
                    || ((b == '+' || b == '-')
                        && matches!(bytes[i - 1] as char, 'e' | 'E'));
                if !is_num {
                    break;
                }
                i += 1;
            }
            let tok = &d[start..i];
            let v = tok
                .parse::<f64>()
                .map_err(|e| Error::data(format!("bad path number `{tok}`: {e}")))?;
            tokens.push(PathToken::Num(v));
        }
    }
    Ok(tokens)
}
