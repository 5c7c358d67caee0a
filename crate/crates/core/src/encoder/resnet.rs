//! Inference-only bottleneck ResNet with stage taps.
//!
//! Supports the classic stem (7x7 stride-2 conv + max pool) and the
//! three-conv stem with average-pool downsampling used by contrastively
//! pretrained variants. Stage `l` output, flattened channel-major, is the
//! layer-`l` embedding. Fine-tuning strategies target transformer
//! encoders; this adapter serves zero-shot retrieval and analysis.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::preprocess::raster::RasterImage;

#[derive(Debug, Clone, PartialEq)]
pub enum StemKind {
    Classic,
    ThreeConv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResnetConfig {
    pub stem: StemKind,
    pub stage_blocks: Vec<usize>,
    pub base_channels: usize,
    pub input_side: usize,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
}

impl ResnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_blocks.len() != 4 {
            return Err(Error::config("resnet must declare 4 stages"));
        }
        if self.stage_blocks.iter().any(|&b| b == 0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        Ok(())
    }

    #[cfg(test)]
    fn stage_out_channels(&self, stage: usize) -> usize {
        self.base_channels * (1 << (stage - 1)) * 4
    }
}

/// Feature map in channel-major layout.
struct FeatureMap {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// Tensor with its declared shape (from the exchange descriptor).
pub type ShapedTensor = (Vec<usize>, Vec<f32>);

#[derive(Debug, Clone, PartialEq)]
pub struct ResnetModel {
    cfg: ResnetConfig,
    tensors: BTreeMap<String, ShapedTensor>,
}

impl ResnetModel {
    pub fn from_named_tensors(
        cfg: ResnetConfig,
        tensors: BTreeMap<String, ShapedTensor>,
    ) -> Result<Self> {
        cfg.validate()?;
        let model = ResnetModel { cfg, tensors };
        for name in model.required_tensor_names() {
            let Some((shape, data)) = model.tensors.get(&name) else {
                return Err(Error::data(format!(
                    "weights exchange is missing tensor `{name}`"
                )));
            };
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::data(format!(
                    "tensor `{name}` shape {shape:?} does not match {} values",
                    data.len()
                )));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ResnetConfig {
        &self.cfg
    }

    /// Names (without shapes) the forward pass will read.
    pub fn required_tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let conv_bn = |names: &mut Vec<String>, prefix: &str| {
            names.push(format!("{prefix}.conv.weight"));
            for p in ["gain", "bias", "mean", "var"] {
                names.push(format!("{prefix}.bn.{p}"));
            }
        };
        match self.cfg.stem {
            StemKind::Classic => conv_bn(&mut names, "stem1"),
            StemKind::ThreeConv => {
                conv_bn(&mut names, "stem1");
                conv_bn(&mut names, "stem2");
                conv_bn(&mut names, "stem3");
            }
        }
        for (s, &blocks) in self.cfg.stage_blocks.iter().enumerate() {
            let stage = s + 1;
            for b in 0..blocks {
                let p = format!("stage{stage}.block{b}");
                conv_bn(&mut names, &format!("{p}.c1"));
                conv_bn(&mut names, &format!("{p}.c2"));
                conv_bn(&mut names, &format!("{p}.c3"));
                if b == 0 {
                    conv_bn(&mut names, &format!("{p}.down"));
                }
            }
        }
        names
    }

    fn t(&self, name: &str) -> &[f32] {
        &self
            .tensors
            .get(name)
            .unwrap_or_else(|| panic!("validated tensor {name} missing"))
            .1
    }

    fn shape(&self, name: &str) -> &[usize] {
        &self
            .tensors
            .get(name)
            .unwrap_or_else(|| panic!("validated tensor {name} missing"))
            .0
    }

    /// Forward pass returning flattened stage outputs for each requested
    /// 1-based stage index (ascending order required).
    pub fn forward_taps(&self, img: &RasterImage, stages: &[usize]) -> Result<Vec<Vec<f32>>> {
        if img.side() != self.cfg.input_side {
            return Err(Error::data(format!(
                "image side {} does not match encoder input {}",
                img.side(),
                self.cfg.input_side
            )));
        }
        let max_stage = *stages.iter().max().unwrap_or(&4);

        // normalized 3-channel input from the luminance plane
        let side = img.side();
        let mut x = FeatureMap::zeros(3, side, side);
        for c in 0..3 {
            let (mean, std) = (
                self.cfg.channel_mean[c] as f32,
                self.cfg.channel_std[c] as f32,
            );
            for y in 0..side {
                for xx in 0..side {
                    x.data[(c * side + y) * side + xx] = (img.get(xx, y) - mean) / std;
                }
            }
        }

        let mut x = match self.cfg.stem {
            StemKind::Classic => {
                let x = self.conv_bn_relu(&x, "stem1", 2, 3);
                max_pool(&x, 3, 2, 1)
            }
            StemKind::ThreeConv => {
                let x = self.conv_bn_relu(&x, "stem1", 2, 1);
                let x = self.conv_bn_relu(&x, "stem2", 1, 1);
                let x = self.conv_bn_relu(&x, "stem3", 1, 1);
                avg_pool2(&x)
            }
        };

        let mut taps = Vec::new();
        for stage in 1..=max_stage {
            let blocks = self.cfg.stage_blocks[stage - 1];
            for b in 0..blocks {
                let stride = if stage > 1 && b == 0 { 2 } else { 1 };
                x = self.bottleneck(&x, &format!("stage{stage}.block{b}"), stride, b == 0);
            }
            if stages.contains(&stage) {
                taps.push(x.data.clone());
            }
        }
        for tap in &taps {
            if tap.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("resnet activation".into()));
            }
        }
        Ok(taps)
    }

    fn conv_bn_relu(&self, x: &FeatureMap, prefix: &str, stride: usize, pad: usize) -> FeatureMap {
        let mut out = self.conv(x, &format!("{prefix}.conv.weight"), stride, pad);
        self.bn_inplace(&mut out, prefix);
        relu_inplace(&mut out);
        out
    }

    fn bottleneck(&self, x: &FeatureMap, prefix: &str, stride: usize, downsample: bool) -> FeatureMap {
        let clip_style = self.cfg.stem == StemKind::ThreeConv;
        let mut y = self.conv_bn_relu(x, &format!("{prefix}.c1"), 1, 0);
        if clip_style {
            // stride-1 conv followed by average pooling
            y = self.conv_bn_relu(&y, &format!("{prefix}.c2"), 1, 1);
            if stride == 2 {
                y = avg_pool2(&y);
            }
        } else {
            y = self.conv_bn_relu(&y, &format!("{prefix}.c2"), stride, 1);
        }
        let mut y = self.conv(&y, &format!("{prefix}.c3.conv.weight"), 1, 0);
        self.bn_inplace(&mut y, &format!("{prefix}.c3"));

        let identity = if downsample {
            let base = if clip_style && stride == 2 {
                avg_pool2(x)
            } else {
                FeatureMap {
                    c: x.c,
                    h: x.h,
                    w: x.w,
                    data: x.data.clone(),
                }
            };
            let s = if clip_style { 1 } else { stride };
            let mut d = self.conv(&base, &format!("{prefix}.down.conv.weight"), s, 0);
            self.bn_inplace(&mut d, &format!("{prefix}.down"));
            d
        } else {
            FeatureMap {
                c: x.c,
                h: x.h,
                w: x.w,
                data: x.data.clone(),
            }
        };

        debug_assert_eq!(y.data.len(), identity.data.len());
        for (a, b) in y.data.iter_mut().zip(&identity.data) {
            *a += b;
        }
        relu_inplace(&mut y);
        y
    }

    fn conv(&self, x: &FeatureMap, weight_name: &str, stride: usize, pad: usize) -> FeatureMap {
        let w = self.t(weight_name);
        // weight layout [out, in, kh, kw]
        let shape = self.shape(weight_name);
        assert_eq!(shape.len(), 4, "conv weight {weight_name} must be 4-d");
        let (cout, cin, k) = (shape[0], shape[1], shape[2]);
        assert_eq!(cin, x.c, "conv {weight_name}: channel mismatch");
        let oh = (x.h + 2 * pad - k) / stride + 1;
        let ow = (x.w + 2 * pad - k) / stride + 1;
        let mut out = FeatureMap::zeros(cout, oh, ow);
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..cin {
                        let wbase = ((co * cin + ci) * k) * k;
                        for ky in 0..k {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= x.h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= x.w {
                                    continue;
                                }
                                acc += w[wbase + ky * k + kx] * x.at(ci, iy - pad, ix - pad);
                            }
                        }
                    }
                    out.data[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn bn_inplace(&self, x: &mut FeatureMap, prefix: &str) {
        let gain = self.t(&format!("{prefix}.bn.gain"));
        let bias = self.t(&format!("{prefix}.bn.bias"));
        let mean = self.t(&format!("{prefix}.bn.mean"));
        let var = self.t(&format!("{prefix}.bn.var"));
        let hw = x.h * x.w;
        for c in 0..x.c {
            let scale = gain[c] / (var[c] + 1e-5).sqrt();
            let shift = bias[c] - mean[c] * scale;
            for v in &mut x.data[c * hw..(c + 1) * hw] {
                *v = *v * scale + shift;
            }
        }
    }
}

fn relu_inplace(x: &mut FeatureMap) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn max_pool(x: &FeatureMap, k: usize, stride: usize, pad: usize) -> FeatureMap {
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut out = FeatureMap::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                for ky in 0..k {
                    let iy = oy * stride + ky;
                    if iy < pad || iy - pad >= x.h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox * stride + kx;
                        if ix < pad || ix - pad >= x.w {
                            continue;
                        }
                        best = best.max(x.at(c, iy - pad, ix - pad));
                    }
                }
                out.data[(c * oh + oy) * ow + ox] = best;
            }
        }
    }
    out
}

fn avg_pool2(x: &FeatureMap) -> FeatureMap {
    let oh = x.h / 2;
    let ow = x.w / 2;
    let mut out = FeatureMap::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for ky in 0..2 {
                    for kx in 0..2 {
                        acc += x.at(c, oy * 2 + ky, ox * 2 + kx);
                    }
                }
                out.data[(c * oh + oy) * ow + ox] = acc / 4.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(stem: StemKind) -> ResnetConfig {
        ResnetConfig {
            stem,
            stage_blocks: vec![1, 1, 1, 1],
            base_channels: 4,
            input_side: 32,
            channel_mean: [0.5; 3],
            channel_std: [0.5; 3],
        }
    }

    fn build(cfg: ResnetConfig, seed: u64) -> ResnetModel {
        // construct tensors with the right shapes for the tiny config
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors: BTreeMap<String, ShapedTensor> = BTreeMap::new();
        let mut conv_bn = |tensors: &mut BTreeMap<String, ShapedTensor>,
                           prefix: &str,
                           cin: usize,
                           cout: usize,
                           k: usize| {
            let w: Vec<f32> = (0..cout * cin * k * k)
                .map(|_| rng.gen_range(-0.2..0.2))
                .collect();
            tensors.insert(
                format!("{prefix}.conv.weight"),
                (vec![cout, cin, k, k], w),
            );
            tensors.insert(format!("{prefix}.bn.gain"), (vec![cout], vec![1.0; cout]));
            tensors.insert(format!("{prefix}.bn.bias"), (vec![cout], vec![0.0; cout]));
            tensors.insert(format!("{prefix}.bn.mean"), (vec![cout], vec![0.0; cout]));
            tensors.insert(format!("{prefix}.bn.var"), (vec![cout], vec![1.0; cout]));
        };

        let base = cfg.base_channels;
        match cfg.stem {
            StemKind::Classic => conv_bn(&mut tensors, "stem1", 3, base, 7),
            StemKind::ThreeConv => {
                conv_bn(&mut tensors, "stem1", 3, base / 2, 3);
                conv_bn(&mut tensors, "stem2", base / 2, base / 2, 3);
                conv_bn(&mut tensors, "stem3", base / 2, base, 3);
            }
        }
        let mut cin = base;
        for stage in 1..=4usize {
            let mid = base * (1 << (stage - 1));
            let cout = mid * 4;
            let p = format!("stage{stage}.block0");
            conv_bn(&mut tensors, &format!("{p}.c1"), cin, mid, 1);
            conv_bn(&mut tensors, &format!("{p}.c2"), mid, mid, 3);
            conv_bn(&mut tensors, &format!("{p}.c3"), mid, cout, 1);
            conv_bn(&mut tensors, &format!("{p}.down"), cin, cout, 1);
            cin = cout;
        }
        ResnetModel::from_named_tensors(cfg, tensors).unwrap()
    }

    fn test_image(side: usize) -> RasterImage {
        use crate::dataset::{Point, Stroke};
        crate::preprocess::raster::rasterize_strokes(
            &[Stroke {
                points: vec![
                    Point { x: 2.0, y: 5.0 },
                    Point {
                        x: side as f64 - 3.0,
                        y: side as f64 - 8.0,
                    },
                ],
                width: 1.5,
            }],
            side as f64,
            side,
        )
    }

    #[test]
    fn stage_taps_have_expected_dims() {
        for stem in [StemKind::Classic, StemKind::ThreeConv] {
            let model = build(tiny_cfg(stem), 3);
            let taps = model.forward_taps(&test_image(32), &[1, 2, 3, 4]).unwrap();
            // input 32 -> stem /4 -> 8; stages halve from stage 2 on
            let sides = [8usize, 4, 2, 1];
            for (i, tap) in taps.iter().enumerate() {
                let c = model.cfg.stage_out_channels(i + 1);
                assert_eq!(tap.len(), c * sides[i] * sides[i], "stage {}", i + 1);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = build(tiny_cfg(StemKind::Classic), 5);
        let img = test_image(32);
        let a = model.forward_taps(&img, &[3]).unwrap();
        let b = model.forward_taps(&img, &[3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_input_side_is_rejected() {
        let model = build(tiny_cfg(StemKind::Classic), 5);
        assert!(model.forward_taps(&test_image(16), &[3]).is_err());
    }
}
