//! Differentiable transformer image encoder with explicit forward/backward.
//!
//! Parameters live in one flat `f64` vector described by named segments, so
//! optimizer masking, finite-difference checks, and the weights exchange
//! format all address the same storage. Blocks are pre-LN:
//! `h = x + Attn(LN1(x)); out = h + MLP(LN2(h))`. The layer-`l` tap is the
//! flattened token sequence (class token + patch tokens) after block `l`;
//! prompt tokens, when present, are excluded from taps.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::preprocess::raster::RasterImage;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransformerConfig {
    pub input_side: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub width: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub ln_eps: f64,
    /// Learnable tokens appended per block (0 disables prompting).
    pub prompt_tokens: usize,
    /// Number of leading blocks that carry prompt tokens.
    pub prompt_depth: usize,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_side % self.patch_size != 0 {
            return Err(Error::config(format!(
                "input side {} not divisible by patch {}",
                self.input_side, self.patch_size
            )));
        }
        if self.width % self.num_heads != 0 {
            return Err(Error::config(format!(
                "width {} not divisible by heads {}",
                self.width, self.num_heads
            )));
        }
        if !(1..=3).contains(&self.in_channels) {
            return Err(Error::config("in_channels must be 1..=3"));
        }
        if self.prompt_depth > self.num_blocks {
            return Err(Error::config("prompt depth exceeds block count"));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.input_side / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Class token plus patch tokens; prompt tokens are not counted.
    pub fn n_img_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    /// Dimension of every layer tap.
    pub fn embed_dim(&self) -> usize {
        self.n_img_tokens() * self.width
    }

    fn tokens_at_block(&self, block: usize) -> usize {
        if self.prompt_tokens > 0 && block < self.prompt_depth {
            self.n_img_tokens() + self.prompt_tokens
        } else {
            self.n_img_tokens()
        }
    }
}

/// Which parameters a tensor belongs to; drives trainable masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Stem,
    /// 1-based block index.
    LayerNorm { block: usize },
    Attention { block: usize },
    Mlp { block: usize },
    Prompt { block: usize },
}

#[derive(Debug, Clone)]
pub struct ParamSegment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
    pub kind: SegmentKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    cfg: TransformerConfig,
    params: Vec<f64>,
    segments: Vec<ParamSegment>,
}

impl PartialEq for ParamSegment {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.offset == other.offset && self.len == other.len
    }
}

fn layout(cfg: &TransformerConfig) -> Vec<ParamSegment> {
    let w = cfg.width;
    let mut segs = Vec::new();
    let mut offset = 0usize;
    let mut push = |name: String, shape: Vec<usize>, kind: SegmentKind, offset: &mut usize| {
        let len: usize = shape.iter().product();
        segs.push(ParamSegment {
            name,
            offset: *offset,
            len,
            shape,
            kind,
        });
        *offset += len;
    };

    push(
        "patch.weight".into(),
        vec![w, cfg.patch_dim()],
        SegmentKind::Stem,
        &mut offset,
    );
    push("patch.bias".into(), vec![w], SegmentKind::Stem, &mut offset);
    push("class_token".into(), vec![w], SegmentKind::Stem, &mut offset);
    push(
        "pos_embed".into(),
        vec![cfg.n_img_tokens(), w],
        SegmentKind::Stem,
        &mut offset,
    );
    for b in 1..=cfg.num_blocks {
        let ln = SegmentKind::LayerNorm { block: b };
        let at = SegmentKind::Attention { block: b };
        let ml = SegmentKind::Mlp { block: b };
        push(format!("block{b}.ln1.gain"), vec![w], ln, &mut offset);
        push(format!("block{b}.ln1.bias"), vec![w], ln, &mut offset);
        for part in ["q", "k", "v", "out"] {
            push(format!("block{b}.attn.{part}.weight"), vec![w, w], at, &mut offset);
            push(format!("block{b}.attn.{part}.bias"), vec![w], at, &mut offset);
        }
        push(format!("block{b}.ln2.gain"), vec![w], ln, &mut offset);
        push(format!("block{b}.ln2.bias"), vec![w], ln, &mut offset);
        push(
            format!("block{b}.mlp.fc1.weight"),
            vec![cfg.mlp_hidden, w],
            ml,
            &mut offset,
        );
        push(format!("block{b}.mlp.fc1.bias"), vec![cfg.mlp_hidden], ml, &mut offset);
        push(
            format!("block{b}.mlp.fc2.weight"),
            vec![w, cfg.mlp_hidden],
            ml,
            &mut offset,
        );
        push(format!("block{b}.mlp.fc2.bias"), vec![w], ml, &mut offset);
    }
    if cfg.prompt_tokens > 0 {
        for b in 1..=cfg.prompt_depth {
            push(
                format!("block{b}.prompts"),
                vec![cfg.prompt_tokens, w],
                SegmentKind::Prompt { block: b },
                &mut offset,
            );
        }
    }
    segs
}

impl Transformer {
    /// Build with seeded weights: Xavier-uniform linear layers, unit
    /// LayerNorm gains, small uniform class/position/prompt embeddings.
    pub fn init(cfg: TransformerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let segments = layout(&cfg);
        let total: usize = segments.iter().map(|s| s.len).sum();
        let mut params = vec![0.0f64; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for seg in &segments {
            let slice = &mut params[seg.offset..seg.offset + seg.len];
            init_segment(seg, slice, &mut rng);
        }
        Ok(Transformer {
            cfg,
            params,
            segments,
        })
    }

    /// Build from named tensors (weights exchange ingestion).
    pub fn from_named_tensors(
        cfg: TransformerConfig,
        tensors: &BTreeMap<String, Vec<f32>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let segments = layout(&cfg);
        let total: usize = segments.iter().map(|s| s.len).sum();
        let mut params = vec![0.0f64; total];
        for seg in &segments {
            let data = tensors.get(&seg.name).ok_or_else(|| {
                Error::data(format!("weights exchange is missing tensor `{}`", seg.name))
            })?;
            if data.len() != seg.len {
                return Err(Error::data(format!(
                    "tensor `{}` has {} values, expected {}",
                    seg.name,
                    data.len(),
                    seg.len
                )));
            }
            for (dst, src) in params[seg.offset..seg.offset + seg.len]
                .iter_mut()
                .zip(data)
            {
                *dst = *src as f64;
            }
        }
        Ok(Transformer {
            cfg,
            params,
            segments,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn segments(&self) -> &[ParamSegment] {
        &self.segments
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn segment(&self, name: &str) -> Option<&ParamSegment> {
        self.segments.iter().find(|s| s.name == name)
    }

    fn seg_slice(&self, name: &str) -> &[f64] {
        let seg = self
            .segment(name)
            .unwrap_or_else(|| panic!("missing segment {name}"));
        &self.params[seg.offset..seg.offset + seg.len]
    }

    /// Keep only blocks `1..=upto`; the truncated network's final output
    /// equals the full network's layer-`upto` tap exactly.
    pub fn truncate(&self, upto: usize) -> Result<Transformer> {
        if upto == 0 || upto > self.cfg.num_blocks {
            return Err(Error::config(format!(
                "layer {upto} outside 1..={}",
                self.cfg.num_blocks
            )));
        }
        let mut cfg = self.cfg.clone();
        cfg.num_blocks = upto;
        cfg.prompt_depth = cfg.prompt_depth.min(upto);
        if cfg.prompt_depth == 0 {
            cfg.prompt_tokens = 0;
        }
        let segments = layout(&cfg);
        let total: usize = segments.iter().map(|s| s.len).sum();
        let mut params = vec![0.0f64; total];
        for seg in &segments {
            let src = self.seg_slice(&seg.name);
            params[seg.offset..seg.offset + seg.len].copy_from_slice(src);
        }
        Ok(Transformer {
            cfg,
            params,
            segments,
        })
    }

    /// Fresh random weights with the same architecture.
    pub fn reinitialized(&self, seed: u64) -> Transformer {
        Transformer::init(self.cfg.clone(), seed).expect("config already validated")
    }

    /// Add `tokens` learnable prompt tokens to the first `depth` blocks,
    /// keeping every base weight. Prompt embeddings are seeded.
    pub fn with_prompts(&self, tokens: usize, depth: usize, seed: u64) -> Result<Transformer> {
        let mut cfg = self.cfg.clone();
        cfg.prompt_tokens = tokens;
        cfg.prompt_depth = depth.min(cfg.num_blocks);
        cfg.validate()?;
        let segments = layout(&cfg);
        let total: usize = segments.iter().map(|s| s.len).sum();
        let mut params = vec![0.0f64; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for seg in &segments {
            let dst = &mut params[seg.offset..seg.offset + seg.len];
            if let SegmentKind::Prompt { .. } = seg.kind {
                for v in dst.iter_mut() {
                    *v = rng.gen_range(-0.02..=0.02);
                }
            } else {
                dst.copy_from_slice(self.seg_slice(&seg.name));
            }
        }
        Ok(Transformer {
            cfg,
            params,
            segments,
        })
    }

    /// Per-parameter trainability under a mask kind predicate.
    pub fn mask_where<F: Fn(&SegmentKind) -> bool>(&self, pred: F) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for seg in &self.segments {
            if pred(&seg.kind) {
                mask[seg.offset..seg.offset + seg.len]
                    .iter_mut()
                    .for_each(|m| *m = true);
            }
        }
        mask
    }

    /// Convert an image into normalized patch rows `[n_patches, patch_dim]`.
    /// For 3-channel configs the single luminance plane is replicated with
    /// per-channel normalization constants.
    pub fn prepare_patches(&self, img: &RasterImage) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        if img.side() != cfg.input_side {
            return Err(Error::data(format!(
                "image side {} does not match encoder input {}",
                img.side(),
                cfg.input_side
            )));
        }
        let pps = cfg.patches_per_side();
        let p = cfg.patch_size;
        let mut out = vec![0.0f64; cfg.n_patches() * cfg.patch_dim()];
        for py in 0..pps {
            for px in 0..pps {
                let patch_idx = py * pps + px;
                let base = patch_idx * cfg.patch_dim();
                for c in 0..cfg.in_channels {
                    let (mean, std) = (cfg.channel_mean[c], cfg.channel_std[c]);
                    for y in 0..p {
                        for x in 0..p {
                            let v = img.get(px * p + x, py * p + y) as f64;
                            out[base + c * p * p + y * p + x] = (v - mean) / std;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Run blocks `1..=upto`, returning the tap after every block.
    /// `with_cache` retains intermediates for [`Transformer::backward`].
    pub fn forward(&self, patches: &[f64], upto: usize, with_cache: bool) -> Result<ForwardPass> {
        let cfg = &self.cfg;
        if upto == 0 || upto > cfg.num_blocks {
            return Err(Error::config(format!(
                "layer {upto} outside 1..={}",
                cfg.num_blocks
            )));
        }
        let w = cfg.width;
        let n_img = cfg.n_img_tokens();

        // stem: class token, patch embedding, positional embedding
        let mut tokens0 = vec![0.0f64; n_img * w];
        let cls = self.seg_slice("class_token");
        tokens0[..w].copy_from_slice(cls);
        let pw = self.seg_slice("patch.weight");
        let pb = self.seg_slice("patch.bias");
        let pd = cfg.patch_dim();
        for i in 0..cfg.n_patches() {
            let row = &mut tokens0[(1 + i) * w..(2 + i) * w];
            let x = &patches[i * pd..(i + 1) * pd];
            for o in 0..w {
                let wrow = &pw[o * pd..(o + 1) * pd];
                let mut acc = pb[o];
                for d in 0..pd {
                    acc += wrow[d] * x[d];
                }
                row[o] = acc;
            }
        }
        let pos = self.seg_slice("pos_embed");
        for (t, p) in tokens0.iter_mut().zip(pos) {
            *t += p;
        }

        let mut x = tokens0.clone();
        let mut layer_outputs = Vec::with_capacity(upto);
        let mut blocks = Vec::new();
        for b in 1..=upto {
            let n_b = cfg.tokens_at_block(b - 1);
            let mut x_in = x;
            if n_b > n_img {
                let prompts = self.seg_slice(&format!("block{b}.prompts"));
                x_in.extend_from_slice(prompts);
            }
            let (out, cache) = self.block_forward(b, &x_in, n_b, with_cache);
            x = out[..n_img * w].to_vec();
            layer_outputs.push(x.clone());
            if with_cache {
                blocks.push(cache.expect("cache requested"));
            }
        }

        let cache = with_cache.then(|| TrainCache {
            patches: patches.to_vec(),
            blocks,
        });
        Ok(ForwardPass {
            layer_outputs,
            cache,
        })
    }

    fn block_forward(
        &self,
        b: usize,
        x_in: &[f64],
        n: usize,
        with_cache: bool,
    ) -> (Vec<f64>, Option<BlockCache>) {
        let cfg = &self.cfg;
        let w = cfg.width;
        let eps = cfg.ln_eps;

        let (a, ln1) = ln_forward(
            x_in,
            self.seg_slice(&format!("block{b}.ln1.gain")),
            self.seg_slice(&format!("block{b}.ln1.bias")),
            n,
            w,
            eps,
        );
        let (att, attn_cache) = self.attn_forward(b, &a, n);
        let mut h = x_in.to_vec();
        for (hv, av) in h.iter_mut().zip(&att) {
            *hv += av;
        }
        let (m, ln2) = ln_forward(
            &h,
            self.seg_slice(&format!("block{b}.ln2.gain")),
            self.seg_slice(&format!("block{b}.ln2.bias")),
            n,
            w,
            eps,
        );
        let hid = cfg.mlp_hidden;
        let mut z1 = vec![0.0f64; n * hid];
        linear_forward(
            self.seg_slice(&format!("block{b}.mlp.fc1.weight")),
            self.seg_slice(&format!("block{b}.mlp.fc1.bias")),
            &m,
            n,
            w,
            hid,
            &mut z1,
        );
        let mut g = vec![0.0f64; n * hid];
        for (gv, zv) in g.iter_mut().zip(&z1) {
            *gv = gelu(*zv);
        }
        let mut f = vec![0.0f64; n * w];
        linear_forward(
            self.seg_slice(&format!("block{b}.mlp.fc2.weight")),
            self.seg_slice(&format!("block{b}.mlp.fc2.bias")),
            &g,
            n,
            hid,
            w,
            &mut f,
        );
        let mut out = h.clone();
        for (ov, fv) in out.iter_mut().zip(&f) {
            *ov += fv;
        }

        let cache = with_cache.then(|| BlockCache {
            n,
            ln1,
            attn: attn_cache,
            ln2,
            m,
            z1,
            g,
        });
        (out, cache)
    }

    fn attn_forward(&self, b: usize, a: &[f64], n: usize) -> (Vec<f64>, AttnCache) {
        let cfg = &self.cfg;
        let w = cfg.width;
        let heads = cfg.num_heads;
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut q = vec![0.0f64; n * w];
        let mut k = vec![0.0f64; n * w];
        let mut v = vec![0.0f64; n * w];
        for (part, buf) in [("q", &mut q), ("k", &mut k), ("v", &mut v)] {
            linear_forward(
                self.seg_slice(&format!("block{b}.attn.{part}.weight")),
                self.seg_slice(&format!("block{b}.attn.{part}.bias")),
                a,
                n,
                w,
                w,
                buf,
            );
        }

        let mut probs = vec![0.0f64; heads * n * n];
        let mut ctx = vec![0.0f64; n * w];
        let mut scores = vec![0.0f64; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                for (j, s) in scores.iter_mut().enumerate() {
                    let qi = &q[i * w + off..i * w + off + dh];
                    let kj = &k[j * w + off..j * w + off + dh];
                    let mut acc = 0.0;
                    for d in 0..dh {
                        acc += qi[d] * kj[d];
                    }
                    *s = acc * scale;
                }
                softmax_inplace(&mut scores);
                let prow = &mut probs[h * n * n + i * n..h * n * n + (i + 1) * n];
                prow.copy_from_slice(&scores);
                let crow = &mut ctx[i * w + off..i * w + off + dh];
                for (j, p) in prow.iter().enumerate() {
                    let vj = &v[j * w + off..j * w + off + dh];
                    for d in 0..dh {
                        crow[d] += p * vj[d];
                    }
                }
            }
        }

        let mut out = vec![0.0f64; n * w];
        linear_forward(
            self.seg_slice(&format!("block{b}.attn.out.weight")),
            self.seg_slice(&format!("block{b}.attn.out.bias")),
            &ctx,
            n,
            w,
            w,
            &mut out,
        );
        (
            out,
            AttnCache {
                a: a.to_vec(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    /// Backpropagate `d_tap` (gradient w.r.t. the flattened tap of the last
    /// block run in `cache`) into a flat parameter-gradient vector.
    pub fn backward(&self, cache: &TrainCache, d_tap: &[f64]) -> Vec<f64> {
        let cfg = &self.cfg;
        let w = cfg.width;
        let n_img = cfg.n_img_tokens();
        assert_eq!(d_tap.len(), n_img * w, "tap gradient dimension mismatch");

        let mut grads = vec![0.0f64; self.params.len()];
        let mut d_x = d_tap.to_vec();
        for (bi, bc) in cache.blocks.iter().enumerate().rev() {
            let b = bi + 1;
            let mut d_out = vec![0.0f64; bc.n * w];
            d_out[..n_img * w].copy_from_slice(&d_x);
            let d_x_in = self.block_backward(b, bc, &d_out, &mut grads);
            if bc.n > n_img {
                let seg = self
                    .segment(&format!("block{b}.prompts"))
                    .expect("prompt segment");
                let g = &mut grads[seg.offset..seg.offset + seg.len];
                g.iter_mut()
                    .zip(&d_x_in[n_img * w..])
                    .for_each(|(gv, dv)| *gv += dv);
            }
            d_x = d_x_in[..n_img * w].to_vec();
        }

        // stem
        let pos_seg = self.segment("pos_embed").unwrap();
        grads[pos_seg.offset..pos_seg.offset + pos_seg.len]
            .iter_mut()
            .zip(&d_x)
            .for_each(|(g, d)| *g += d);
        let cls_seg = self.segment("class_token").unwrap();
        grads[cls_seg.offset..cls_seg.offset + cls_seg.len]
            .iter_mut()
            .zip(&d_x[..w])
            .for_each(|(g, d)| *g += d);

        let pd = cfg.patch_dim();
        let pw_seg = self.segment("patch.weight").unwrap();
        let pb_seg = self.segment("patch.bias").unwrap();
        for i in 0..cfg.n_patches() {
            let drow = &d_x[(1 + i) * w..(2 + i) * w];
            let x = &cache.patches[i * pd..(i + 1) * pd];
            for o in 0..w {
                let d = drow[o];
                if d == 0.0 {
                    continue;
                }
                grads[pb_seg.offset + o] += d;
                let gw = &mut grads[pw_seg.offset + o * pd..pw_seg.offset + (o + 1) * pd];
                for (gv, xv) in gw.iter_mut().zip(x) {
                    *gv += d * xv;
                }
            }
        }
        grads
    }

    fn block_backward(
        &self,
        b: usize,
        bc: &BlockCache,
        d_out: &[f64],
        grads: &mut [f64],
    ) -> Vec<f64> {
        let cfg = &self.cfg;
        let w = cfg.width;
        let hid = cfg.mlp_hidden;
        let n = bc.n;

        // out = h + f
        let mut d_h = d_out.to_vec();
        let d_f = d_out;

        // mlp: f = W2 gelu(W1 m + b1) + b2
        let mut d_g = vec![0.0f64; n * hid];
        self.linear_backward(
            &format!("block{b}.mlp.fc2"),
            &bc.g,
            d_f,
            n,
            hid,
            w,
            &mut d_g,
            grads,
        );
        let mut d_z1 = d_g;
        for (dz, z) in d_z1.iter_mut().zip(&bc.z1) {
            *dz *= gelu_grad(*z);
        }
        let mut d_m = vec![0.0f64; n * w];
        self.linear_backward(
            &format!("block{b}.mlp.fc1"),
            &bc.m,
            &d_z1,
            n,
            w,
            hid,
            &mut d_m,
            grads,
        );
        // ln2 feeds from h
        self.ln_backward(&format!("block{b}.ln2"), &bc.ln2, &d_m, n, &mut d_h, grads);

        // h = x_in + att
        let mut d_x_in = d_h.clone();
        let d_att = d_h;

        // attention
        let mut d_a = vec![0.0f64; n * w];
        self.attn_backward(b, &bc.attn, &d_att, n, &mut d_a, grads);
        self.ln_backward(&format!("block{b}.ln1"), &bc.ln1, &d_a, n, &mut d_x_in, grads);
        d_x_in
    }

    #[allow(clippy::too_many_arguments)]
    fn linear_backward(
        &self,
        prefix: &str,
        x: &[f64],
        d_out: &[f64],
        n: usize,
        din: usize,
        dout: usize,
        d_x: &mut [f64],
        grads: &mut [f64],
    ) {
        let w_seg = self.segment(&format!("{prefix}.weight")).unwrap();
        let b_seg = self.segment(&format!("{prefix}.bias")).unwrap();
        let weight = &self.params[w_seg.offset..w_seg.offset + w_seg.len];
        for i in 0..n {
            let drow = &d_out[i * dout..(i + 1) * dout];
            let xrow = &x[i * din..(i + 1) * din];
            let dxrow = &mut d_x[i * din..(i + 1) * din];
            for o in 0..dout {
                let d = drow[o];
                if d == 0.0 {
                    continue;
                }
                grads[b_seg.offset + o] += d;
                let wrow = &weight[o * din..(o + 1) * din];
                let gw = &mut grads[w_seg.offset + o * din..w_seg.offset + (o + 1) * din];
                for dd in 0..din {
                    gw[dd] += d * xrow[dd];
                    dxrow[dd] += d * wrow[dd];
                }
            }
        }
    }

    fn ln_backward(
        &self,
        prefix: &str,
        cache: &LnCache,
        d_y: &[f64],
        n: usize,
        d_x_accum: &mut [f64],
        grads: &mut [f64],
    ) {
        let w = self.cfg.width;
        let g_seg = self.segment(&format!("{prefix}.gain")).unwrap();
        let b_seg = self.segment(&format!("{prefix}.bias")).unwrap();
        let gain = &self.params[g_seg.offset..g_seg.offset + g_seg.len];
        for i in 0..n {
            let dy = &d_y[i * w..(i + 1) * w];
            let xhat = &cache.xhat[i * w..(i + 1) * w];
            let rstd = cache.rstd[i];
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for d in 0..w {
                grads[b_seg.offset + d] += dy[d];
                grads[g_seg.offset + d] += dy[d] * xhat[d];
                let dxh = dy[d] * gain[d];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * xhat[d];
            }
            mean_dxhat /= w as f64;
            mean_dxhat_xhat /= w as f64;
            let dxa = &mut d_x_accum[i * w..(i + 1) * w];
            for d in 0..w {
                let dxh = dy[d] * gain[d];
                dxa[d] += rstd * (dxh - mean_dxhat - xhat[d] * mean_dxhat_xhat);
            }
        }
    }

    fn attn_backward(
        &self,
        b: usize,
        ac: &AttnCache,
        d_out: &[f64],
        n: usize,
        d_a: &mut [f64],
        grads: &mut [f64],
    ) {
        let cfg = &self.cfg;
        let w = cfg.width;
        let heads = cfg.num_heads;
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut d_ctx = vec![0.0f64; n * w];
        self.linear_backward(
            &format!("block{b}.attn.out"),
            &ac.ctx,
            d_out,
            n,
            w,
            w,
            &mut d_ctx,
            grads,
        );

        let mut d_q = vec![0.0f64; n * w];
        let mut d_k = vec![0.0f64; n * w];
        let mut d_v = vec![0.0f64; n * w];
        let mut d_p = vec![0.0f64; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let prow = &ac.probs[h * n * n + i * n..h * n * n + (i + 1) * n];
                let dcrow = &d_ctx[i * w + off..i * w + off + dh];
                // d_p and d_v from ctx = P V
                let mut dot_dp_p = 0.0;
                for j in 0..n {
                    let vj = &ac.v[j * w + off..j * w + off + dh];
                    let mut acc = 0.0;
                    for d in 0..dh {
                        acc += dcrow[d] * vj[d];
                    }
                    d_p[j] = acc;
                    dot_dp_p += acc * prow[j];
                    let dvj = &mut d_v[j * w + off..j * w + off + dh];
                    for d in 0..dh {
                        dvj[d] += prow[j] * dcrow[d];
                    }
                }
                // softmax backward, then scores = scale * q k^T
                let qi = &ac.q[i * w + off..i * w + off + dh];
                for j in 0..n {
                    let ds = prow[j] * (d_p[j] - dot_dp_p) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &ac.k[j * w + off..j * w + off + dh];
                    let dqi = &mut d_q[i * w + off..i * w + off + dh];
                    for d in 0..dh {
                        dqi[d] += ds * kj[d];
                    }
                    let dkj = &mut d_k[j * w + off..j * w + off + dh];
                    for d in 0..dh {
                        dkj[d] += ds * qi[d];
                    }
                }
            }
        }

        for (part, dbuf) in [("q", &d_q), ("k", &d_k), ("v", &d_v)] {
            self.linear_backward(
                &format!("block{b}.attn.{part}"),
                &ac.a,
                dbuf,
                n,
                w,
                w,
                d_a,
                grads,
            );
        }
    }
}

fn init_segment(seg: &ParamSegment, slice: &mut [f64], rng: &mut ChaCha8Rng) {
    let name = seg.name.as_str();
    if name.ends_with(".bias") || name.ends_with("ln1.bias") || name.ends_with("ln2.bias") {
        slice.fill(0.0);
    } else if name.ends_with(".gain") {
        slice.fill(1.0);
    } else if name.ends_with(".weight") {
        // Xavier-uniform over [fan_out, fan_in]
        let fan_out = seg.shape[0] as f64;
        let fan_in = seg.shape[1] as f64;
        let a = (6.0 / (fan_in + fan_out)).sqrt();
        for v in slice.iter_mut() {
            *v = rng.gen_range(-a..=a);
        }
    } else {
        // class token, positional embeddings, prompts
        for v in slice.iter_mut() {
            *v = rng.gen_range(-0.02..=0.02);
        }
    }
}

pub struct ForwardPass {
    /// Tap after each block run: `layer_outputs[l-1]` is the flattened
    /// class+patch token matrix after block `l`.
    pub layer_outputs: Vec<Vec<f64>>,
    pub cache: Option<TrainCache>,
}

pub struct TrainCache {
    patches: Vec<f64>,
    blocks: Vec<BlockCache>,
}

struct BlockCache {
    n: usize,
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    m: Vec<f64>,
    z1: Vec<f64>,
    g: Vec<f64>,
}

struct AttnCache {
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn ln_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    n: usize,
    w: usize,
    eps: f64,
) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0f64; n * w];
    let mut xhat = vec![0.0f64; n * w];
    let mut rstd = vec![0.0f64; n];
    for i in 0..n {
        let row = &x[i * w..(i + 1) * w];
        let mean = row.iter().sum::<f64>() / w as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[i] = r;
        for d in 0..w {
            let xh = (row[d] - mean) * r;
            xhat[i * w + d] = xh;
            y[i * w + d] = gain[d] * xh + bias[d];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn linear_forward(
    weight: &[f64],
    bias: &[f64],
    x: &[f64],
    n: usize,
    din: usize,
    dout: usize,
    out: &mut [f64],
) {
    for i in 0..n {
        let xrow = &x[i * din..(i + 1) * din];
        let orow = &mut out[i * dout..(i + 1) * dout];
        for o in 0..dout {
            let wrow = &weight[o * din..(o + 1) * din];
            let mut acc = bias[o];
            for d in 0..din {
                acc += wrow[d] * xrow[d];
            }
            orow[o] = acc;
        }
    }
}

fn softmax_inplace(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

const GELU_K: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::raster::{rasterize_strokes, RasterImage};
    use crate::dataset::{Point, Stroke};

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig {
            input_side: 8,
            patch_size: 4,
            in_channels: 1,
            width: 6,
            num_blocks: 2,
            num_heads: 2,
            mlp_hidden: 10,
            ln_eps: 1e-5,
            prompt_tokens: 0,
            prompt_depth: 0,
            channel_mean: [0.5; 3],
            channel_std: [0.5; 3],
        }
    }

    fn tiny_image(side: usize) -> RasterImage {
        rasterize_strokes(
            &[Stroke {
                points: vec![
                    Point {
                        x: 1.0,
                        y: side as f64 * 0.3,
                    },
                    Point {
                        x: side as f64 - 1.0,
                        y: side as f64 * 0.8,
                    },
                ],
                width: 1.5,
            }],
            side as f64,
            side,
        )
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Transformer::init(tiny_cfg(), 7).unwrap();
        let b = Transformer::init(tiny_cfg(), 7).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Transformer::init(tiny_cfg(), 8).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn truncate_matches_full_tap_bitwise() {
        let enc = Transformer::init(tiny_cfg(), 3).unwrap();
        let patches = enc.prepare_patches(&tiny_image(8)).unwrap();
        let full = enc.forward(&patches, 2, false).unwrap();
        let cut = enc.truncate(1).unwrap();
        let cut_out = cut.forward(&patches, 1, false).unwrap();
        assert_eq!(full.layer_outputs[0], cut_out.layer_outputs[0]);
        assert!(cut.param_count() < enc.param_count());
    }

    #[test]
    fn prompts_add_expected_parameters_and_keep_base() {
        let base = Transformer::init(tiny_cfg(), 3).unwrap();
        let prompted = base.with_prompts(5, 6, 11).unwrap();
        // depth clamps to the two available blocks
        assert_eq!(
            prompted.param_count(),
            base.param_count() + 5 * 2 * base.config().width
        );
        for seg in base.segments() {
            let a = &base.params()[seg.offset..seg.offset + seg.len];
            let s2 = prompted.segment(&seg.name).unwrap();
            let b = &prompted.params()[s2.offset..s2.offset + s2.len];
            assert_eq!(a, b, "base segment {} changed", seg.name);
        }
        // taps keep the class+patch dimension
        let patches = prompted.prepare_patches(&tiny_image(8)).unwrap();
        let out = prompted.forward(&patches, 2, false).unwrap();
        assert_eq!(out.layer_outputs[1].len(), prompted.config().embed_dim());
    }

    #[test]
    fn forward_is_deterministic() {
        let enc = Transformer::init(tiny_cfg(), 5).unwrap();
        let patches = enc.prepare_patches(&tiny_image(8)).unwrap();
        let a = enc.forward(&patches, 2, false).unwrap();
        let b = enc.forward(&patches, 2, false).unwrap();
        assert_eq!(a.layer_outputs, b.layer_outputs);
    }

    /// Central finite differences against the analytic gradient of a probe
    /// loss `sum_i probe_i * tap_i`.
    #[test]
    fn gradients_match_finite_differences() {
        let mut enc = Transformer::init(tiny_cfg(), 9).unwrap();
        let patches = enc.prepare_patches(&tiny_image(8)).unwrap();
        let dim = enc.config().embed_dim();
        let probe: Vec<f64> = (0..dim)
            .map(|i| ((i * 37 + 11) % 17) as f64 / 17.0 - 0.5)
            .collect();

        let pass = enc.forward(&patches, 2, true).unwrap();
        let analytic = enc.backward(pass.cache.as_ref().unwrap(), &probe);

        let loss = |enc: &Transformer| -> f64 {
            let out = enc.forward(&patches, 2, false).unwrap();
            out.layer_outputs[1]
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum()
        };

        let n = enc.param_count();
        let step = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut checked = 0;
        while checked < 25 {
            let idx = rng.gen_range(0..n);
            let orig = enc.params()[idx];
            enc.params_mut()[idx] = orig + step;
            let up = loss(&enc);
            enc.params_mut()[idx] = orig - step;
            let down = loss(&enc);
            enc.params_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            let denom = numeric.abs().max(analytic[idx].abs());
            if denom < 1e-7 {
                continue; // both effectively zero
            }
            let rel = (numeric - analytic[idx]).abs() / denom;
            assert!(
                rel < 1e-4,
                "param {idx}: analytic {} vs numeric {numeric} (rel {rel})",
                analytic[idx]
            );
            checked += 1;
        }
    }

    #[test]
    fn patch_embedding_gradient_is_nonzero_for_ink() {
        let enc = Transformer::init(tiny_cfg(), 2).unwrap();
        let patches = enc.prepare_patches(&tiny_image(8)).unwrap();
        let pass = enc.forward(&patches, 2, true).unwrap();
        let probe = vec![1.0; enc.config().embed_dim()];
        let grads = enc.backward(pass.cache.as_ref().unwrap(), &probe);
        let seg = enc.segment("patch.weight").unwrap();
        let gw = &grads[seg.offset..seg.offset + seg.len];
        assert!(gw.iter().all(|g| g.is_finite()));
        assert!(gw.iter().any(|g| g.abs() > 0.0));
    }

    #[test]
    fn rejects_wrong_image_side() {
        let enc = Transformer::init(tiny_cfg(), 2).unwrap();
        assert!(enc.prepare_patches(&tiny_image(16)).is_err());
    }
}
