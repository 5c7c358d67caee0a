//! Uniform abstraction over layer-tapped image encoders: a built-in seeded
//! toy transformer, transformer adapters loaded from the weights exchange
//! format, and inference-only ResNet adapters. Layer indices are 1-based
//! over transformer blocks (ViT) or stages (ResNet); the layer-`l` tap is
//! the flattened output of block/stage `l`.

pub mod exchange;
pub mod resnet;
pub mod transformer;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::preprocess::raster::RasterImage;

use exchange::{ArchDescriptor, ExchangeDescriptor};
use resnet::{ResnetConfig, ResnetModel, StemKind};
pub use transformer::{SegmentKind, Transformer, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Vit,
    Resnet,
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pretext {
    Clip,
    Imagenet,
    None,
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(Family::Vit),
            "resnet" => Ok(Family::Resnet),
            "toy" => Ok(Family::Toy),
            other => Err(Error::config(format!("unknown encoder family `{other}`"))),
        }
    }
}

impl FromStr for Pretext {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(Pretext::Clip),
            "imagenet" => Ok(Pretext::Imagenet),
            "none" => Ok(Pretext::None),
            other => Err(Error::config(format!("unknown pretext `{other}`"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Vit => "vit",
            Family::Resnet => "resnet",
            Family::Toy => "toy",
        })
    }
}

impl fmt::Display for Pretext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pretext::Clip => "clip",
            Pretext::Imagenet => "imagenet",
            Pretext::None => "none",
        })
    }
}

/// Declared identity of an encoder instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub family: Family,
    pub pretext: Pretext,
    pub input_side: usize,
    pub num_layers: usize,
    /// 1-based default tap layer.
    pub embed_layer: usize,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embed_layer == 0 || self.embed_layer > self.num_layers {
            return Err(Error::config(format!(
                "embed layer {} outside 1..={}",
                self.embed_layer, self.num_layers
            )));
        }
        let expects_384 = self.family == Family::Vit && self.pretext == Pretext::Imagenet;
        if (self.input_side == 384) != expects_384 {
            return Err(Error::config(format!(
                "input side {} is not valid for {}/{}",
                self.input_side, self.family, self.pretext
            )));
        }
        Ok(())
    }
}

/// Published profile defaults per family/pretext pair.
pub struct Profile {
    pub num_layers: usize,
    pub input_side: usize,
    pub default_layer: usize,
}

pub fn profile(family: Family, pretext: Pretext) -> Profile {
    match (family, pretext) {
        (Family::Vit, Pretext::Imagenet) => Profile {
            num_layers: 12,
            input_side: 384,
            default_layer: 5,
        },
        (Family::Vit, _) => Profile {
            num_layers: 12,
            input_side: 224,
            default_layer: 6,
        },
        (Family::Resnet, _) => Profile {
            num_layers: 4,
            input_side: 224,
            default_layer: 3,
        },
        (Family::Toy, _) => Profile {
            num_layers: 4,
            input_side: 224,
            default_layer: 2,
        },
    }
}

/// Flattened layer-`l` feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEmbedding {
    pub layer: usize,
    pub values: Vec<f32>,
}

impl LayerEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Which parameter groups receive gradient during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    AllUpToLayer,
    LayernormOnly,
    PromptsOnly,
    None,
}

impl FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_up_to_layer" => Ok(MaskMode::AllUpToLayer),
            "layernorm_only" => Ok(MaskMode::LayernormOnly),
            "prompts_only" => Ok(MaskMode::PromptsOnly),
            "none" => Ok(MaskMode::None),
            other => Err(Error::config(format!("unknown mask mode `{other}`"))),
        }
    }
}

pub const VPT_TOKENS: usize = 5;
pub const VPT_DEPTH: usize = 6;
const PROMPT_INIT_SEED: u64 = 0x5eed_0001;

#[derive(Debug, Clone, PartialEq)]
enum Model {
    Transformer(Transformer),
    Resnet(ResnetModel),
}

/// A layer-tapped encoder with its declared spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    model: Model,
}

/// Built-in deterministic toy encoder: 4 pre-LN blocks, 56x56 patches to
/// width 32, single-head attention. Test vehicle, never a results vehicle.
pub fn toy_encoder(seed: u64) -> Encoder {
    let cfg = TransformerConfig {
        input_side: 224,
        patch_size: 56,
        in_channels: 1,
        width: 32,
        num_blocks: 4,
        num_heads: 1,
        mlp_hidden: 64,
        ln_eps: 1e-5,
        prompt_tokens: 0,
        prompt_depth: 0,
        channel_mean: [0.5; 3],
        channel_std: [0.5; 3],
    };
    let p = profile(Family::Toy, Pretext::None);
    Encoder {
        spec: EncoderSpec {
            family: Family::Toy,
            pretext: Pretext::None,
            input_side: cfg.input_side,
            num_layers: cfg.num_blocks,
            embed_layer: p.default_layer,
        },
        model: Model::Transformer(Transformer::init(cfg, seed).expect("valid toy config")),
    }
}

/// Load published weights from the exchange format next to `weights_path`.
pub fn load_pretrained(family: Family, pretext: Pretext, weights_path: &Path) -> Result<Encoder> {
    let file = exchange::load(weights_path)?;
    let desc = &file.descriptor;
    if desc.family != family.to_string() || desc.pretext != pretext.to_string() {
        return Err(Error::config(format!(
            "descriptor declares {}/{} but {}/{} was requested",
            desc.family, desc.pretext, family, pretext
        )));
    }
    let prof = profile(family, pretext);
    let spec = EncoderSpec {
        family,
        pretext,
        input_side: desc.input_side,
        num_layers: desc.num_layers,
        embed_layer: desc.default_layer.clamp(1, desc.num_layers.max(1)),
    };
    spec.validate()?;
    if spec.input_side != prof.input_side {
        return Err(Error::config(format!(
            "descriptor input side {} does not match the {}/{} profile ({})",
            desc.input_side, family, pretext, prof.input_side
        )));
    }

    let model = match (&desc.arch, family) {
        (
            ArchDescriptor::Transformer {
                patch_size,
                width,
                num_heads,
                mlp_hidden,
                in_channels,
            },
            Family::Vit | Family::Toy,
        ) => {
            let cfg = TransformerConfig {
                input_side: desc.input_side,
                patch_size: *patch_size,
                in_channels: *in_channels,
                width: *width,
                num_blocks: desc.num_layers,
                num_heads: *num_heads,
                mlp_hidden: *mlp_hidden,
                ln_eps: 1e-5,
                prompt_tokens: 0,
                prompt_depth: 0,
                channel_mean: desc.channel_mean,
                channel_std: desc.channel_std,
            };
            Model::Transformer(Transformer::from_named_tensors(cfg, &file.tensors)?)
        }
        (
            ArchDescriptor::Resnet {
                stem,
                stage_blocks,
                base_channels,
            },
            Family::Resnet,
        ) => {
            let cfg = ResnetConfig {
                stem: match stem.as_str() {
                    "classic" => StemKind::Classic,
                    "three_conv" => StemKind::ThreeConv,
                    other => {
                        return Err(Error::config(format!("unknown resnet stem `{other}`")))
                    }
                },
                stage_blocks: stage_blocks.clone(),
                base_channels: *base_channels,
                input_side: desc.input_side,
                channel_mean: desc.channel_mean,
                channel_std: desc.channel_std,
            };
            let shaped = shape_tensors(&file)?;
            Model::Resnet(ResnetModel::from_named_tensors(cfg, shaped)?)
        }
        _ => {
            return Err(Error::config(format!(
                "descriptor architecture does not match family {family}"
            )))
        }
    };
    Ok(Encoder { spec, model })
}

fn shape_tensors(
    file: &exchange::ExchangeFile,
) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
    let mut out = BTreeMap::new();
    for entry in &file.descriptor.tensors {
        let data = file
            .tensors
            .get(&entry.name)
            .ok_or_else(|| Error::data(format!("tensor `{}` missing from payload", entry.name)))?;
        out.insert(entry.name.clone(), (entry.shape.clone(), data.clone()));
    }
    Ok(out)
}

impl Encoder {
    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn input_side(&self) -> usize {
        self.spec.input_side
    }

    pub fn embed_layer(&self) -> usize {
        self.spec.embed_layer
    }

    pub fn with_embed_layer(mut self, layer: usize) -> Result<Self> {
        if layer == 0 || layer > self.spec.num_layers {
            return Err(Error::config(format!(
                "layer {layer} outside 1..={}",
                self.spec.num_layers
            )));
        }
        self.spec.embed_layer = layer;
        Ok(self)
    }

    /// Embedding dimension of a tap (constant across layers for
    /// transformers, stage-dependent for ResNets).
    pub fn embed_dim(&self, layer: usize) -> usize {
        match &self.model {
            Model::Transformer(t) => {
                let _ = layer;
                t.config().embed_dim()
            }
            Model::Resnet(r) => {
                let cfg = r.config();
                let side_after_stem = cfg.input_side / 4;
                let side = side_after_stem >> (layer - 1).min(3);
                cfg.base_channels * (1 << (layer - 1)) * 4 * side * side
            }
        }
    }

    pub fn embed(&self, image: &RasterImage) -> Result<LayerEmbedding> {
        self.embed_at(image, self.spec.embed_layer)
    }

    pub fn embed_at(&self, image: &RasterImage, layer: usize) -> Result<LayerEmbedding> {
        Ok(self.embed_layers(image, &[layer])?.pop().expect("one tap"))
    }

    /// Tap several layers in one forward pass; `layers` must be ascending.
    pub fn embed_layers(&self, image: &RasterImage, layers: &[usize]) -> Result<Vec<LayerEmbedding>> {
        if layers.is_empty() {
            return Err(Error::config("no layers requested"));
        }
        let max = *layers.iter().max().unwrap();
        if max > self.spec.num_layers || layers.iter().any(|&l| l == 0) {
            return Err(Error::config(format!(
                "requested layer outside 1..={}",
                self.spec.num_layers
            )));
        }
        match &self.model {
            Model::Transformer(t) => {
                let patches = t.prepare_patches(image)?;
                let pass = t.forward(&patches, max, false)?;
                layers
                    .iter()
                    .map(|&l| {
                        let values: Vec<f32> =
                            pass.layer_outputs[l - 1].iter().map(|&v| v as f32).collect();
                        if values.iter().any(|v| !v.is_finite()) {
                            return Err(Error::NonFinite(format!("layer {l} activation")));
                        }
                        Ok(LayerEmbedding { layer: l, values })
                    })
                    .collect()
            }
            Model::Resnet(r) => {
                let taps = r.forward_taps(image, layers)?;
                Ok(layers
                    .iter()
                    .zip(taps)
                    .map(|(&l, values)| LayerEmbedding { layer: l, values })
                    .collect())
            }
        }
    }

    /// Keep only the network part up to layer `l` inclusive.
    pub fn truncate(&self, layer: usize) -> Result<Encoder> {
        match &self.model {
            Model::Transformer(t) => {
                let cut = t.truncate(layer)?;
                let mut spec = self.spec.clone();
                spec.num_layers = layer;
                spec.embed_layer = layer;
                Ok(Encoder {
                    spec,
                    model: Model::Transformer(cut),
                })
            }
            Model::Resnet(_) => Err(Error::config(
                "truncation targets differentiable transformer encoders",
            )),
        }
    }

    /// Fresh random weights with the same architecture (training from
    /// scratch); transformer families only.
    pub fn reinitialized(&self, seed: u64) -> Result<Encoder> {
        match &self.model {
            Model::Transformer(t) => Ok(Encoder {
                spec: self.spec.clone(),
                model: Model::Transformer(t.reinitialized(seed)),
            }),
            Model::Resnet(_) => Err(Error::config(
                "reinitialization targets differentiable transformer encoders",
            )),
        }
    }

    /// Prepare the encoder for a trainable-mask mode. `PromptsOnly` adds
    /// learnable tokens (5 per block on the first 6 blocks, deep prompt
    /// setting) and requires a transformer family.
    pub fn apply_mask(&self, mode: MaskMode) -> Result<Encoder> {
        match (&self.model, mode) {
            (Model::Resnet(_), _) => Err(Error::config(
                "trainable masks target transformer-family encoders",
            )),
            (Model::Transformer(t), MaskMode::PromptsOnly) => {
                let prompted = t.with_prompts(VPT_TOKENS, VPT_DEPTH, PROMPT_INIT_SEED)?;
                Ok(Encoder {
                    spec: self.spec.clone(),
                    model: Model::Transformer(prompted),
                })
            }
            (Model::Transformer(_), _) => Ok(self.clone()),
        }
    }

    /// Per-parameter trainability for a mode, aligned with
    /// [`Encoder::transformer`] parameter storage.
    pub fn trainable_mask(&self, mode: MaskMode) -> Result<Vec<bool>> {
        let t = self.transformer()?;
        let embed_layer = self.spec.embed_layer;
        Ok(match mode {
            MaskMode::AllUpToLayer => t.mask_where(|kind| match kind {
                SegmentKind::Stem => true,
                SegmentKind::LayerNorm { block }
                | SegmentKind::Attention { block }
                | SegmentKind::Mlp { block } => *block <= embed_layer,
                SegmentKind::Prompt { .. } => false,
            }),
            MaskMode::LayernormOnly => {
                t.mask_where(|kind| matches!(kind, SegmentKind::LayerNorm { .. }))
            }
            MaskMode::PromptsOnly => {
                t.mask_where(|kind| matches!(kind, SegmentKind::Prompt { .. }))
            }
            MaskMode::None => vec![false; t.param_count()],
        })
    }

    pub fn trainable_param_count(&self, mode: MaskMode) -> Result<usize> {
        Ok(self.trainable_mask(mode)?.iter().filter(|&&m| m).count())
    }

    pub fn param_count(&self) -> usize {
        match &self.model {
            Model::Transformer(t) => t.param_count(),
            Model::Resnet(_) => 0,
        }
    }

    pub fn transformer(&self) -> Result<&Transformer> {
        match &self.model {
            Model::Transformer(t) => Ok(t),
            Model::Resnet(_) => Err(Error::config(
                "operation requires a differentiable transformer encoder",
            )),
        }
    }

    pub fn transformer_mut(&mut self) -> Result<&mut Transformer> {
        match &mut self.model {
            Model::Transformer(t) => Ok(t),
            Model::Resnet(_) => Err(Error::config(
                "operation requires a differentiable transformer encoder",
            )),
        }
    }

    /// Digest of the parameter vector; part of embedding-store invalidation.
    pub fn params_hash(&self) -> String {
        let mut h = Sha256::new();
        match &self.model {
            Model::Transformer(t) => {
                for v in t.params() {
                    h.update(v.to_le_bytes());
                }
            }
            Model::Resnet(r) => {
                h.update(format!("{:?}", r.config()).as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Persist as a weights exchange file (checkpoint format).
    pub fn save_exchange(&self, base: &Path) -> Result<()> {
        let t = self.transformer()?;
        let tensors: Vec<(String, Vec<usize>, Vec<f32>)> = t
            .segments()
            .iter()
            .map(|seg| {
                let data: Vec<f32> = t.params()[seg.offset..seg.offset + seg.len]
                    .iter()
                    .map(|&v| v as f32)
                    .collect();
                (seg.name.clone(), seg.shape.clone(), data)
            })
            .collect();
        let descriptor = ExchangeDescriptor {
            format_version: exchange::FORMAT_VERSION,
            family: self.spec.family.to_string(),
            pretext: self.spec.pretext.to_string(),
            input_side: self.spec.input_side,
            num_layers: self.spec.num_layers,
            default_layer: self.spec.embed_layer,
            channel_mean: t.config().channel_mean,
            channel_std: t.config().channel_std,
            arch: exchange::transformer_arch(t.config()),
            payload: String::new(),
            payload_sha256: String::new(),
            tensors: Vec::new(),
        };
        exchange::save(base, descriptor, &tensors)
    }

    /// Reload a transformer checkpoint saved by [`Encoder::save_exchange`].
    pub fn load_exchange(base: &Path) -> Result<Encoder> {
        let file = exchange::load(base)?;
        let family: Family = file.descriptor.family.parse()?;
        let pretext: Pretext = file.descriptor.pretext.parse()?;
        let desc = &file.descriptor;
        let ArchDescriptor::Transformer {
            patch_size,
            width,
            num_heads,
            mlp_hidden,
            in_channels,
        } = &desc.arch
        else {
            return load_pretrained(family, pretext, base);
        };
        let mut cfg = TransformerConfig {
            input_side: desc.input_side,
            patch_size: *patch_size,
            in_channels: *in_channels,
            width: *width,
            num_blocks: desc.num_layers,
            num_heads: *num_heads,
            mlp_hidden: *mlp_hidden,
            ln_eps: 1e-5,
            prompt_tokens: 0,
            prompt_depth: 0,
            channel_mean: desc.channel_mean,
            channel_std: desc.channel_std,
        };
        // checkpoints may carry prompt tensors
        let prompt_blocks = file
            .descriptor
            .tensors
            .iter()
            .filter(|t| t.name.ends_with(".prompts"))
            .count();
        if prompt_blocks > 0 {
            let tokens = file
                .descriptor
                .tensors
                .iter()
                .find(|t| t.name.ends_with(".prompts"))
                .map(|t| t.shape[0])
                .unwrap_or(VPT_TOKENS);
            cfg.prompt_tokens = tokens;
            cfg.prompt_depth = prompt_blocks;
        }
        let spec = EncoderSpec {
            family,
            pretext,
            input_side: desc.input_side,
            num_layers: desc.num_layers,
            embed_layer: desc.default_layer,
        };
        Ok(Encoder {
            spec,
            model: Model::Transformer(Transformer::from_named_tensors(cfg, &file.tensors)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Point, Stroke};
    use crate::preprocess::raster::rasterize_strokes;

    fn image_224() -> RasterImage {
        rasterize_strokes(
            &[
                Stroke {
                    points: vec![Point { x: 40.0, y: 60.0 }, Point { x: 190.0, y: 180.0 }],
                    width: 2.2,
                },
                Stroke {
                    points: vec![Point { x: 60.0, y: 170.0 }, Point { x: 170.0, y: 40.0 }],
                    width: 2.2,
                },
            ],
            224.0,
            224,
        )
    }

    #[test]
    fn toy_embedding_dim_is_544_at_every_layer() {
        let enc = toy_encoder(7);
        let img = image_224();
        for layer in 1..=4 {
            let emb = enc.embed_at(&img, layer).unwrap();
            assert_eq!(emb.dim(), 544); // 17 tokens x width 32
        }
    }

    #[test]
    fn toy_encoder_is_seed_deterministic() {
        let a = toy_encoder(7);
        let b = toy_encoder(7);
        assert_eq!(
            a.transformer().unwrap().params(),
            b.transformer().unwrap().params()
        );
        let img = image_224();
        assert_eq!(a.embed(&img).unwrap(), b.embed(&img).unwrap());
    }

    #[test]
    fn truncate_tap_is_bit_equal_and_smaller() {
        let enc = toy_encoder(3);
        let img = image_224();
        for layer in 1..=3usize {
            let cut = enc.truncate(layer).unwrap();
            assert_eq!(
                cut.embed(&img).unwrap().values,
                enc.embed_at(&img, layer).unwrap().values
            );
            assert!(cut.param_count() < enc.param_count());
        }
        assert_eq!(
            enc.truncate(4).unwrap().embed(&img).unwrap().values,
            enc.embed_at(&img, 4).unwrap().values
        );
        assert!(enc.truncate(5).is_err());
    }

    #[test]
    fn different_sketches_are_not_perfectly_similar() {
        let enc = toy_encoder(1);
        let a = enc.embed(&image_224()).unwrap();
        let b_img = rasterize_strokes(
            &[Stroke {
                points: vec![Point { x: 40.0, y: 60.0 }, Point { x: 190.0, y: 180.0 }],
                width: 2.2,
            }],
            224.0,
            224,
        );
        let b = enc.embed(&b_img).unwrap();
        let cos = crate::retrieval::cosine(&a.values, &b.values).unwrap();
        assert!(cos < 1.0 - 1e-6, "cosine {cos}");
    }

    #[test]
    fn prompts_only_mask_adds_expected_parameters() {
        let enc = toy_encoder(5);
        let prompted = enc.apply_mask(MaskMode::PromptsOnly).unwrap();
        // 5 tokens x min(6, 4 blocks) x width 32
        assert_eq!(prompted.param_count(), enc.param_count() + 5 * 4 * 32);
        assert_eq!(
            prompted.trainable_param_count(MaskMode::PromptsOnly).unwrap(),
            5 * 4 * 32
        );
        // base weights untouched
        let base = enc.transformer().unwrap();
        let pt = prompted.transformer().unwrap();
        for seg in base.segments() {
            let s2 = pt.segment(&seg.name).unwrap();
            assert_eq!(
                &base.params()[seg.offset..seg.offset + seg.len],
                &pt.params()[s2.offset..s2.offset + s2.len]
            );
        }
    }

    #[test]
    fn layernorm_mask_counts_affine_parameters() {
        let enc = toy_encoder(5);
        // 4 blocks x 2 norms x (gain 32 + bias 32)
        assert_eq!(
            enc.trainable_param_count(MaskMode::LayernormOnly).unwrap(),
            4 * 2 * 64
        );
        assert_eq!(enc.trainable_param_count(MaskMode::None).unwrap(), 0);
    }

    #[test]
    fn exchange_round_trip_reproduces_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ckpt");
        let enc = toy_encoder(9);
        enc.save_exchange(&base).unwrap();
        let back = Encoder::load_exchange(&base).unwrap();
        // f32 storage: embeddings must match bit-for-bit after one save/load
        let img = image_224();
        let a = back.embed(&img).unwrap();
        let again = {
            back.save_exchange(&base).unwrap();
            Encoder::load_exchange(&base).unwrap().embed(&img).unwrap()
        };
        assert_eq!(a, again);
    }

    #[test]
    fn missing_weights_error_explains_exchange_format(){
        let err = load_pretrained(
            Family::Vit,
            Pretext::Clip,
            Path::new("/nonexistent/vit.bin"),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("external asset") && msg.contains("exchange"), "{msg}");
    }

    #[test]
    fn profiles_match_published_defaults() {
        let p = profile(Family::Vit, Pretext::Clip);
        assert_eq!((p.num_layers, p.input_side, p.default_layer), (12, 224, 6));
        let p = profile(Family::Vit, Pretext::Imagenet);
        assert_eq!((p.num_layers, p.input_side), (12, 384));
        let p = profile(Family::Resnet, Pretext::Clip);
        assert_eq!((p.num_layers, p.default_layer), (4, 3));
    }

    #[test]
    fn spec_validation_rejects_mismatched_input_side() {
        let bad = EncoderSpec {
            family: Family::Vit,
            pretext: Pretext::Clip,
            input_side: 384,
            num_layers: 12,
            embed_layer: 6,
        };
        assert!(bad.validate().is_err());
        let good = EncoderSpec {
            family: Family::Vit,
            pretext: Pretext::Imagenet,
            input_side: 384,
            num_layers: 12,
            embed_layer: 5,
        };
        assert!(good.validate().is_ok());
    }
}
