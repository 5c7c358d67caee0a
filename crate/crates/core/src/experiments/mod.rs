//! Reproducible experiment drivers: retrieval runs, the scale/width/layer
//! sweep, alignment and representation ablations, fine-tuning strategy
//! comparisons, and CSV/plot emission. Rows are deterministic in
//! `(plan, seed)` and sorted by their full parameter tuple; wall-clock
//! runtime is tracked in memory but kept out of the CSV so re-running an
//! unchanged plan overwrites byte-identically.

pub mod plan;
pub mod plots;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    split_dataset, validate_gallery_views, select_test_gallery, DatasetSplit, ShapeRecord,
    SketchView, GALLERY_AZIMUTHS,
};
use crate::encoder::{Encoder, Family};
use crate::error::{Error, Result};
use crate::finetune::{
    finetune_layernorm, finetune_vpt, train, train_from_scratch, EpochRow, Temperature,
    TrainOutcome, ValContext,
};
use crate::preprocess::raster::RasterImage;
use crate::preprocess::{
    normalize_object, rasterize, scale_sweep_transform, set_stroke_width, sweep_targets,
    NormalizationSpec,
};
use crate::retrieval::{
    metrics_with_identity_gt, rank_gallery, GalleryEmbeddings, Metric, Metrics, Ranking,
};

pub use plan::{load_plan, parse_plan, Plan};

/// One experiment result with its full parameter tuple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub name: String,
    pub class_label: String,
    pub query_style: String,
    pub gallery_style: String,
    pub metric: String,
    pub layer: usize,
    pub stroke_width: Option<f64>,
    pub bbox_target: Option<f64>,
    pub normalized: bool,
    pub strategy: Option<String>,
    pub seed: u64,
    pub acc_at_1: f64,
    pub acc_at_5: f64,
    pub n_queries: usize,
    /// Wall-clock seconds; in-memory only (not serialized) so result CSVs
    /// stay byte-reproducible.
    #[serde(skip)]
    pub runtime_s: f64,
}

impl PartialEq for ResultRow {
    fn eq(&self, other: &Self) -> bool {
        // runtime is bookkeeping, not a result
        self.name == other.name
            && self.class_label == other.class_label
            && self.query_style == other.query_style
            && self.gallery_style == other.gallery_style
            && self.metric == other.metric
            && self.layer == other.layer
            && self.stroke_width == other.stroke_width
            && self.bbox_target == other.bbox_target
            && self.normalized == other.normalized
            && self.strategy == other.strategy
            && self.seed == other.seed
            && self.acc_at_1 == other.acc_at_1
            && self.acc_at_5 == other.acc_at_5
            && self.n_queries == other.n_queries
    }
}

impl ResultRow {
    fn sort_key(&self) -> impl Ord + '_ {
        (
            &self.name,
            &self.class_label,
            &self.strategy,
            self.stroke_width.map(f64::to_bits),
            self.layer,
            self.bbox_target.map(f64::to_bits),
            !self.normalized as u8,
            self.seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut sorted = self.clone();
        sorted.sort();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(e.to_string()))?;
        for row in &sorted.rows {
            w.serialize(row).map_err(|e| Error::data(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::data(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<ResultTable> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(e.to_string()))?;
        let rows: Vec<ResultRow> = r
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        Ok(ResultTable { rows })
    }

    /// Mean row per parameter tuple across classes (equal weight per
    /// class); class label becomes `avg`.
    pub fn with_class_average(&self) -> ResultTable {
        let mut groups: BTreeMap<String, Vec<&ResultRow>> = BTreeMap::new();
        for row in &self.rows {
            let key = format!(
                "{}|{}|{}|{}|{:?}|{:?}|{}|{:?}|{}",
                row.name,
                row.query_style,
                row.gallery_style,
                row.metric,
                row.stroke_width.map(f64::to_bits),
                row.bbox_target.map(f64::to_bits),
                row.layer,
                row.strategy,
                row.seed
            );
            groups.entry(key).or_default().push(row);
        }
        let mut out = self.clone();
        for rows in groups.values() {
            if rows.len() < 2 {
                continue;
            }
            let n = rows.len() as f64;
            let mut avg = rows[0].clone();
            avg.class_label = "avg".into();
            avg.acc_at_1 = rows.iter().map(|r| r.acc_at_1).sum::<f64>() / n;
            avg.acc_at_5 = rows.iter().map(|r| r.acc_at_5).sum::<f64>() / n;
            avg.n_queries = rows.iter().map(|r| r.n_queries).sum();
            avg.runtime_s = rows.iter().map(|r| r.runtime_s).sum();
            out.rows.push(avg);
        }
        out.sort();
        out
    }
}

/// Retrieval evaluation settings shared by the drivers.
#[derive(Debug, Clone)]
pub struct EvalSpec {
    pub metric: Metric,
    pub norm: Option<NormalizationSpec>,
    pub stroke_width: Option<f64>,
    pub query_style: String,
    pub query_azimuths: Vec<f64>,
    pub gallery_style: String,
    pub gallery_azimuths: Vec<f64>,
    pub allow_missing_views: bool,
}

impl EvalSpec {
    pub fn from_plan(p: &Plan) -> Result<EvalSpec> {
        Ok(EvalSpec {
            metric: p.metric()?,
            norm: p.norm.enabled.then(|| p.norm_spec()),
            stroke_width: Some(p.norm.stroke_width),
            query_style: p.query.style.clone(),
            query_azimuths: p.query.azimuths.clone(),
            gallery_style: p.gallery.style.clone(),
            gallery_azimuths: GALLERY_AZIMUTHS.to_vec(),
            allow_missing_views: p.gallery.allow_missing_views,
        })
    }
}

/// Width assignment (vector payloads), optional normalization, and
/// rasterization at the encoder input side.
pub fn prepare_view_image(
    view: &SketchView,
    width: Option<f64>,
    norm: Option<&NormalizationSpec>,
    side: usize,
) -> Result<RasterImage> {
    let mut v = view.clone();
    if let (Some(w), crate::dataset::Payload::Vector(_)) = (width, &v.payload) {
        v = set_stroke_width(&v, w)?;
    }
    if let Some(spec) = norm {
        if spec.canvas as usize != side {
            return Err(Error::config(format!(
                "normalization canvas {} does not match encoder input {side}",
                spec.canvas
            )));
        }
        v = normalize_object(&v, spec)?;
    }
    match &v.payload {
        crate::dataset::Payload::Vector(_) => rasterize(&v, side),
        crate::dataset::Payload::Raster(img) => {
            if img.side() != side {
                return Err(Error::data(format!(
                    "{}: raster side {} does not match encoder input {side}; \
                     enable normalization to resample",
                    v.key,
                    img.side()
                )));
            }
            Ok(img.clone())
        }
    }
}

/// Rank every query view against the gallery built from the same records.
pub fn evaluate_retrieval(
    gallery_records: &[ShapeRecord],
    query_records: &[ShapeRecord],
    encoder: &Encoder,
    spec: &EvalSpec,
) -> Result<(Metrics, Vec<Ranking>)> {
    validate_gallery_views(
        gallery_records,
        &spec.gallery_style,
        &spec.gallery_azimuths,
        spec.allow_missing_views,
    )?;
    let side = encoder.input_side();

    let gallery_views: Vec<(&ShapeRecord, &SketchView)> = gallery_records
        .iter()
        .flat_map(|r| {
            r.views_for(&spec.gallery_style)
                .iter()
                .filter(|v| spec.gallery_azimuths.contains(&v.key.azimuth_deg))
                .map(move |v| (r, v))
        })
        .collect();
    if gallery_views.is_empty() {
        return Err(Error::data(format!(
            "no gallery views in style `{}`",
            spec.gallery_style
        )));
    }
    let gallery_embedded: Vec<(String, crate::dataset::ViewKey, Vec<f32>)> = gallery_views
        .par_iter()
        .map(|(r, v)| {
            let img = prepare_view_image(v, spec.stroke_width, spec.norm.as_ref(), side)?;
            Ok((r.object_id.clone(), v.key.clone(), encoder.embed(&img)?.values))
        })
        .collect::<Result<_>>()?;
    let mut gallery = GalleryEmbeddings::new();
    for (id, key, values) in gallery_embedded {
        gallery.entry(id).or_default().push((key, values));
    }

    let query_views: Vec<&SketchView> = query_records
        .iter()
        .flat_map(|r| {
            r.views_for(&spec.query_style)
                .iter()
                .filter(|v| spec.query_azimuths.contains(&v.key.azimuth_deg))
        })
        .collect();
    if query_views.is_empty() {
        return Err(Error::data(format!(
            "no query views in style `{}` at the requested azimuths",
            spec.query_style
        )));
    }
    let rankings: Vec<Ranking> = query_views
        .par_iter()
        .map(|v| {
            let img = prepare_view_image(v, spec.stroke_width, spec.norm.as_ref(), side)?;
            let emb = encoder.embed(&img)?;
            rank_gallery(&v.key, &emb, &gallery, spec.metric)
        })
        .collect::<Result<_>>()?;
    let metrics = metrics_with_identity_gt(&rankings)?;
    Ok((metrics, rankings))
}

/// Test-scope records for a seed: the test split (optionally subsampled to
/// the requested gallery size), or all records when no split is declared.
pub fn scope_test_records(
    p: &Plan,
    records: &[ShapeRecord],
    seed: u64,
) -> Result<(Vec<ShapeRecord>, Option<DatasetSplit>)> {
    let Some(split_seed) = p.data.split_seed else {
        return Ok((records.to_vec(), None));
    };
    let ids: Vec<String> = records.iter().map(|r| r.object_id.clone()).collect();
    let split = split_dataset(&ids, split_seed)?;
    let mut test_ids = split.test.clone();
    if let Some(n) = p.gallery.size {
        let n = n.min(test_ids.len());
        test_ids = select_test_gallery(&test_ids, n, p.gallery.seed.unwrap_or(seed))?;
    }
    let selected: Vec<ShapeRecord> = records
        .iter()
        .filter(|r| test_ids.contains(&r.object_id))
        .cloned()
        .collect();
    Ok((selected, Some(split)))
}

fn class_groups(records: &[ShapeRecord], pooled: bool) -> Vec<(String, Vec<ShapeRecord>)> {
    if pooled {
        return vec![("all".to_string(), records.to_vec())];
    }
    let mut groups: BTreeMap<String, Vec<ShapeRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.class_label.clone()).or_default().push(r.clone());
    }
    groups.into_iter().collect()
}

fn pooled(p: &Plan) -> bool {
    p.class_mode.as_deref() != Some("per_class")
}

/// Zero-shot retrieval rows for every seed (and class group) of the plan.
pub fn run_retrieval_experiment(
    p: &Plan,
    records: &[ShapeRecord],
    encoder: &Encoder,
) -> Result<ResultTable> {
    let spec = EvalSpec::from_plan(p)?;
    let mut table = ResultTable::default();
    for &seed in &p.seeds {
        let (scoped, _) = scope_test_records(p, records, seed)?;
        for (class, group) in class_groups(&scoped, pooled(p)) {
            let started = Instant::now();
            let (metrics, _) = evaluate_retrieval(&group, &group, encoder, &spec)?;
            table.rows.push(ResultRow {
                name: p.name.clone(),
                class_label: class,
                query_style: spec.query_style.clone(),
                gallery_style: spec.gallery_style.clone(),
                metric: spec.metric.to_string(),
                layer: encoder.embed_layer(),
                stroke_width: spec.stroke_width,
                bbox_target: None,
                normalized: spec.norm.is_some(),
                strategy: Some("zero_shot".into()),
                seed,
                acc_at_1: metrics.acc_at_1,
                acc_at_5: metrics.acc_at_5,
                n_queries: metrics.n_queries,
                runtime_s: started.elapsed().as_secs_f64(),
            });
        }
    }
    table.sort();
    Ok(table)
}

/// Normalization on/off pair of rows per class and seed.
pub fn run_alignment_ablation(
    p: &Plan,
    records: &[ShapeRecord],
    encoder: &Encoder,
) -> Result<ResultTable> {
    let mut table = ResultTable::default();
    for enabled in [true, false] {
        let mut variant = p.clone();
        variant.norm.enabled = enabled;
        let rows = run_retrieval_experiment(&variant, records, encoder)?;
        table.rows.extend(rows.rows.into_iter().map(|mut r| {
            r.normalized = enabled;
            r
        }));
    }
    table.sort();
    Ok(table)
}

/// Gallery-representation ablation: the plan's gallery style versus an
/// alternative style, same queries.
pub fn run_representation_ablation(
    p: &Plan,
    records: &[ShapeRecord],
    encoder: &Encoder,
    alt_gallery_style: &str,
) -> Result<ResultTable> {
    let mut table = ResultTable::default();
    for style in [p.gallery.style.as_str(), alt_gallery_style] {
        let mut variant = p.clone();
        variant.gallery.style = style.to_string();
        let rows = run_retrieval_experiment(&variant, records, encoder)?;
        table.rows.extend(rows.rows);
    }
    table.sort();
    Ok(table)
}

/// Outcome of one fine-tuning strategy on one seed.
pub struct StrategyRun {
    pub strategy: String,
    pub before: Metrics,
    pub after: Metrics,
    pub log: Vec<EpochRow>,
    pub encoder: Encoder,
    pub temperature: Temperature,
}

/// Train (if the strategy requires it) on the train split and evaluate on
/// the test scope. Zero-shot evaluates the base encoder unchanged.
pub fn strategy_run(
    p: &Plan,
    records: &[ShapeRecord],
    base: &Encoder,
    strategy: &str,
    seed: u64,
) -> Result<StrategyRun> {
    let spec = EvalSpec::from_plan(p)?;
    let (test_records, split) = scope_test_records(p, records, seed)?;
    let (before, _) = evaluate_retrieval(&test_records, &test_records, base, &spec)?;

    if strategy == "zero_shot" {
        return Ok(StrategyRun {
            strategy: strategy.into(),
            before,
            after: before,
            log: Vec::new(),
            encoder: base.clone(),
            temperature: Temperature::default(),
        });
    }

    let split = split.ok_or_else(|| {
        Error::config("training strategies need data.split_seed to form a train split")
    })?;
    let train_records: Vec<ShapeRecord> = records
        .iter()
        .filter(|r| split.train.contains(&r.object_id))
        .cloned()
        .collect();
    let layer = base.embed_layer();
    let cfg = p.finetune_config(strategy, layer, seed)?;

    let val_ctx = match cfg.val_every {
        Some(_) if !split.val.is_empty() => Some(ValContext::build(
            records,
            &split.val,
            &cfg.style2,
            &p.query.azimuths,
            &cfg.style1,
            base.input_side(),
            spec.metric,
        )?),
        _ => None,
    };

    let outcome: TrainOutcome = match strategy {
        "full" | "none" => train(&train_records, &cfg, base, val_ctx.as_ref())?,
        "layernorm" => finetune_layernorm(&train_records, &cfg, base, val_ctx.as_ref())?,
        "vpt" => finetune_vpt(&train_records, &cfg, base, val_ctx.as_ref())?,
        "scratch" => train_from_scratch(&train_records, &cfg, base, val_ctx.as_ref())?,
        other => return Err(Error::config(format!("unknown strategy `{other}`"))),
    };

    let (after, _) = evaluate_retrieval(&test_records, &test_records, &outcome.encoder, &spec)?;
    Ok(StrategyRun {
        strategy: strategy.into(),
        before,
        after,
        log: outcome.log,
        encoder: outcome.encoder,
        temperature: outcome.temperature,
    })
}

/// One row per strategy plan per seed (class-pooled evaluation).
pub fn run_strategy_comparison(
    plans: &[Plan],
    records: &[ShapeRecord],
    base: &Encoder,
) -> Result<ResultTable> {
    let mut table = ResultTable::default();
    for p in plans {
        let strategy = p.strategy.clone().unwrap_or_else(|| "zero_shot".into());
        for &seed in &p.seeds {
            let started = Instant::now();
            let run = strategy_run(p, records, base, &strategy, seed)?;
            table.rows.push(ResultRow {
                name: p.name.clone(),
                class_label: "all".into(),
                query_style: p.query.style.clone(),
                gallery_style: p.gallery.style.clone(),
                metric: p.similarity.metric.clone(),
                layer: base.embed_layer(),
                stroke_width: Some(p.norm.stroke_width),
                bbox_target: None,
                normalized: p.norm.enabled,
                strategy: Some(run.strategy.clone()),
                seed,
                acc_at_1: run.after.acc_at_1,
                acc_at_5: run.after.acc_at_5,
                n_queries: run.after.n_queries,
                runtime_s: started.elapsed().as_secs_f64(),
            });
        }
    }
    table.sort();
    Ok(table)
}

/// Scale sweep: bbox targets x stroke widths x layers, queries and gallery
/// first normalized to the common reference box, then rescaled per target.
pub fn run_scale_sweep(p: &Plan, records: &[ShapeRecord], encoder: &Encoder) -> Result<ResultTable> {
    let sweep = p
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("sweep section required for scale sweeps"))?;
    let bbox = sweep
        .bbox
        .as_ref()
        .ok_or_else(|| Error::config("sweep.bbox.{min,max,steps} required"))?;
    let targets = sweep_targets(bbox.min, bbox.max, bbox.steps);
    let widths = sweep.widths.clone().unwrap_or_else(|| vec![2.2, 1.0]);
    let layers = match &sweep.layers {
        Some(l) => l.clone(),
        None => match encoder.spec().family {
            Family::Vit => vec![4, 6, 11],
            Family::Resnet => vec![2, 3, 4],
            Family::Toy => vec![1, 2, 4],
        },
    };
    let metric = p.metric()?;
    let side = encoder.input_side();
    let reference = NormalizationSpec {
        canvas: side as u32,
        target_box: sweep.reference_box,
        stroke_width: p.norm.stroke_width,
    };

    let mut table = ResultTable::default();
    for &seed in &p.seeds {
        let (scoped, _) = scope_test_records(p, records, seed)?;
        validate_gallery_views(
            &scoped,
            &p.gallery.style,
            &GALLERY_AZIMUTHS,
            p.gallery.allow_missing_views,
        )?;
        for &width in &widths {
            // reference-box images, computed once per width
            let gallery_refs: Vec<(String, crate::dataset::ViewKey, RasterImage)> = scoped
                .par_iter()
                .flat_map_iter(|r| r.views_for(&p.gallery.style).iter().map(move |v| (r, v)))
                .map(|(r, v)| {
                    let img = prepare_view_image(v, Some(width), Some(&reference), side)?;
                    Ok((r.object_id.clone(), v.key.clone(), img))
                })
                .collect::<Result<_>>()?;
            let query_refs: Vec<(crate::dataset::ViewKey, RasterImage)> = scoped
                .par_iter()
                .flat_map_iter(|r| {
                    r.views_for(&p.query.style)
                        .iter()
                        .filter(|v| p.query.azimuths.contains(&v.key.azimuth_deg))
                })
                .map(|v| {
                    let img = prepare_view_image(v, Some(width), Some(&reference), side)?;
                    Ok((v.key.clone(), img))
                })
                .collect::<Result<_>>()?;

            for &target in &targets {
                let started = Instant::now();
                let gallery_taps: Vec<(String, crate::dataset::ViewKey, Vec<Vec<f32>>)> =
                    gallery_refs
                        .par_iter()
                        .map(|(id, key, img)| {
                            let swept = scale_sweep_transform(img, target)?;
                            let taps = encoder.embed_layers(&swept, &layers)?;
                            Ok((
                                id.clone(),
                                key.clone(),
                                taps.into_iter().map(|t| t.values).collect(),
                            ))
                        })
                        .collect::<Result<_>>()?;
                let query_taps: Vec<(crate::dataset::ViewKey, Vec<Vec<f32>>)> = query_refs
                    .par_iter()
                    .map(|(key, img)| {
                        let swept = scale_sweep_transform(img, target)?;
                        let taps = encoder.embed_layers(&swept, &layers)?;
                        Ok((key.clone(), taps.into_iter().map(|t| t.values).collect()))
                    })
                    .collect::<Result<_>>()?;

                for (li, &layer) in layers.iter().enumerate() {
                    let mut gallery = GalleryEmbeddings::new();
                    for (id, key, taps) in &gallery_taps {
                        gallery
                            .entry(id.clone())
                            .or_default()
                            .push((key.clone(), taps[li].clone()));
                    }
                    let rankings: Vec<Ranking> = query_taps
                        .iter()
                        .map(|(key, taps)| {
                            let emb = crate::encoder::LayerEmbedding {
                                layer,
                                values: taps[li].clone(),
                            };
                            rank_gallery(key, &emb, &gallery, metric)
                        })
                        .collect::<Result<_>>()?;
                    let metrics = metrics_with_identity_gt(&rankings)?;
                    table.rows.push(ResultRow {
                        name: p.name.clone(),
                        class_label: "all".into(),
                        query_style: p.query.style.clone(),
                        gallery_style: p.gallery.style.clone(),
                        metric: metric.to_string(),
                        layer,
                        stroke_width: Some(width),
                        bbox_target: Some(target),
                        normalized: true,
                        strategy: None,
                        seed,
                        acc_at_1: metrics.acc_at_1,
                        acc_at_5: metrics.acc_at_5,
                        n_queries: metrics.n_queries,
                        runtime_s: started.elapsed().as_secs_f64(),
                    });
                }
            }
        }
    }
    table.sort();
    Ok(table)
}

/// CSV always; per-(width, layer) accuracy-vs-scale line plots when a bbox
/// axis is present; a layers-by-targets heatmap when exactly those two
/// axes vary. File names embed the plan name and seed.
pub fn emit_outputs(table: &ResultTable, plan_name: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        return Err(Error::data("refusing to emit an empty result table"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut seeds: Vec<u64> = table.rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let seed_tag = if seeds.len() == 1 {
        format!("seed{}", seeds[0])
    } else {
        format!("seeds{}-{}", seeds[0], seeds[seeds.len() - 1])
    };
    let base = format!("{plan_name}_{seed_tag}");
    let mut written = Vec::new();

    let csv_path = dir.join(format!("{base}.csv"));
    table.write_csv(&csv_path)?;
    written.push(csv_path);

    let has_bbox = table.rows.iter().any(|r| r.bbox_target.is_some());
    if has_bbox {
        let mut widths: Vec<u64> = table
            .rows
            .iter()
            .filter_map(|r| r.stroke_width.map(f64::to_bits))
            .collect();
        widths.sort_unstable();
        widths.dedup();
        let mut layers: Vec<usize> = table.rows.iter().map(|r| r.layer).collect();
        layers.sort_unstable();
        layers.dedup();

        for &wbits in &widths {
            let w = f64::from_bits(wbits);
            for &layer in &layers {
                let mut points: Vec<(f64, f64)> = table
                    .rows
                    .iter()
                    .filter(|r| {
                        r.layer == layer
                            && r.stroke_width.map(f64::to_bits) == Some(wbits)
                            && r.bbox_target.is_some()
                    })
                    .map(|r| (r.bbox_target.unwrap(), r.acc_at_1))
                    .collect();
                if points.is_empty() {
                    continue;
                }
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                let img = plots::line_plot(&points, (0.0, 100.0), 360);
                let path = dir.join(format!("{base}_w{w}_L{layer}.png"));
                img.save_png_path(&path)?;
                written.push(path);
            }
        }

        // heatmap only when exactly two axes vary (targets x layers)
        if widths.len() == 1 && layers.len() > 1 {
            let mut targets: Vec<u64> = table
                .rows
                .iter()
                .filter_map(|r| r.bbox_target.map(f64::to_bits))
                .collect();
            targets.sort_unstable();
            targets.dedup();
            let mut grid = vec![0.0f64; layers.len() * targets.len()];
            for r in &table.rows {
                if let Some(t) = r.bbox_target {
                    let li = layers.iter().position(|&l| l == r.layer).unwrap();
                    let ti = targets.iter().position(|&x| x == t.to_bits()).unwrap();
                    grid[li * targets.len() + ti] = r.acc_at_1;
                }
            }
            let img = plots::heatmap_grid(&grid, layers.len(), targets.len(), 0.0, 100.0);
            let path = dir.join(format!("{base}_heatmap.png"));
            img.save_png_path(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::procedural::generate_procedural_dataset;
    use crate::encoder::toy_encoder;

    fn demo_plan(extra: &str) -> Plan {
        parse_plan(
            &format!(
                r#"
name = "demo"
[data.procedural]
seed = 5
n_objects = 12
[query]
style = "anime"
[gallery]
style = "npr"
[encoder]
family = "toy"
layer = 2
{extra}
"#
            ),
            &[],
        )
        .unwrap()
    }

    #[test]
    fn identity_plan_scores_perfect_accuracy() {
        let plan = demo_plan("");
        let records = plan.load_records(Path::new(".")).unwrap();
        let encoder = plan.build_encoder(Path::new(".")).unwrap();
        let mut spec = EvalSpec::from_plan(&plan).unwrap();
        spec.query_style = spec.gallery_style.clone(); // queries drawn from gallery views
        let (metrics, _) = evaluate_retrieval(&records, &records, &encoder, &spec).unwrap();
        assert_eq!(metrics.acc_at_1, 100.0);
        assert_eq!(metrics.acc_at_5, 100.0);
        assert_eq!(metrics.n_queries, 12 * 3);
    }

    #[test]
    fn retrieval_rows_are_reproducible() {
        let plan = demo_plan("");
        let records = plan.load_records(Path::new(".")).unwrap();
        let encoder = plan.build_encoder(Path::new(".")).unwrap();
        let a = run_retrieval_experiment(&plan, &records, &encoder).unwrap();
        let b = run_retrieval_experiment(&plan, &records, &encoder).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 1);
        assert!(a.rows[0].acc_at_5 >= a.rows[0].acc_at_1);
    }

    #[test]
    fn alignment_rows_cover_both_settings_and_match_when_identical() {
        let plan = demo_plan("");
        let records = plan.load_records(Path::new(".")).unwrap();
        let encoder = plan.build_encoder(Path::new(".")).unwrap();
        let table = run_alignment_ablation(&plan, &records, &encoder).unwrap();
        assert_eq!(table.rows.len(), 2);
        let normalized: Vec<bool> = table.rows.iter().map(|r| r.normalized).collect();
        assert!(normalized.contains(&true) && normalized.contains(&false));

        // identical preprocessing on both arms produces identical rows
        let mut on = plan.clone();
        on.norm.enabled = true;
        let mut off = plan.clone();
        off.norm.enabled = true; // same settings
        let a = run_retrieval_experiment(&on, &records, &encoder).unwrap();
        let b = run_retrieval_experiment(&off, &records, &encoder).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn representation_rows_prefer_same_style_gallery() {
        let plan = demo_plan("");
        let records = plan.load_records(Path::new(".")).unwrap();
        let encoder = plan.build_encoder(Path::new(".")).unwrap();
        let table = run_representation_ablation(&plan, &records, &encoder, "anime").unwrap();
        assert_eq!(table.rows.len(), 2);
        let same = table
            .rows
            .iter()
            .find(|r| r.gallery_style == "anime")
            .unwrap();
        let cross = table.rows.iter().find(|r| r.gallery_style == "npr").unwrap();
        assert!(
            same.acc_at_1 >= cross.acc_at_1,
            "same-style {} < cross-style {}",
            same.acc_at_1,
            cross.acc_at_1
        );
        // identical domains on both sides -> identical rows
        let twice = run_representation_ablation(&plan, &records, &encoder, &plan.gallery.style)
            .unwrap();
        assert_eq!(twice.rows[0], twice.rows[1]);
    }

    #[test]
    fn sweep_produces_full_axis_grid() {
        let plan = demo_plan(
            "[sweep]\nwidths = [2.2, 1.0]\nlayers = [1, 2, 3]\n[sweep.bbox]\nmin = 85.0\nmax = 187.0\nsteps = 60\n",
        );
        let records = generate_procedural_dataset(5, 12).unwrap();
        let encoder = plan.build_encoder(Path::new(".")).unwrap();
        let table = run_scale_sweep(&plan, &records, &encoder).unwrap();
        assert_eq!(table.rows.len(), 60 * 2 * 3);
        assert!(table.rows.iter().all(|r| r.bbox_target.is_some()
            && r.stroke_width.is_some()
            && r.acc_at_5 >= r.acc_at_1));

        // adjacent-step smoothness per (width, layer) series
        for &w in &[2.2f64, 1.0] {
            for layer in [1usize, 2, 3] {
                let series: Vec<f64> = table
                    .rows
                    .iter()
                    .filter(|r| r.stroke_width == Some(w) && r.layer == layer)
                    .map(|r| r.acc_at_1)
                    .collect();
                assert_eq!(series.len(), 60);
                for pair in series.windows(2) {
                    assert!(
                        (pair[0] - pair[1]).abs() < 30.0,
                        "adjacent steps jumped {} -> {}",
                        pair[0],
                        pair[1]
                    );
                }
            }
        }

        let dir = tempfile::tempdir().unwrap();
        let written = emit_outputs(&table, "sweepdemo", dir.path()).unwrap();
        // 1 CSV + 6 line plots (2 widths x 3 layers); no heatmap for 3 axes
        assert_eq!(written.len(), 7);
        assert_eq!(
            written.iter().filter(|p| p.extension().unwrap() == "csv").count(),
            1
        );
    }

    #[test]
    fn csv_round_trips_and_reruns_byte_identically() {
        let plan = demo_plan("");
        let records = plan.load_records(Path::new(".")).unwrap();
        let encoder = plan.build_encoder(Path::new(".")).unwrap();
        let table = run_retrieval_experiment(&plan, &records, &encoder).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_outputs(&table, "demo", dir.path()).unwrap();
        let csv_path = &paths[0];
        let first = std::fs::read(csv_path).unwrap();
        let back = ResultTable::read_csv(csv_path).unwrap();
        assert_eq!(back, table);
        // re-run the unchanged plan and overwrite
        let table2 = run_retrieval_experiment(&plan, &records, &encoder).unwrap();
        emit_outputs(&table2, "demo", dir.path()).unwrap();
        assert_eq!(first, std::fs::read(csv_path).unwrap());
    }

    #[test]
    fn strategy_none_reproduces_zero_shot_row() {
        let plan = demo_plan("[data]\nsplit_seed = 3\n[finetune]\nepochs = 2\nbatch_size = 2\n");
        let records = plan.load_records(Path::new(".")).unwrap();
        let encoder = plan.build_encoder(Path::new(".")).unwrap();
        let zs = strategy_run(&plan, &records, &encoder, "zero_shot", 1).unwrap();
        let none = strategy_run(&plan, &records, &encoder, "none", 1).unwrap();
        assert_eq!(zs.after.acc_at_1, none.after.acc_at_1);
        assert_eq!(zs.after.acc_at_5, none.after.acc_at_5);
    }

    #[test]
    fn class_average_weights_classes_equally() {
        let mut table = ResultTable::default();
        for (class, a1) in [("chair", 60.0), ("lamp", 80.0)] {
            table.rows.push(ResultRow {
                name: "t".into(),
                class_label: class.into(),
                query_style: "anime".into(),
                gallery_style: "npr".into(),
                metric: "cosine_max".into(),
                layer: 2,
                stroke_width: Some(2.2),
                bbox_target: None,
                normalized: true,
                strategy: None,
                seed: 1,
                acc_at_1: a1,
                acc_at_5: a1 + 10.0,
                n_queries: if class == "chair" { 100 } else { 10 },
                runtime_s: 0.0,
            });
        }
        let avg = table.with_class_average();
        let row = avg.rows.iter().find(|r| r.class_label == "avg").unwrap();
        assert_eq!(row.acc_at_1, 70.0); // equal weight per class, not per query
        assert_eq!(row.n_queries, 110);
    }
}
