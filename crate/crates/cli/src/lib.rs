//! Command implementations behind the `sketchview` binary: dataset
//! generation, preprocessing, embedding, retrieval, evaluation,
//! fine-tuning, sweeps, analysis, and the self-contained smoke pipeline.
//! Every artifact-producing run writes a `run.json` provenance record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sketchview_core::analysis::{emit_heatmaps, shape_distance_matrix, view_distance_matrix, EmbeddingSet};
use sketchview_core::dataset::{
    generate_manifest_path, save_manifest, split_dataset, ShapeRecord, GALLERY_AZIMUTHS,
};
use sketchview_core::encoder::Encoder;
use sketchview_core::error::{Error, Result};
use sketchview_core::experiments::{
    emit_outputs, evaluate_retrieval, prepare_view_image, run_alignment_ablation,
    run_retrieval_experiment, run_scale_sweep, scope_test_records, strategy_run, EvalSpec, Plan,
    ResultRow, ResultTable,
};
use sketchview_core::finetune::{write_train_log, FineTuneConfig};
use sketchview_core::preprocess::{normalize_object, set_stroke_width};
use sketchview_core::retrieval::store::embed_gallery;
use sketchview_core::retrieval::Metrics;

/// Provenance snapshot written next to every run's outputs. Contains no
/// wall-clock data, so identical runs produce identical records.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_path: Option<String>,
    pub overrides: Vec<String>,
    pub resolved_config: Option<toml::Value>,
    pub seeds: Vec<u64>,
    pub versions: BTreeMap<String, String>,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl RunRecord {
    pub fn new(command: &str) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("sketchview-cli".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert(
            "sketchview-core".into(),
            sketchview_core::VERSION.to_string(),
        );
        RunRecord {
            command: command.into(),
            config_path: None,
            overrides: Vec::new(),
            resolved_config: None,
            seeds: Vec::new(),
            versions,
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn hash_input(&mut self, label: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.input_hashes
            .insert(label.into(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join("run.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::data(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

pub struct LoadedPlan {
    pub plan: Plan,
    pub base_dir: PathBuf,
    pub record: RunRecord,
}

/// Load a plan with overrides and start its provenance record.
pub fn load_plan_for(command: &str, config: &Path, overrides: &[String]) -> Result<LoadedPlan> {
    let plan = sketchview_core::experiments::load_plan(config, overrides)?;
    let base_dir = config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut record = RunRecord::new(command);
    record.config_path = Some(config.display().to_string());
    record.overrides = overrides.to_vec();
    record.seeds = plan.seeds.clone();
    record.resolved_config = Some(
        toml::Value::try_from(&plan).map_err(|e| Error::data(format!("config snapshot: {e}")))?,
    );
    if let Some(manifest) = &plan.data.manifest {
        let resolved = if manifest.is_absolute() {
            manifest.clone()
        } else {
            base_dir.join(manifest)
        };
        if resolved.exists() {
            record.hash_input("manifest", &resolved)?;
        }
    }
    if let Some(weights) = &plan.encoder.weights {
        let resolved = if weights.is_absolute() {
            weights.clone()
        } else {
            base_dir.join(weights)
        };
        if resolved.exists() {
            record.hash_input("weights", &resolved)?;
        }
    }
    Ok(LoadedPlan {
        plan,
        base_dir,
        record,
    })
}

fn note_outputs(record: &mut RunRecord, paths: &[PathBuf]) {
    for p in paths {
        record.outputs.push(p.display().to_string());
    }
}

/// `gen-synth`: emit the plan's procedural dataset as SVGs plus a manifest.
pub fn cmd_gen_synth(loaded: &mut LoadedPlan, out_dir: &Path) -> Result<PathBuf> {
    let records = loaded.plan.load_records(&loaded.base_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = out_dir.join("manifest.jsonl");
    save_manifest(&records, &manifest)?;
    note_outputs(&mut loaded.record, &[manifest.clone()]);
    loaded.record.write(out_dir)?;
    Ok(manifest)
}

/// `preprocess`: stroke-width assignment plus centering/scaling, written
/// back out as a new manifest.
pub fn cmd_preprocess(loaded: &mut LoadedPlan, out_dir: &Path) -> Result<PathBuf> {
    let records = loaded.plan.load_records(&loaded.base_dir)?;
    let spec = loaded.plan.norm_spec();
    let width = loaded.plan.norm.stroke_width;
    let normalize = loaded.plan.norm.enabled;
    let mut out_records = Vec::with_capacity(records.len());
    for rec in &records {
        let mut out = rec.clone();
        for views in out.views.values_mut() {
            for view in views.iter_mut() {
                let mut v = view.clone();
                if matches!(v.payload, sketchview_core::dataset::Payload::Vector(_)) {
                    v = set_stroke_width(&v, width)?;
                }
                if normalize {
                    v = normalize_object(&v, &spec)?;
                }
                *view = v;
            }
        }
        out_records.push(out);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = out_dir.join("manifest.jsonl");
    save_manifest(&out_records, &manifest)?;
    note_outputs(&mut loaded.record, &[manifest.clone()]);
    loaded.record.write(out_dir)?;
    Ok(manifest)
}

/// Store root: `SKETCHVIEW_CACHE` when set, else `<out_dir>/embeddings`.
pub fn store_root(out_dir: &Path) -> PathBuf {
    std::env::var_os("SKETCHVIEW_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| out_dir.join("embeddings"))
}

/// `embed`: preprocess per the plan and persist an embedding store.
pub fn cmd_embed(loaded: &mut LoadedPlan, out_dir: &Path) -> Result<PathBuf> {
    let plan = &loaded.plan;
    let records = plan.load_records(&loaded.base_dir)?;
    let encoder = plan.build_encoder(&loaded.base_dir)?;
    let layer = encoder.embed_layer();
    let prepared = prepare_records(&records, plan, &encoder)?;
    let base = store_root(out_dir).join(format!("{}_L{layer}", plan.name));
    let store = embed_gallery(&prepared, &encoder, &[layer], &base)?;
    log::info!("embedded {} entries into {}", store.entries().len(), base.display());
    note_outputs(
        &mut loaded.record,
        &[base.with_extension("bin"), base.with_extension("json")],
    );
    loaded.record.write(out_dir)?;
    Ok(base)
}

/// Width + normalization applied up front so stores hold encoder-ready
/// views.
fn prepare_records(records: &[ShapeRecord], plan: &Plan, encoder: &Encoder) -> Result<Vec<ShapeRecord>> {
    let norm = plan.norm.enabled.then(|| plan.norm_spec());
    let width = Some(plan.norm.stroke_width);
    let side = encoder.input_side();
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let mut copy = rec.clone();
        for views in copy.views.values_mut() {
            for view in views.iter_mut() {
                let img = prepare_view_image(view, width, norm.as_ref(), side)?;
                view.payload = sketchview_core::dataset::Payload::Raster(img);
                view.canvas_size = side as u32;
            }
        }
        out.push(copy);
    }
    Ok(out)
}

/// `retrieve`: rank the gallery for every query view; write rankings CSV.
pub fn cmd_retrieve(loaded: &mut LoadedPlan, out_dir: &Path) -> Result<PathBuf> {
    let plan = &loaded.plan;
    let records = plan.load_records(&loaded.base_dir)?;
    let encoder = plan.build_encoder(&loaded.base_dir)?;
    let spec = EvalSpec::from_plan(plan)?;
    let seed = plan.seeds.first().copied().unwrap_or(1);
    let (scoped, _) = scope_test_records(plan, &records, seed)?;
    let (metrics, rankings) = evaluate_retrieval(&scoped, &scoped, &encoder, &spec)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(format!("{}_rankings.csv", plan.name));
    let mut w = csv::WriterAdapter::create(&path)?;
    w.write(&["query", "rank", "object_id", "score", "best_view_azimuth"])?;
    for ranking in &rankings {
        for (i, entry) in ranking.entries.iter().enumerate() {
            w.write(&[
                ranking.query.to_string(),
                (i + 1).to_string(),
                entry.object_id.clone(),
                entry.score.to_string(),
                entry
                    .best_view
                    .as_ref()
                    .map(|k| k.azimuth_deg.to_string())
                    .unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    log::info!(
        "acc@1 {:.2} acc@5 {:.2} over {} queries",
        metrics.acc_at_1,
        metrics.acc_at_5,
        metrics.n_queries
    );
    note_outputs(&mut loaded.record, &[path.clone()]);
    loaded.record.write(out_dir)?;
    Ok(path)
}

// Thin csv wrapper so this crate does not re-import the csv crate types
// everywhere.
mod csv {
    use super::*;

    pub struct WriterAdapter {
        inner: ::csv::Writer<std::fs::File>,
    }

    impl WriterAdapter {
        pub fn create(path: &Path) -> Result<Self> {
            Ok(WriterAdapter {
                inner: ::csv::Writer::from_path(path).map_err(|e| Error::data(e.to_string()))?,
            })
        }

        pub fn write<S: AsRef<[u8]>, I: IntoIterator<Item = S>>(&mut self, rec: I) -> Result<()> {
            self.inner
                .write_record(rec)
                .map_err(|e| Error::data(e.to_string()))
        }

        pub fn flush(&mut self) -> Result<()> {
            self.inner.flush().map_err(|e| Error::data(e.to_string()))
        }
    }
}

/// `eval`: run the plan's retrieval experiment (plus alignment ablation
/// when `norm.enabled=false` rows are wanted via strategy `alignment`).
pub fn cmd_eval(loaded: &mut LoadedPlan, out_dir: &Path) -> Result<ResultTable> {
    let plan = &loaded.plan;
    let records = plan.load_records(&loaded.base_dir)?;
    let encoder = plan.build_encoder(&loaded.base_dir)?;
    let table = match plan.strategy.as_deref() {
        Some("alignment") => run_alignment_ablation(plan, &records, &encoder)?,
        _ => run_retrieval_experiment(plan, &records, &encoder)?,
    };
    let written = emit_outputs(&table, &plan.name, out_dir)?;
    note_outputs(&mut loaded.record, &written);
    loaded.record.write(out_dir)?;
    Ok(table)
}

/// `finetune`: train per the plan's strategy on the train split; write the
/// training log, the checkpoint, and a before/after result table.
pub fn cmd_finetune(loaded: &mut LoadedPlan, out_dir: &Path) -> Result<ResultTable> {
    let plan = &loaded.plan;
    let records = plan.load_records(&loaded.base_dir)?;
    let encoder = plan.build_encoder(&loaded.base_dir)?;
    let strategy = plan.strategy.clone().unwrap_or_else(|| "full".into());
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut table = ResultTable::default();
    let mut written = Vec::new();
    for &seed in &plan.seeds {
        let run = strategy_run(plan, &records, &encoder, &strategy, seed)?;
        let log_path = out_dir.join(format!("{}_seed{seed}_trainlog.csv", plan.name));
        write_train_log(&run.log, &log_path)?;
        let ckpt = out_dir.join(format!("{}_seed{seed}_ckpt", plan.name));
        run.encoder.save_exchange(&ckpt)?;
        written.extend([log_path, ckpt.with_extension("json"), ckpt.with_extension("bin")]);
        for (tag, m) in [("zero_shot", run.before), (strategy.as_str(), run.after)] {
            table.rows.push(result_row(plan, tag, seed, &encoder, m));
        }
    }
    table.sort();
    let csv_paths = emit_outputs(&table, &format!("{}_{strategy}", plan.name), out_dir)?;
    written.extend(csv_paths);
    note_outputs(&mut loaded.record, &written);
    loaded.record.write(out_dir)?;
    Ok(table)
}

fn result_row(plan: &Plan, strategy: &str, seed: u64, encoder: &Encoder, m: Metrics) -> ResultRow {
    ResultRow {
        name: plan.name.clone(),
        class_label: "all".into(),
        query_style: plan.query.style.clone(),
        gallery_style: plan.gallery.style.clone(),
        metric: plan.similarity.metric.clone(),
        layer: encoder.embed_layer(),
        stroke_width: Some(plan.norm.stroke_width),
        bbox_target: None,
        normalized: plan.norm.enabled,
        strategy: Some(strategy.into()),
        seed,
        acc_at_1: m.acc_at_1,
        acc_at_5: m.acc_at_5,
        n_queries: m.n_queries,
        runtime_s: 0.0,
    }
}

/// `sweep`: the scale/width/layer grid with plots.
pub fn cmd_sweep(loaded: &mut LoadedPlan, out_dir: &Path) -> Result<ResultTable> {
    let plan = &loaded.plan;
    let records = plan.load_records(&loaded.base_dir)?;
    let encoder = plan.build_encoder(&loaded.base_dir)?;
    let table = run_scale_sweep(plan, &records, &encoder)?;
    let written = emit_outputs(&table, &plan.name, out_dir)?;
    note_outputs(&mut loaded.record, &written);
    loaded.record.write(out_dir)?;
    Ok(table)
}

/// `analyze`: shape and view distance matrices over the plan's two styles,
/// with heatmaps.
pub fn cmd_analyze(loaded: &mut LoadedPlan, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let plan = &loaded.plan;
    let records = plan.load_records(&loaded.base_dir)?;
    let encoder = plan.build_encoder(&loaded.base_dir)?;
    let layer = encoder.embed_layer();
    let prepared = prepare_records(&records, plan, &encoder)?;
    let base = store_root(out_dir).join(format!("{}_analysis_L{layer}", plan.name));
    let store = embed_gallery(&prepared, &encoder, &[layer], &base)?;
    let set = EmbeddingSet::from_store(&store, layer);

    let mut objects: Vec<String> = records.iter().map(|r| r.object_id.clone()).collect();
    objects.sort();
    let shape_objects: Vec<String> = objects.iter().take(10).cloned().collect();
    let azimuths = &plan.query.azimuths;

    let style_g = plan.gallery.style.clone();
    let style_q = plan.query.style.clone();
    let mut written = Vec::new();
    for (di, dj) in [
        (style_g.as_str(), style_g.as_str()),
        (style_g.as_str(), style_q.as_str()),
        (style_q.as_str(), style_q.as_str()),
    ] {
        let shape = shape_distance_matrix(&shape_objects, azimuths, di, dj, &set, layer)?;
        let (c1, p1) = emit_heatmaps(&shape, out_dir, "shape")?;
        let view = view_distance_matrix(azimuths, di, dj, &objects, &set, layer)?;
        let (c2, p2) = emit_heatmaps(&view, out_dir, "view")?;
        written.extend([c1, p1, c2, p2]);
    }
    note_outputs(&mut loaded.record, &written);
    loaded.record.write(out_dir)?;
    Ok(written)
}

/// Deterministic report of the end-to-end smoke pipeline.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SmokeReport {
    pub seed: u64,
    pub n_objects: usize,
    pub split: (usize, usize, usize),
    pub n_queries: usize,
    pub acc_before: (f64, f64),
    pub acc_after: (f64, f64),
    pub final_train_loss: f64,
    pub initial_train_loss: f64,
    pub stages: Vec<String>,
}

/// gen-synth -> preprocess -> embed -> retrieve -> finetune -> retrieve,
/// entirely from procedural data and the toy encoder. Every artifact it
/// leaves behind is byte-deterministic in `seed`.
pub fn end_to_end_smoke(seed: u64, out_dir: &Path) -> Result<SmokeReport> {
    let stage = |name: &str, e: Error| Error::InvalidData(format!("stage {name}: {e}"));
    let mut stages = Vec::new();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let data_dir = out_dir.join("data");

    // gen-synth
    let n_objects = 120usize;
    let records = sketchview_core::dataset::procedural::generate_procedural_dataset(seed, n_objects)
        .map_err(|e| stage("gen-synth", e))?;
    let raw_manifest = generate_manifest_path(&data_dir, "raw");
    save_manifest(&records, &raw_manifest).map_err(|e| stage("gen-synth", e))?;
    stages.push("gen-synth".into());

    // preprocess (through the manifest round trip, like the real pipeline)
    let plan_text = format!(
        r#"
name = "smoke"
seeds = [{seed}]
[data]
manifest = "raw/manifest.jsonl"
split_seed = {seed}
[query]
style = "anime"
[gallery]
style = "npr"
[encoder]
family = "toy"
layer = 2
seed = {seed}
"#
    );
    let plan: Plan = plan_text.parse().map_err(|e: Error| stage("preprocess", e))?;
    let records = sketchview_core::dataset::load_manifest(&raw_manifest)
        .map_err(|e| stage("preprocess", e))?;
    let encoder = sketchview_core::encoder::toy_encoder(seed)
        .with_embed_layer(2)
        .map_err(|e| stage("preprocess", e))?;
    let prepared = prepare_records(&records, &plan, &encoder).map_err(|e| stage("preprocess", e))?;
    stages.push("preprocess".into());

    // split + embed the test scope
    let ids: Vec<String> = prepared.iter().map(|r| r.object_id.clone()).collect();
    let split = split_dataset(&ids, seed).map_err(|e| stage("embed", e))?;
    let test_records: Vec<ShapeRecord> = prepared
        .iter()
        .filter(|r| split.test.contains(&r.object_id))
        .cloned()
        .collect();
    let store_base = out_dir.join("embeddings").join("smoke_before_L2");
    embed_gallery(&test_records, &encoder, &[2], &store_base).map_err(|e| stage("embed", e))?;
    stages.push("embed".into());

    // retrieve (before)
    let spec = EvalSpec {
        metric: sketchview_core::retrieval::Metric::CosineMax,
        norm: None, // records already preprocessed
        stroke_width: None,
        query_style: "anime".into(),
        query_azimuths: vec![0.0, 45.0, 90.0],
        gallery_style: "npr".into(),
        gallery_azimuths: GALLERY_AZIMUTHS.to_vec(),
        allow_missing_views: false,
    };
    let (before, _) = evaluate_retrieval(&test_records, &test_records, &encoder, &spec)
        .map_err(|e| stage("retrieve", e))?;
    stages.push("retrieve".into());

    // finetune on the train split
    let train_records: Vec<ShapeRecord> = prepared
        .iter()
        .filter(|r| split.train.contains(&r.object_id))
        .cloned()
        .collect();
    let cfg = FineTuneConfig::toy_transfer(2, seed);
    let outcome = sketchview_core::finetune::train(&train_records, &cfg, &encoder, None)
        .map_err(|e| stage("finetune", e))?;
    let log_path = out_dir.join("trainlog.csv");
    write_train_log(&outcome.log, &log_path).map_err(|e| stage("finetune", e))?;
    let ckpt = out_dir.join("ckpt_after");
    outcome
        .encoder
        .save_exchange(&ckpt)
        .map_err(|e| stage("finetune", e))?;
    stages.push("finetune".into());

    // embed + retrieve (after)
    let store_after = out_dir.join("embeddings").join("smoke_after_L2");
    embed_gallery(&test_records, &outcome.encoder, &[2], &store_after)
        .map_err(|e| stage("embed-after", e))?;
    let (after, _) = evaluate_retrieval(&test_records, &test_records, &outcome.encoder, &spec)
        .map_err(|e| stage("retrieve-after", e))?;
    stages.push("retrieve-after".into());

    let report = SmokeReport {
        seed,
        n_objects,
        split: (split.train.len(), split.val.len(), split.test.len()),
        n_queries: after.n_queries,
        acc_before: (before.acc_at_1, before.acc_at_5),
        acc_after: (after.acc_at_1, after.acc_at_5),
        final_train_loss: outcome.final_loss(),
        initial_train_loss: outcome.initial_loss(),
        stages,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::data(e.to_string()))?;
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;

    let mut record = RunRecord::new("smoke");
    record.seeds = vec![seed];
    record.outputs = vec![
        report_path.display().to_string(),
        ckpt.with_extension("bin").display().to_string(),
    ];
    record.write(out_dir)?;
    Ok(report)
}
