//! Stage bodies and their input hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use crossview_heat::association::{run_association_suite, write_report, AssociationConfig, AssociationRecord};
use crossview_heat::domain::AttributeLabelSet;
use crossview_heat::eval::{Modality, SpatialFoldPlan};
use crossview_heat::features::compute_features;
use crossview_heat::ingest::{load_capture_index, load_footprints, load_labels, CaptureIndex, FootprintSet, LabelSummary};
use crossview_heat::pairing::{build_dataset, write_dataset, FilePanoramas};
use crossview_heat::raster::read_geotiff;
use crossview_heat::synth::{generate_synthetic_scene, SceneSpec};
use crossview_heat_model::cv::{cross_validate, evaluate_checkpoints, CvResult, CvSetup};
use serde::Serialize;

use crate::data::{cv_samples, load_pairs, read_csv, write_csv, FeatureRow, PredictionRow};
use crate::error::{CliError, Result};
use crate::pipeline::{InputHasher, Pipeline, Stage, StageOutput};

const DTYPE: DType = DType::F32;

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Missing(format!("{key} is not set")))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn output(records: &[(&str, usize)], artifacts: Vec<PathBuf>) -> StageOutput {
    StageOutput {
        records: records.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        artifacts,
    }
}

pub(crate) fn skip_reason(p: &Pipeline, s: Stage) -> Option<String> {
    match s {
        Stage::Associate if p.cfg.tir_raster.path.is_none() => Some("tir_raster.path is not set".into()),
        Stage::Eval if !Modality::ALL.iter().all(|m| p.cfg.train.modalities.contains(m)) => {
            Some("the ablation needs all three modalities".into())
        }
        _ => None,
    }
}

fn footprints(p: &Pipeline) -> Result<FootprintSet> {
    let path = required(&p.cfg.footprints.path, "footprints.path")?;
    Ok(load_footprints(path, &p.cfg.footprints.options())?)
}

fn captures(p: &Pipeline) -> Result<CaptureIndex> {
    let path = required(&p.cfg.captures.path, "captures.path")?;
    Ok(load_capture_index(path, p.cfg.captures.missing_image)?)
}

fn labels(p: &Pipeline) -> Result<BTreeMap<String, AttributeLabelSet>> {
    match &p.cfg.labels.path {
        Some(path) => Ok(load_labels(path)?),
        None => Ok(BTreeMap::new()),
    }
}

fn manifest_path(p: &Pipeline) -> PathBuf {
    p.stage_dir(Stage::Pair).join("manifest.csv")
}

fn features_path(p: &Pipeline) -> PathBuf {
    p.stage_dir(Stage::Features).join("features.csv")
}

fn predictions_path(p: &Pipeline) -> PathBuf {
    p.stage_dir(Stage::Train).join("predictions.csv")
}

fn checkpoint_dir(p: &Pipeline) -> PathBuf {
    p.checkpoints
        .clone()
        .unwrap_or_else(|| p.stage_dir(Stage::Train).join("checkpoints"))
}

pub(crate) fn input_hash(p: &Pipeline, s: Stage) -> Result<String> {
    let cfg = &p.cfg;
    let mut h = InputHasher::new(s);
    match s {
        Stage::Synth => {
            let spec = cfg.synth.clone().unwrap_or_default();
            h.value("spec", &spec)?;
        }
        Stage::Ingest => {
            if cfg.synth.is_some() {
                h.value("synth", p.upstream_hash(Stage::Synth)?)?;
            }
            h.value("footprints", &cfg.footprints)?;
            h.value("captures", &cfg.captures)?;
            h.file("footprints-file", required(&cfg.footprints.path, "footprints.path")?)?;
            h.file("captures-file", required(&cfg.captures.path, "captures.path")?)?;
            if let Some(l) = &cfg.labels.path {
                h.file("labels-file", l)?;
            }
            // panoramas are inputs of pairing; hash them once here
            for c in &captures(p)?.samples {
                h.file("panorama", &c.image_ref)?;
            }
        }
        Stage::Pair => {
            h.value("ingest", p.upstream_hash(Stage::Ingest)?)?;
            h.value("pairing", &cfg.pairing)?;
            h.file("uav-file", required(&cfg.uav_raster.path, "uav_raster.path")?)?;
        }
        Stage::Features => {
            h.value("pair", p.upstream_hash(Stage::Pair)?)?;
            h.value("features", &cfg.features)?;
            match &cfg.tir_raster.path {
                Some(t) => h.file("tir-file", t)?,
                None => h.value("tir-file", "none")?,
            }
        }
        Stage::Train => {
            h.value("pair", p.upstream_hash(Stage::Pair)?)?;
            h.value("model", &cfg.model_config()?)?;
            h.value("train", &cfg.train_config())?;
            h.value("cv", &cfg.cv_config())?;
            h.value("modalities", &cfg.train.modalities)?;
        }
        Stage::Eval => {
            h.value("train", p.upstream_hash(Stage::Train)?)?;
            h.value("batch", &cfg.train.batch_size)?;
            if let Some(dir) = &p.checkpoints {
                h.value("checkpoints", dir)?;
                for m in Modality::ALL {
                    for f in 0..cfg.train.folds {
                        h.file("checkpoint", &crossview_heat_model::cv::checkpoint_path(dir, m, f))?;
                    }
                }
            }
        }
        Stage::Associate => {
            h.value("features", p.upstream_hash(Stage::Features)?)?;
            h.value("train", p.upstream_hash(Stage::Train)?)?;
            h.value("associate", &cfg.associate)?;
        }
    }
    Ok(h.finish())
}

pub(crate) fn run(p: &Pipeline, s: Stage) -> Result<StageOutput> {
    match s {
        Stage::Synth => synth(p),
        Stage::Ingest => ingest(p),
        Stage::Pair => pair(p),
        Stage::Features => features(p),
        Stage::Train => train(p),
        Stage::Eval => eval(p),
        Stage::Associate => associate(p),
    }
}

fn synth(p: &Pipeline) -> Result<StageOutput> {
    let spec: SceneSpec = p.cfg.synth.clone().unwrap_or_default();
    let scene = generate_synthetic_scene(&spec, &p.stage_dir(Stage::Synth))?;
    let labeled = scene.buildings.iter().filter(|b| b.labeled).count();
    Ok(output(
        &[
            ("buildings", scene.buildings.len()),
            ("captures", scene.capture_points.len()),
            ("labeled", labeled),
        ],
        vec![scene.footprints, scene.captures, scene.uav, scene.tir, scene.labels, scene.truth],
    ))
}

#[derive(Serialize)]
struct IngestSummary {
    working_crs: String,
    footprints: usize,
    residential: usize,
    dropped_footprints: usize,
    captures: usize,
    dropped_missing_heading: usize,
    dropped_missing_image: usize,
    labels: usize,
}

fn ingest(p: &Pipeline) -> Result<StageOutput> {
    let fp = footprints(p)?;
    let caps = captures(p)?;
    let labels = labels(p)?;
    let summary = IngestSummary {
        working_crs: fp.working_crs.name(),
        footprints: fp.footprints.len(),
        residential: fp.residential().count(),
        dropped_footprints: fp.dropped,
        captures: caps.samples.len(),
        dropped_missing_heading: caps.dropped_missing_heading,
        dropped_missing_image: caps.dropped_missing_image,
        labels: labels.len(),
    };
    let dir = p.stage_dir(Stage::Ingest);
    let json = dir.join("summary.json");
    write_json(&json, &summary)?;
    let table = dir.join("label_summary.txt");
    let text = LabelSummary::from_labels(labels.values()).to_string();
    std::fs::write(&table, text).map_err(|e| CliError::io(&table, e))?;
    Ok(output(
        &[
            ("footprints", summary.footprints),
            ("residential", summary.residential),
            ("captures", summary.captures),
            ("labels", summary.labels),
        ],
        vec![json, table],
    ))
}

fn pair(p: &Pipeline) -> Result<StageOutput> {
    let fp = footprints(p)?;
    let caps = captures(p)?;
    let uav = read_geotiff(required(&p.cfg.uav_raster.path, "uav_raster.path")?)?;
    let ds = build_dataset(&fp.footprints, &caps.samples, &uav, &FilePanoramas, &p.cfg.pairing);
    let dir = p.stage_dir(Stage::Pair);
    let manifest = write_dataset(&dir, &ds)?;
    let c = ds.census;
    Ok(output(
        &[
            ("non_residential", c.non_residential),
            ("too_far", c.too_far),
            ("obstructed", c.obstructed),
            ("usable", c.usable),
            ("emitted", c.emitted),
        ],
        vec![manifest, dir.join("census.json")],
    ))
}

fn features(p: &Pipeline) -> Result<StageOutput> {
    let fp = footprints(p)?;
    let (rows, pairs) = load_pairs(&manifest_path(p))?;
    let tir = match &p.cfg.tir_raster.path {
        Some(t) => Some(read_geotiff(t)?),
        None => None,
    };
    let feats = compute_features(
        &pairs,
        &fp.footprints,
        tir.as_ref(),
        p.cfg.pairing.fill,
        p.cfg.features.neighbour_distance,
    )?;
    let table: Vec<FeatureRow> = rows.iter().zip(&feats).map(|(m, f)| FeatureRow::new(m, f)).collect();
    let path = features_path(p);
    write_csv(&path, &table)?;
    let valid = feats.iter().filter(|f| f.tir_valid).count();
    Ok(output(&[("rows", table.len()), ("tir_valid", valid)], vec![path]))
}

fn load_samples(p: &Pipeline) -> Result<Vec<crossview_heat_model::cv::CvSample>> {
    let fp = footprints(p)?;
    let labels = labels(p)?;
    let (_, pairs) = load_pairs(&manifest_path(p))?;
    cv_samples(pairs, &fp.footprints, &labels)
}

fn train(p: &Pipeline) -> Result<StageOutput> {
    let cfg = &p.cfg;
    let samples = load_samples(p)?;
    let model = cfg.model_config()?;
    let tc = cfg.train_config();
    let cv = cfg.cv_config();
    let dir = p.stage_dir(Stage::Train);
    let ckpt = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt).map_err(|e| CliError::io(&ckpt, e))?;
    let setup = CvSetup {
        model: &model,
        train: &tc,
        cv: &cv,
        seed: cfg.seed,
        dtype: DTYPE,
        device: Device::Cpu,
        checkpoint_dir: Some(&ckpt),
    };
    let result = cross_validate(&samples, &cfg.train.modalities, &setup)?;

    let folds = dir.join("folds.json");
    write_json(&folds, &result.folds)?;
    let full = dir.join("cv_result.json");
    write_json(&full, &result)?;
    let preds = predictions_path(p);
    write_csv(&preds, &prediction_rows(&result)?)?;
    let mut artifacts = vec![folds, full, preds];
    artifacts.extend(result.folds.iter().filter_map(|f| f.checkpoint.clone()));
    if !result.report.tasks.is_empty() {
        let table = dir.join("cv_table.txt");
        std::fs::write(&table, result.report.to_string()).map_err(|e| CliError::io(&table, e))?;
        artifacts.push(table);
    }
    let labeled = samples.iter().filter(|s| s.labels.is_some()).count();
    Ok(output(
        &[
            ("samples", samples.len()),
            ("labeled", labeled),
            ("runs", result.folds.len()),
            ("ensemble", result.ensemble.len()),
        ],
        artifacts,
    ))
}

/// Held-out predictions of the reference modality, then the fold ensemble.
fn prediction_rows(r: &CvResult) -> Result<Vec<PredictionRow>> {
    let mut rows = Vec::new();
    if let Some(run) = r.runs.iter().find(|m| m.modality == r.reference) {
        for (id, classes) in &run.predictions {
            rows.push(PredictionRow::new(id, "held_out", run.fold_of.get(id).copied(), *classes)?);
        }
    }
    for (id, classes) in &r.ensemble {
        rows.push(PredictionRow::new(id, "ensemble", None, *classes)?);
    }
    Ok(rows)
}

fn eval(p: &Pipeline) -> Result<StageOutput> {
    let samples = load_samples(p)?;
    let result: CvResult = read_json(&p.stage_dir(Stage::Train).join("cv_result.json"))?;
    let plan: SpatialFoldPlan = result.plan;
    let (runs, report) = evaluate_checkpoints(
        &checkpoint_dir(p),
        &samples,
        &plan,
        DTYPE,
        &Device::Cpu,
        p.cfg.train.batch_size,
    )?;
    let dir = p.stage_dir(Stage::Eval);
    let json = dir.join("eval_report.json");
    write_json(&json, &report)?;
    let table = dir.join("eval_table.txt");
    std::fs::write(&table, report.to_string()).map_err(|e| CliError::io(&table, e))?;
    let scored = runs.first().map_or(0, |r| r.predictions.len());
    Ok(output(&[("scored", scored), ("tasks", report.tasks.len())], vec![json, table]))
}

fn associate(p: &Pipeline) -> Result<StageOutput> {
    associate_files(
        &features_path(p),
        &predictions_path(p),
        &p.stage_dir(Stage::Associate),
        &p.cfg.associate,
    )
}

/// Join the feature table with predicted labels on building id, run the
/// test suite and write the report bundle into `out`.
pub fn associate_files(
    features: &Path,
    predictions: &Path,
    out: &Path,
    cfg: &AssociationConfig,
) -> Result<StageOutput> {
    let rows: Vec<FeatureRow> = read_csv(features)?;
    let preds: Vec<PredictionRow> = read_csv(predictions)?;
    let mut labels = BTreeMap::new();
    for r in &preds {
        labels.insert(r.building_id.clone(), r.labels()?);
    }
    let mut records: Vec<AssociationRecord> = rows
        .iter()
        .filter_map(|f| Some(AssociationRecord::new(labels.get(&f.building_id)?.clone(), &f.features())))
        .collect();
    records.sort_by(|a, b| a.building_id().cmp(b.building_id()));
    if records.is_empty() {
        return Err(CliError::Missing("no building has both features and predictions".into()));
    }
    let report = run_association_suite(&records, cfg)?;
    write_report(out, &report)?;
    let mut artifacts = vec![out.join("association_results.json")];
    for t in &report.tests {
        artifacts.push(out.join(format!("fig_{}.csv", t.variable)));
        artifacts.push(out.join(format!("fig_{}.png", t.variable)));
    }
    artifacts.retain(|a| a.exists());
    let significant = report.tests.iter().filter(|t| t.significant).count();
    Ok(output(
        &[
            ("records", records.len()),
            ("valid", report.n_valid),
            ("tests", report.tests.len()),
            ("significant", significant),
            ("skipped", report.skipped.len()),
        ],
        artifacts,
    ))
}

