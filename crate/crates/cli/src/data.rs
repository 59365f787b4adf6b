//! Stage artifacts on disk: the feature table, the prediction table and the
//! chip pairs the model consumes.

use std::collections::BTreeMap;
use std::path::Path;

use crossview_heat::domain::{AttributeLabelSet, BuildingFootprint, Task};
use crossview_heat::features::FeatureRecord;
use crossview_heat::pairing::{load_pair, read_manifest, CrossViewPair, ManifestRow, VisibilityStatus};
use crossview_heat_model::cv::CvSample;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// A manifest row of an emitted pair with its feature columns appended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub building_id: String,
    pub capture_id: Option<String>,
    pub match_distance_m: Option<f64>,
    pub status: VisibilityStatus,
    pub mask_fraction_top: Option<f64>,
    pub mask_fraction_facade: Option<f64>,
    pub top_chip: Option<String>,
    pub facade_chip: Option<String>,
    pub roof_brightness: Option<f64>,
    pub wall_brightness: Option<f64>,
    pub mean_dist_4nn_m: Option<f64>,
    pub tir_value: Option<f64>,
    pub tir_valid: bool,
}

impl FeatureRow {
    pub fn new(m: &ManifestRow, f: &FeatureRecord) -> Self {
        Self {
            building_id: m.building_id.clone(),
            capture_id: m.capture_id.clone(),
            match_distance_m: m.match_distance_m,
            status: m.status,
            mask_fraction_top: m.mask_fraction_top,
            mask_fraction_facade: m.mask_fraction_facade,
            top_chip: m.top_chip.clone(),
            facade_chip: m.facade_chip.clone(),
            roof_brightness: f.roof_brightness,
            wall_brightness: f.wall_brightness,
            mean_dist_4nn_m: f.mean_dist_4nn_m,
            tir_value: f.tir_value,
            tir_valid: f.tir_valid,
        }
    }

    pub fn features(&self) -> FeatureRecord {
        FeatureRecord {
            building_id: self.building_id.clone(),
            roof_brightness: self.roof_brightness,
            wall_brightness: self.wall_brightness,
            mean_dist_4nn_m: self.mean_dist_4nn_m,
            tir_value: self.tir_value,
            tir_valid: self.tir_valid,
        }
    }
}

/// One predicted label set. `fold` is the held-out fold for out-of-fold
/// predictions and empty for the fold ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub building_id: String,
    pub source: String,
    pub fold: Option<usize>,
    pub openness: String,
    pub floors: String,
    pub vegetation: String,
    pub wall: String,
    pub roof: String,
}

impl PredictionRow {
    pub fn new(id: &str, source: &str, fold: Option<usize>, classes: [usize; 5]) -> Result<Self> {
        let l = AttributeLabelSet::from_indices(id, classes)
            .ok_or_else(|| CliError::Missing(format!("class index out of range for {id}")))?;
        Ok(Self {
            building_id: id.to_string(),
            source: source.to_string(),
            fold,
            openness: l.openness.to_string(),
            floors: l.floors.to_string(),
            vegetation: l.vegetation.to_string(),
            wall: l.wall.to_string(),
            roof: l.roof.to_string(),
        })
    }

    pub fn labels(&self) -> Result<AttributeLabelSet> {
        let tokens = [&self.openness, &self.floors, &self.vegetation, &self.wall, &self.roof];
        let mut idx = [0usize; 5];
        for (t, task) in Task::ALL.iter().enumerate() {
            idx[t] = task
                .parse_class(tokens[t])
                .ok_or_else(|| CliError::Missing(format!("{}: unknown {task} class `{}`", self.building_id, tokens[t])))?;
        }
        AttributeLabelSet::from_indices(self.building_id.clone(), idx)
            .ok_or_else(|| CliError::Missing(format!("bad labels for {}", self.building_id)))
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

/// Emitted pairs of a pairing manifest, loaded from their chip files.
pub fn load_pairs(manifest: &Path) -> Result<(Vec<ManifestRow>, Vec<CrossViewPair>)> {
    let rows = read_manifest(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut emitted = Vec::new();
    let mut pairs = Vec::new();
    for r in rows {
        if let Some(p) = load_pair(dir, &r)? {
            pairs.push(p);
            emitted.push(r);
        }
    }
    Ok((emitted, pairs))
}

/// Model inputs: every emitted pair, labeled when an annotation exists.
pub fn cv_samples(
    pairs: Vec<CrossViewPair>,
    footprints: &[BuildingFootprint],
    labels: &BTreeMap<String, AttributeLabelSet>,
) -> Result<Vec<CvSample>> {
    let centroids: BTreeMap<&str, _> = footprints.iter().map(|f| (f.id.as_str(), f.centroid)).collect();
    pairs
        .into_iter()
        .map(|p| {
            let centroid = *centroids
                .get(p.building_id.as_str())
                .ok_or_else(|| CliError::Missing(format!("no footprint for pair {}", p.building_id)))?;
            Ok(CvSample {
                labels: labels.get(&p.building_id).map(|l| l.indices()),
                id: p.building_id,
                centroid,
                top: p.top_chip,
                facade: p.facade_chip,
            })
        })
        .collect()
}
