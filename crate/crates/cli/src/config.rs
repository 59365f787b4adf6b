//! The run configuration: one TOML file with a table per pipeline module.

use std::path::{Path, PathBuf};

use crossview_heat::association::AssociationConfig;
use crossview_heat::domain::Task;
use crossview_heat::eval::Modality;
use crossview_heat::features::NeighbourDistance;
use crossview_heat::ingest::{FootprintOptions, MissingImagePolicy};
use crossview_heat::pairing::PairingConfig;
use crossview_heat::synth::SceneSpec;
use crossview_heat_model::config::{GcvitConfig, Profile};
use crossview_heat_model::cv::{AugmentConfig, CvConfig};
use crossview_heat_model::loss::{AlphaMode, LossKind};
use crossview_heat_model::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FootprintsSection {
    pub path: Option<PathBuf>,
    pub residential_field: String,
    pub crs: Option<String>,
    pub working_crs: Option<String>,
}

impl Default for FootprintsSection {
    fn default() -> Self {
        let d = FootprintOptions::default();
        Self {
            path: None,
            residential_field: d.residential_field,
            crs: None,
            working_crs: None,
        }
    }
}

impl FootprintsSection {
    pub fn options(&self) -> FootprintOptions {
        FootprintOptions {
            residential_field: self.residential_field.clone(),
            crs: self.crs.clone(),
            working_crs: self.working_crs.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapturesSection {
    pub path: Option<PathBuf>,
    pub missing_image: MissingImagePolicy,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesSection {
    pub neighbour_distance: NeighbourDistance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossKind,
    pub gamma: f64,
    pub alpha_mode: AlphaMode,
    /// Majority-class share above which `auto` switches a task to focal loss.
    pub focal_majority_share: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            kind: t.loss,
            gamma: t.focal_gamma,
            alpha_mode: t.alpha,
            focal_majority_share: t.focal_majority_share,
        }
    }
}

/// Architecture profile plus optional per-field overrides. The chip size
/// always comes from `pairing.chip_size`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub profile: Profile,
    pub patch_size: Option<usize>,
    pub stage_dims: Option<[usize; 4]>,
    pub stage_depths: Option<[usize; 4]>,
    pub window_sizes: Option<[usize; 4]>,
    pub num_heads: Option<[usize; 4]>,
    pub mlp_ratio: Option<usize>,
    pub loss: LossSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_lr_fraction: f64,
    pub warmup_epochs: usize,
    pub flip_augment: bool,
    /// Tasks in the loss; empty means all five.
    pub tasks: Vec<Task>,
    pub modalities: Vec<Modality>,
    pub folds: usize,
    pub block_size_m: f64,
    pub merge_distance_m: f64,
    pub split: [f64; 3],
    pub augment: AugmentConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let cv = CvConfig::default();
        Self {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            min_lr_fraction: t.min_lr_fraction,
            warmup_epochs: t.warmup_epochs,
            flip_augment: t.flip_augment,
            tasks: Vec::new(),
            modalities: Modality::ALL.to_vec(),
            folds: cv.folds,
            block_size_m: cv.block_size_m,
            merge_distance_m: cv.merge_distance_m,
            split: cv.split,
            augment: cv.augment,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub deterministic: bool,
    pub jobs: usize,
    /// Generate a synthetic scene and use it for every input path left unset.
    pub synth: Option<SceneSpec>,
    pub footprints: FootprintsSection,
    pub captures: CapturesSection,
    pub labels: PathSection,
    pub uav_raster: PathSection,
    pub tir_raster: PathSection,
    pub pairing: PairingConfig,
    pub features: FeaturesSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub associate: AssociationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            deterministic: false,
            jobs: 1,
            synth: None,
            footprints: FootprintsSection::default(),
            captures: CapturesSection::default(),
            labels: PathSection::default(),
            uav_raster: PathSection::default(),
            tir_raster: PathSection::default(),
            pairing: PairingConfig::default(),
            features: FeaturesSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            associate: AssociationConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Parse `path`; relative paths inside are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
        resolve(base, &mut self.footprints.path);
        resolve(base, &mut self.captures.path);
        resolve(base, &mut self.labels.path);
        resolve(base, &mut self.uav_raster.path);
        resolve(base, &mut self.tir_raster.path);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn model_config(&self) -> Result<GcvitConfig> {
        let m = &self.model;
        let mut c = GcvitConfig::for_profile(m.profile, self.pairing.chip_size as usize);
        if let Some(v) = m.patch_size {
            c.patch_size = v;
        }
        if let Some(v) = m.stage_dims {
            c.stage_dims = v;
        }
        if let Some(v) = m.stage_depths {
            c.stage_depths = v;
        }
        if let Some(v) = m.window_sizes {
            c.window_sizes = v;
        }
        if let Some(v) = m.num_heads {
            c.num_heads = v;
        }
        if let Some(v) = m.mlp_ratio {
            c.mlp_ratio = v;
        }
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            min_lr_fraction: t.min_lr_fraction,
            warmup_epochs: t.warmup_epochs,
            flip_augment: t.flip_augment,
            loss: self.model.loss.kind,
            focal_gamma: self.model.loss.gamma,
            alpha: self.model.loss.alpha_mode,
            focal_majority_share: self.model.loss.focal_majority_share,
            tasks: t.tasks.clone(),
            seed: self.seed,
        }
    }

    pub fn cv_config(&self) -> CvConfig {
        let t = &self.train;
        CvConfig {
            folds: t.folds,
            block_size_m: t.block_size_m,
            merge_distance_m: t.merge_distance_m,
            split: t.split,
            augment: t.augment.clone(),
            fill: self.pairing.fill,
            jobs: self.jobs.max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.train.modalities.is_empty() {
            return Err(CliError::Config("train.modalities is empty".into()));
        }
        if self.train.folds < 2 {
            return Err(CliError::Config("train.folds must be at least 2".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rat = 0.1").is_err());
        assert!(RunConfig::from_toml("[model.loss]\ngamma = 1.0\nextra = 1").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::from_toml(
            r#"
seed = 9
[synth]
n_buildings = 30
[tir_raster]
path = "tir.tif"
[model]
profile = "toy"
[model.loss]
kind = "ce"
[train]
modalities = ["multi", "uav_only"]
tasks = ["vegetation"]
"#,
        )
        .unwrap();
        cfg.resolve_paths(Path::new("/data"));
        assert_eq!(cfg.tir_raster.path.as_deref(), Some(Path::new("/data/tir.tif")));
        let echo = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&echo).unwrap(), cfg);
        assert_eq!(cfg.train_config().loss, LossKind::Ce);
        assert_eq!(cfg.train_config().seed, 9);
    }

    #[test]
    fn model_follows_chip_size() {
        let mut cfg = RunConfig::default();
        cfg.pairing.chip_size = 64;
        assert_eq!(cfg.model_config().unwrap().window_sizes, [4, 4, 4, 2]);
        cfg.pairing.chip_size = 60;
        assert!(cfg.validate().is_err());
    }
}
