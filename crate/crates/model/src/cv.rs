//! Spatial k-fold cross-validation over the three modality settings.
//!
//! Every fold's training buildings are split again by spatial block into a
//! train and a validation part (70:15 of the full data). Held-out fold
//! predictions are collected per modality; unlabeled buildings get the mean
//! class probabilities of all fold models of the reference modality.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use crossview_heat::augment::{augment_pair, AugmentParams, AugmentationPlan};
use crossview_heat::domain::Task;
use crossview_heat::eval::{
    ablation_report, make_spatial_folds, partition_blocks, EvalReport, LabeledItem, Modality, ModalityPredictions,
    SpatialFoldPlan,
};
use crossview_heat::geometry::Point;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::GcvitConfig;
use crate::error::{Error, Result};
use crate::model::CrossViewModel;
use crate::train::{argmax, predict, predict_proba, train, TensorDataset, TrainConfig, TrainOutcome};

/// One building's chip pair. Unlabeled buildings are predicted but never
/// trained or scored on.
#[derive(Clone, Debug)]
pub struct CvSample {
    pub id: String,
    pub centroid: Point,
    pub top: RgbImage,
    pub facade: RgbImage,
    pub labels: Option<[usize; 5]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub target_ratio: f64,
    pub max_multiplier: usize,
    /// Tasks whose minority classes drive replication; empty means all.
    pub tasks: Vec<Task>,
    pub params: AugmentParams,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            target_ratio: 1.0,
            max_multiplier: 4,
            tasks: Vec::new(),
            params: AugmentParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub block_size_m: f64,
    pub merge_distance_m: f64,
    /// Train / val / test proportions; the first two size the carve-out.
    pub split: [f64; 3],
    pub augment: AugmentConfig,
    /// Fill colour of masked chip pixels, reused for rotation borders.
    pub fill: [u8; 3],
    /// Fold jobs trained concurrently.
    pub jobs: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            block_size_m: 100.0,
            merge_distance_m: 1.0,
            split: [0.70, 0.15, 0.15],
            augment: AugmentConfig::default(),
            fill: [128, 128, 128],
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldLog {
    pub modality: Modality,
    pub fold: usize,
    pub n_train: usize,
    pub n_train_augmented: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub outcome: TrainOutcome,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub plan: SpatialFoldPlan,
    pub runs: Vec<ModalityPredictions>,
    pub report: EvalReport,
    pub folds: Vec<FoldLog>,
    /// Modality whose predictions label the buildings downstream.
    pub reference: Modality,
    /// Fold-ensemble predictions of the reference modality for unlabeled buildings.
    pub ensemble: BTreeMap<String, [usize; 5]>,
}

impl CvResult {
    /// Held-out predictions for labeled buildings plus the ensemble for the rest.
    pub fn predicted_labels(&self) -> BTreeMap<String, [usize; 5]> {
        let mut out = self.ensemble.clone();
        if let Some(r) = self.runs.iter().find(|r| r.modality == self.reference) {
            out.extend(r.predictions.iter().map(|(k, v)| (k.clone(), *v)));
        }
        out
    }
}

/// Everything the fold jobs share.
pub struct CvSetup<'a> {
    pub model: &'a GcvitConfig,
    pub train: &'a TrainConfig,
    pub cv: &'a CvConfig,
    pub seed: u64,
    pub dtype: DType,
    pub device: Device,
    /// Write each fold model as `<dir>/<modality>_fold<k>.safetensors`.
    pub checkpoint_dir: Option<&'a Path>,
}

struct JobOutput {
    modality: Modality,
    fold: usize,
    test_pred: Vec<(String, [usize; 5])>,
    unlabeled_proba: Vec<Vec<Vec<f32>>>,
    log: FoldLog,
}

fn labeled_items(samples: &[CvSample]) -> Vec<LabeledItem> {
    samples
        .iter()
        .filter_map(|s| {
            Some(LabeledItem {
                building_id: s.id.clone(),
                centroid: s.centroid,
                classes: s.labels?,
            })
        })
        .collect()
}

pub fn checkpoint_path(dir: &Path, modality: Modality, fold: usize) -> PathBuf {
    dir.join(format!("{}_fold{fold}.safetensors", modality.key()))
}

fn augmented_train_set(
    train_samples: &[&CvSample],
    setup: &CvSetup<'_>,
    fold: usize,
) -> Result<(Vec<(String, RgbImage, RgbImage, [usize; 5])>, usize)> {
    let aug = &setup.cv.augment;
    let labels: Vec<[usize; 5]> = train_samples.iter().filter_map(|s| s.labels).collect();
    let tasks = if aug.tasks.is_empty() { Task::ALL.to_vec() } else { aug.tasks.clone() };
    let plan = AugmentationPlan::from_labels(&labels, &tasks, aug.target_ratio, aug.max_multiplier);
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ (0xA5A5_0000 + fold as u64));
    let mut out = Vec::new();
    for s in train_samples {
        let Some(l) = s.labels else { continue };
        let m = if aug.enabled { plan.multiplier(&l) } else { 1 };
        for (k, (t, f)) in augment_pair(&s.top, &s.facade, m, &aug.params, setup.cv.fill, &mut rng)?
            .into_iter()
            .enumerate()
        {
            out.push((format!("{}~{k}", s.id), t, f, l));
        }
    }
    let n = out.len();
    Ok((out, n))
}

fn as_dataset(
    items: &[(String, RgbImage, RgbImage, [usize; 5])],
    setup: &CvSetup<'_>,
) -> Result<TensorDataset> {
    let refs: Vec<(String, &RgbImage, &RgbImage, [usize; 5])> =
        items.iter().map(|(id, t, f, l)| (id.clone(), t, f, *l)).collect();
    TensorDataset::new(&refs, setup.model.chip_size, setup.dtype, &setup.device)
}

fn sample_dataset(samples: &[&CvSample], setup: &CvSetup<'_>) -> Result<TensorDataset> {
    let refs: Vec<(String, &RgbImage, &RgbImage, [usize; 5])> = samples
        .iter()
        .map(|s| (s.id.clone(), &s.top, &s.facade, s.labels.unwrap_or([0; 5])))
        .collect();
    TensorDataset::new(&refs, setup.model.chip_size, setup.dtype, &setup.device)
}

fn run_job(
    samples: &[CvSample],
    by_id: &BTreeMap<&str, &CvSample>,
    plan: &SpatialFoldPlan,
    carve: &BTreeMap<usize, (Vec<String>, Vec<String>)>,
    modality: Modality,
    fold: usize,
    setup: &CvSetup<'_>,
) -> Result<JobOutput> {
    let (train_ids, val_ids) = &carve[&fold];
    let test_ids = plan.members(fold);
    let pick = |ids: &[String]| -> Vec<&CvSample> { ids.iter().filter_map(|id| by_id.get(id.as_str()).copied()).collect() };
    let (train_s, val_s, test_s) = (pick(train_ids), pick(val_ids), pick(&test_ids));
    let (train_items, n_aug) = augmented_train_set(&train_s, setup, fold)?;
    let train_ds = as_dataset(&train_items, setup)?;
    drop(train_items);
    let val_ds = if val_s.is_empty() { None } else { Some(sample_dataset(&val_s, setup)?) };
    let init_seed = setup.seed.wrapping_add(fold as u64);
    let mut model = CrossViewModel::new(setup.model.clone(), init_seed, setup.dtype, setup.device.clone())?;
    let tcfg = TrainConfig {
        seed: setup.seed.wrapping_mul(31).wrapping_add(fold as u64),
        ..setup.train.clone()
    };
    log::info!(
        "{modality} fold {fold}: {} train ({n_aug} after augmentation), {} val, {} test",
        train_s.len(),
        val_s.len(),
        test_s.len()
    );
    let outcome = train(&mut model, &train_ds, val_ds.as_ref(), modality, &tcfg)?;
    let batch = setup.train.batch_size;
    let test_pred = if test_s.is_empty() {
        Vec::new()
    } else {
        let ds = sample_dataset(&test_s, setup)?;
        ds.ids.iter().cloned().zip(predict(&model, &ds, modality, batch)?).collect()
    };
    let unlabeled: Vec<&CvSample> = samples.iter().filter(|s| s.labels.is_none()).collect();
    let unlabeled_proba = if unlabeled.is_empty() {
        Vec::new()
    } else {
        predict_proba(&model, &sample_dataset(&unlabeled, setup)?, modality, batch)?
    };
    let checkpoint = match setup.checkpoint_dir {
        Some(dir) => {
            let path = checkpoint_path(dir, modality, fold);
            let meta = CheckpointMeta {
                model: setup.model.clone(),
                train: Some(tcfg),
                modality,
                fold: Some(fold),
                init_seed,
                epoch: outcome.best_epoch,
                step: outcome.steps,
                rng_word_pos: outcome.rng_word_pos,
            };
            checkpoint::save(&model, &meta, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(JobOutput {
        modality,
        fold,
        test_pred,
        unlabeled_proba,
        log: FoldLog {
            modality,
            fold,
            n_train: train_s.len(),
            n_train_augmented: n_aug,
            n_val: val_s.len(),
            n_test: test_s.len(),
            outcome,
            checkpoint,
        },
    })
}

/// Run all `modalities` over the same spatial folds. With fewer than three
/// modalities no ablation report can be built and `report` is empty.
pub fn cross_validate(samples: &[CvSample], modalities: &[Modality], setup: &CvSetup<'_>) -> Result<CvResult> {
    if modalities.is_empty() {
        return Err(Error::InvalidArgument("no modality to train".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    if samples.iter().any(|s| !seen.insert(s.id.as_str())) {
        return Err(Error::InvalidArgument("duplicate building id".into()));
    }
    let cv = setup.cv;
    let items = labeled_items(samples);
    let plan = make_spatial_folds(&items, cv.folds, cv.block_size_m, cv.merge_distance_m)?;
    let by_id: BTreeMap<&str, &CvSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();

    // Carve-out per fold, shared by every modality.
    let (a, b) = (cv.split[0], cv.split[1]);
    if !(a > 0.0 && b >= 0.0) {
        return Err(Error::Config(format!("invalid split {:?}", cv.split)));
    }
    let mut carve = BTreeMap::new();
    for f in 0..cv.folds {
        let rest: Vec<LabeledItem> = items
            .iter()
            .filter(|i| plan.fold_of(&i.building_id) != Some(f))
            .cloned()
            .collect();
        let parts = partition_blocks(
            &rest,
            &[a / (a + b), b / (a + b)],
            cv.block_size_m,
            cv.merge_distance_m,
            setup.seed.wrapping_add(f as u64),
        );
        let (tr, va) = match parts {
            Ok(mut p) if p.len() == 2 && !p[0].is_empty() => {
                let va = p.pop().unwrap_or_default();
                (p.pop().unwrap_or_default(), va)
            }
            Ok(_) | Err(_) => {
                log::warn!("fold {f}: too few blocks for a validation carve-out, training without one");
                (rest.iter().map(|i| i.building_id.clone()).collect(), Vec::new())
            }
        };
        carve.insert(f, (tr, va));
    }

    let jobs: Vec<(Modality, usize)> = modalities
        .iter()
        .flat_map(|&m| (0..cv.folds).map(move |f| (m, f)))
        .collect();
    let run = |&(m, f): &(Modality, usize)| run_job(samples, &by_id, &plan, &carve, m, f, setup);
    let outputs: Vec<JobOutput> = if cv.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cv.jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        jobs.iter().map(run).collect::<Result<Vec<_>>>()?
    };

    let fold_of: BTreeMap<String, usize> = items
        .iter()
        .filter_map(|i| Some((i.building_id.clone(), plan.fold_of(&i.building_id)?)))
        .collect();
    let reference = if modalities.contains(&Modality::Multi) { Modality::Multi } else { modalities[0] };
    let unlabeled_ids: Vec<&str> = samples.iter().filter(|s| s.labels.is_none()).map(|s| s.id.as_str()).collect();
    let mut runs = Vec::new();
    let mut folds = Vec::new();
    let mut proba_sum: Vec<Vec<Vec<f64>>> = Vec::new();
    for &m in modalities {
        let mut predictions = BTreeMap::new();
        for out in outputs.iter().filter(|o| o.modality == m) {
            predictions.extend(out.test_pred.iter().cloned());
            if m == reference && !out.unlabeled_proba.is_empty() {
                if proba_sum.is_empty() {
                    proba_sum = out
                        .unlabeled_proba
                        .iter()
                        .map(|t| t.iter().map(|c| vec![0.0; c.len()]).collect())
                        .collect();
                }
                for (acc, p) in proba_sum.iter_mut().zip(&out.unlabeled_proba) {
                    for (a, q) in acc.iter_mut().zip(p) {
                        for (x, y) in a.iter_mut().zip(q) {
                            *x += *y as f64;
                        }
                    }
                }
            }
        }
        runs.push(ModalityPredictions {
            modality: m,
            fold_of: fold_of.clone(),
            predictions,
        });
    }
    let mut outputs = outputs;
    outputs.sort_by_key(|o| (Modality::ALL.iter().position(|&x| x == o.modality), o.fold));
    folds.extend(outputs.into_iter().map(|o| o.log));
    let ensemble = unlabeled_ids
        .iter()
        .zip(&proba_sum)
        .map(|(id, tasks)| {
            let p: [usize; 5] = std::array::from_fn(|t| {
                let row: Vec<f32> = tasks[t].iter().map(|&v| v as f32).collect();
                argmax(&row)
            });
            (id.to_string(), p)
        })
        .collect();
    let truth: BTreeMap<String, [usize; 5]> = items.iter().map(|i| (i.building_id.clone(), i.classes)).collect();
    let report = if Modality::ALL.iter().all(|m| modalities.contains(m)) {
        ablation_report(&runs, &truth)?
    } else {
        EvalReport { tasks: Vec::new() }
    };
    Ok(CvResult {
        plan,
        runs,
        report,
        folds,
        reference,
        ensemble,
    })
}

/// Rebuild held-out predictions from saved fold checkpoints and score them.
pub fn evaluate_checkpoints(
    dir: &Path,
    samples: &[CvSample],
    plan: &SpatialFoldPlan,
    dtype: DType,
    device: &Device,
    batch_size: usize,
) -> Result<(Vec<ModalityPredictions>, EvalReport)> {
    let items = labeled_items(samples);
    let fold_of: BTreeMap<String, usize> = items
        .iter()
        .filter_map(|i| Some((i.building_id.clone(), plan.fold_of(&i.building_id)?)))
        .collect();
    let mut runs = Vec::new();
    for m in Modality::ALL {
        let mut predictions = BTreeMap::new();
        for f in 0..plan.k {
            let path = checkpoint_path(dir, m, f);
            let (model, meta) = checkpoint::load(&path, dtype, device)?;
            if meta.fold != Some(f) || meta.modality != m {
                return Err(Error::Checkpoint {
                    path,
                    msg: format!("expected {m} fold {f}, found {} fold {:?}", meta.modality, meta.fold),
                });
            }
            let test: Vec<&CvSample> = samples
                .iter()
                .filter(|s| s.labels.is_some() && fold_of.get(&s.id) == Some(&f))
                .collect();
            if test.is_empty() {
                continue;
            }
            let refs: Vec<(String, &RgbImage, &RgbImage, [usize; 5])> = test
                .iter()
                .map(|s| (s.id.clone(), &s.top, &s.facade, s.labels.unwrap_or([0; 5])))
                .collect();
            let ds = TensorDataset::new(&refs, meta.model.chip_size, dtype, device)?;
            predictions.extend(ds.ids.iter().cloned().zip(predict(&model, &ds, m, batch_size)?));
        }
        runs.push(ModalityPredictions {
            modality: m,
            fold_of: fold_of.clone(),
            predictions,
        });
    }
    let truth: BTreeMap<String, [usize; 5]> = items.iter().map(|i| (i.building_id.clone(), i.classes)).collect();
    let report = ablation_report(&runs, &truth)?;
    Ok((runs, report))
}
