//! Mini-batch AdamW training with cosine decay, early stopping on mean
//! validation weighted F1, and batched prediction.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use crossview_heat::domain::Task;
use crossview_heat::eval::{weighted_f1, Modality};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{class_alpha, focal_loss, one_hot, softmax_cross_entropy, AlphaMode, LossKind};
use crate::model::{images_to_tensor, CrossViewModel};

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Minimum learning rate at the end of the cosine schedule, as a
    /// fraction of `learning_rate`.
    pub min_lr_fraction: f64,
    /// Epochs of linear warmup before the cosine decay starts.
    pub warmup_epochs: usize,
    /// Random symmetries of training chips: the eight flips and quarter
    /// turns of the square for the aerial view, left-right for the façade.
    pub flip_augment: bool,
    pub loss: LossKind,
    pub focal_gamma: f64,
    pub alpha: AlphaMode,
    /// Majority-class share above which `LossKind::Auto` picks focal loss.
    pub focal_majority_share: f64,
    /// Tasks that contribute to the loss and to model selection; empty means all.
    pub tasks: Vec<Task>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 0.05,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            min_lr_fraction: 0.0,
            warmup_epochs: 0,
            flip_augment: true,
            loss: LossKind::Auto,
            focal_gamma: 2.0,
            alpha: AlphaMode::InverseFrequency,
            focal_majority_share: 0.8,
            tasks: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn active_tasks(&self) -> Vec<Task> {
        if self.tasks.is_empty() {
            Task::ALL.to_vec()
        } else {
            Task::ALL.into_iter().filter(|t| self.tasks.contains(t)).collect()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if !(self.focal_gamma >= 0.0) {
            return bad(format!("focal_gamma must be >= 0, got {}", self.focal_gamma));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return bad(format!("min_lr_fraction must be in [0, 1], got {}", self.min_lr_fraction));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total`: linear ramp over the first
    /// `warmup` steps, cosine decay over the rest.
    pub fn lr_at(&self, step: usize, total: usize, warmup: usize) -> f64 {
        let min = self.learning_rate * self.min_lr_fraction;
        if step < warmup {
            return self.learning_rate * (step + 1) as f64 / (warmup + 1) as f64;
        }
        let (step, total) = (step - warmup, total.saturating_sub(warmup));
        if total <= 1 {
            return self.learning_rate;
        }
        let t = step as f64 / (total - 1) as f64;
        min + 0.5 * (self.learning_rate - min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Chips and labels stacked as tensors. Labels follow [`Task::ALL`] order.
pub struct TensorDataset {
    pub ids: Vec<String>,
    pub top: Tensor,
    pub facade: Tensor,
    pub labels: Vec<[usize; 5]>,
}

impl TensorDataset {
    pub fn new(
        items: &[(String, &RgbImage, &RgbImage, [usize; 5])],
        chip_size: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let tops: Vec<&RgbImage> = items.iter().map(|i| i.1).collect();
        let facades: Vec<&RgbImage> = items.iter().map(|i| i.2).collect();
        Ok(Self {
            ids: items.iter().map(|i| i.0.clone()).collect(),
            top: images_to_tensor(&tops, chip_size, dtype, device)?,
            facade: images_to_tensor(&facades, chip_size, dtype, device)?,
            labels: items.iter().map(|i| i.3).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let dev = self.top.device();
        let ix = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), dev)?;
        Ok((self.top.index_select(&ix, 0)?, self.facade.index_select(&ix, 0)?))
    }
}

/// Per sample, `alt` with probability 1/2, otherwise `x`.
fn coin_blend(x: &Tensor, alt: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let b = x.dim(0)?;
    let keep: Vec<f32> = (0..b).map(|_| if rng.random_bool(0.5) { 0.0 } else { 1.0 }).collect();
    let keep = Tensor::from_vec(keep, (b, 1, 1, 1), x.device())?.to_dtype(x.dtype())?;
    Ok((x.broadcast_mul(&keep)? + alt.broadcast_mul(&(1.0 - &keep)?)?)?)
}

/// Mirror samples of an NHWC batch along `dim` at random.
fn random_flip(x: &Tensor, dim: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = x.dim(dim)?;
    let rev = Tensor::from_vec((0..n as u32).rev().collect::<Vec<_>>(), n, x.device())?;
    coin_blend(x, &x.index_select(&rev, dim)?, rng)
}

/// Swap the spatial axes of square NHWC samples at random; together with
/// both flips this reaches all eight symmetries of the square.
fn random_transpose(x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    coin_blend(x, &x.transpose(1, 2)?.contiguous()?, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub learning_rate: f64,
    pub val_loss: Option<f64>,
    pub val_f1: BTreeMap<Task, f64>,
    pub val_f1_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub curves: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub best_val_f1: Option<f64>,
    pub steps: usize,
    pub stopped_early: bool,
    /// Word position of the shuffling RNG when training ended.
    pub rng_word_pos: u64,
    pub loss_per_task: BTreeMap<Task, LossKind>,
}

struct TaskLoss {
    task: Task,
    slot: usize,
    kind: LossKind,
    alpha: Option<Tensor>,
}

fn plan_losses(cfg: &TrainConfig, labels: &[[usize; 5]], dtype: DType, dev: &Device) -> Result<Vec<TaskLoss>> {
    let mut out = Vec::new();
    for task in cfg.active_tasks() {
        let slot = Task::ALL.iter().position(|&t| t == task).unwrap_or(0);
        let c = task.num_classes();
        let y: Vec<usize> = labels.iter().map(|l| l[slot]).collect();
        let mut counts = vec![0usize; c];
        for &v in &y {
            counts[v.min(c - 1)] += 1;
        }
        let share = counts.iter().copied().max().unwrap_or(0) as f64 / y.len().max(1) as f64;
        let kind = match cfg.loss {
            LossKind::Auto if share > cfg.focal_majority_share => LossKind::Focal,
            LossKind::Auto => LossKind::Ce,
            k => k,
        };
        let alpha = match (kind, cfg.alpha) {
            (LossKind::Focal, AlphaMode::InverseFrequency) => {
                Some(Tensor::from_vec(class_alpha(&y, c), c, dev)?.to_dtype(dtype)?)
            }
            _ => None,
        };
        out.push(TaskLoss { task, slot, kind, alpha });
    }
    Ok(out)
}

fn batch_loss(
    model: &CrossViewModel,
    losses: &[TaskLoss],
    logits: &[(Task, Tensor)],
    labels: &[[usize; 5]],
    gamma: f64,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for tl in losses {
        let z = &logits
            .iter()
            .find(|(t, _)| *t == tl.task)
            .ok_or_else(|| Error::Config(format!("no head for task {}", tl.task)))?
            .1;
        let y: Vec<usize> = labels.iter().map(|l| l[tl.slot]).collect();
        let y = one_hot(&y, tl.task.num_classes(), model.dtype(), model.device())?;
        let l = match tl.kind {
            LossKind::Focal => focal_loss(z, &y, gamma, tl.alpha.as_ref())?,
            _ => softmax_cross_entropy(z, &y)?,
        };
        total = Some(match total {
            Some(t) => (t + l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Config("no active tasks".into()))
}

/// Class probabilities per sample and task: `[sample][task][class]`.
pub fn predict_proba(
    model: &CrossViewModel,
    data: &TensorDataset,
    modality: Modality,
    batch_size: usize,
) -> Result<Vec<Vec<Vec<f32>>>> {
    let n = data.len();
    let mut out = vec![Vec::with_capacity(5); n];
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (top, facade) = data.batch(chunk)?;
        for (_, z) in model.forward(&top, &facade, modality)? {
            let p = crate::attention::softmax_last(&z)?.to_dtype(DType::F32)?;
            let rows: Vec<Vec<f32>> = p.to_vec2()?;
            for (j, row) in rows.into_iter().enumerate() {
                out[chunk[j]].push(row);
            }
        }
    }
    Ok(out)
}

pub fn argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per task for each sample.
pub fn predict(model: &CrossViewModel, data: &TensorDataset, modality: Modality, batch_size: usize) -> Result<Vec<[usize; 5]>> {
    Ok(predict_proba(model, data, modality, batch_size)?
        .iter()
        .map(|tasks| std::array::from_fn(|t| argmax(&tasks[t])))
        .collect())
}

fn val_scores(
    model: &CrossViewModel,
    val: &TensorDataset,
    modality: Modality,
    losses: &[TaskLoss],
    cfg: &TrainConfig,
) -> Result<(BTreeMap<Task, f64>, f64)> {
    let idx: Vec<usize> = (0..val.len()).collect();
    let mut pred = Vec::with_capacity(val.len());
    let mut loss_sum = 0.0;
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        let (top, facade) = val.batch(chunk)?;
        let logits = model.forward(&top, &facade, modality)?;
        let labels: Vec<[usize; 5]> = chunk.iter().map(|&i| val.labels[i]).collect();
        let loss = batch_loss(model, losses, &logits, &labels, cfg.focal_gamma)?;
        loss_sum += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
        let classes: Vec<Vec<u32>> = logits
            .iter()
            .map(|(_, z)| Ok(z.argmax(1)?.to_vec1::<u32>()?))
            .collect::<Result<_>>()?;
        for j in 0..chunk.len() {
            let mut row = [0usize; 5];
            for ((task, _), c) in logits.iter().zip(&classes) {
                if let Some(slot) = Task::ALL.iter().position(|t| t == task) {
                    row[slot] = c[j] as usize;
                }
            }
            pred.push(row);
        }
    }
    let mut out = BTreeMap::new();
    for tl in losses {
        let p: Vec<usize> = pred.iter().map(|r| r[tl.slot]).collect();
        let y: Vec<usize> = val.labels.iter().map(|r| r[tl.slot]).collect();
        out.insert(tl.task, weighted_f1(&p, &y, tl.task.num_classes())?);
    }
    Ok((out, loss_sum / val.len().max(1) as f64))
}

/// Train `model` in place. With a validation set the parameters of the best
/// epoch (mean weighted F1 over the active tasks, then lowest validation
/// loss) are restored at the end.
pub fn train(
    model: &mut CrossViewModel,
    train: &TensorDataset,
    val: Option<&TensorDataset>,
    modality: Modality,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let losses = plan_losses(cfg, &train.labels, model.dtype(), model.device())?;
    let params = ParamsAdamW {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut opt = AdamW::new(model.store.vars(), params)?;
    let n = train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.max_epochs;
    let warmup = (per_epoch * cfg.warmup_epochs).min(total.saturating_sub(1));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curves = Vec::new();
    let mut best: Option<(f64, f64, usize, BTreeMap<String, Tensor>)> = None;
    let mut since_best = 0;
    let mut step = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.learning_rate;
        for chunk in order.chunks(cfg.batch_size) {
            lr = cfg.lr_at(step, total, warmup);
            opt.set_learning_rate(lr);
            let (mut top, mut facade) = train.batch(chunk)?;
            if cfg.flip_augment {
                top = random_flip(&random_flip(&top, 1, &mut aug_rng)?, 2, &mut aug_rng)?;
                top = random_transpose(&top, &mut aug_rng)?;
                facade = random_flip(&facade, 2, &mut aug_rng)?;
            }
            let labels: Vec<[usize; 5]> = chunk.iter().map(|&i| train.labels[i]).collect();
            let logits = model.forward(&top, &facade, modality)?;
            let loss = batch_loss(model, &losses, &logits, &labels, cfg.focal_gamma)?;
            let lv = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: lv });
            }
            opt.backward_step(&loss)?;
            loss_sum += lv * chunk.len() as f64;
            step += 1;
        }
        let mut rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            learning_rate: lr,
            val_loss: None,
            val_f1: BTreeMap::new(),
            val_f1_mean: None,
        };
        if let Some(v) = val {
            let (f1, vl) = val_scores(model, v, modality, &losses, cfg)?;
            let mean = f1.values().sum::<f64>() / f1.len() as f64;
            (rec.val_f1, rec.val_loss, rec.val_f1_mean) = (f1, Some(vl), Some(mean));
            // equal F1 is common on small validation sets; the loss breaks ties
            if best.as_ref().is_none_or(|(b, bl, _, _)| mean > *b || (mean == *b && vl < *bl)) {
                best = Some((mean, vl, epoch, model.store.snapshot()?));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        log::debug!(
            "epoch {epoch}: loss {:.4}, val F1 {:?}, lr {:.2e}",
            rec.train_loss,
            rec.val_f1_mean,
            lr
        );
        curves.push(rec);
        if val.is_some() && since_best >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, best_val_f1) = match best {
        Some((score, _, epoch, snap)) => {
            model.store.restore(&snap)?;
            (epoch, Some(score))
        }
        None => (curves.len(), None),
    };
    Ok(TrainOutcome {
        curves,
        best_epoch,
        best_val_f1,
        steps: step,
        stopped_early,
        rng_word_pos: u64::try_from(rng.get_word_pos()).unwrap_or(u64::MAX),
        loss_per_task: losses.iter().map(|l| (l.task, l.kind)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn augmented_samples_are_symmetries_of_the_square() {
        let (b, s) = (16, 5);
        let data: Vec<f32> = (0..b * s * s * 3).map(|v| v as f32).collect();
        let x = Tensor::from_vec(data.clone(), (b, s, s, 3), &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = random_flip(&random_flip(&x, 1, &mut rng).unwrap(), 2, &mut rng).unwrap();
        let y = random_transpose(&y, &mut rng).unwrap();
        let got: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        let at = |v: &[f32], n: usize, r: usize, c: usize, ch: usize| v[((n * s + r) * s + c) * 3 + ch];
        let mut seen = std::collections::BTreeSet::new();
        for n in 0..b {
            let hit = (0..8).find(|&k| {
                (0..s).all(|r| {
                    (0..s).all(|c| {
                        let (mut rr, mut cc) = if k & 4 != 0 { (c, r) } else { (r, c) };
                        if k & 1 != 0 {
                            rr = s - 1 - rr;
                        }
                        if k & 2 != 0 {
                            cc = s - 1 - cc;
                        }
                        (0..3).all(|ch| at(&got, n, r, c, ch) == at(&data, n, rr, cc, ch))
                    })
                })
            });
            seen.insert(hit.unwrap_or_else(|| panic!("sample {n} is not a symmetry of its input")));
        }
        assert!(seen.len() > 2);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            min_lr_fraction: 0.1,
            ..Default::default()
        };
        assert!((cfg.lr_at(0, 11, 0) - 1e-3).abs() < 1e-15);
        assert!((cfg.lr_at(10, 11, 0) - 1e-4).abs() < 1e-15);
        assert!((cfg.lr_at(5, 11, 0) - 5.5e-4).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramps_then_decays() {
        let cfg = TrainConfig { learning_rate: 1e-3, ..Default::default() };
        assert!((cfg.lr_at(0, 14, 4) - 2e-4).abs() < 1e-15);
        assert!((cfg.lr_at(3, 14, 4) - 8e-4).abs() < 1e-15);
        assert!((cfg.lr_at(4, 14, 4) - 1e-3).abs() < 1e-15);
        assert!(cfg.lr_at(13, 14, 4).abs() < 1e-15);
    }

    #[test]
    fn auto_loss_picks_focal_for_imbalance() {
        let cfg = TrainConfig::default();
        // vegetation 9:1, floors 8:2, roof 5:5
        let labels: Vec<[usize; 5]> = (0..10).map(|i| [0, usize::from(i < 2), usize::from(i == 0), 0, i % 2]).collect();
        let plan = plan_losses(&cfg, &labels, DType::F32, &Device::Cpu).unwrap();
        let kind = |t: Task| plan.iter().find(|p| p.task == t).unwrap().kind;
        assert_eq!(kind(Task::Vegetation), LossKind::Focal);
        assert_eq!(kind(Task::Floors), LossKind::Ce);
        assert_eq!(kind(Task::Roof), LossKind::Ce);
        assert_eq!(kind(Task::Openness), LossKind::Focal);
        assert!(plan.iter().find(|p| p.task == Task::Vegetation).unwrap().alpha.is_some());
    }
}
