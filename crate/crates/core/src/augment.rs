//! Minority-class augmentation of cross-view chip pairs.

use std::collections::BTreeMap;

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Task;
use crate::error::{Error, Result};
use crate::imaging::{flip_horizontal, photometric, rotate};

/// Copies per `(task, class)`; a pair is replicated by the largest multiplier
/// among its labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub multipliers: BTreeMap<Task, Vec<usize>>,
}

impl AugmentationPlan {
    /// Multiplier `round(target_ratio · majority / n_c)` clamped to
    /// `[1, max_multiplier]`, for every task in `tasks`.
    pub fn from_labels(labels: &[[usize; 5]], tasks: &[Task], target_ratio: f64, max_multiplier: usize) -> Self {
        let mut multipliers = BTreeMap::new();
        for &task in tasks {
            let t = Task::ALL.iter().position(|x| *x == task).unwrap_or(0);
            let mut counts = vec![0usize; task.num_classes()];
            for l in labels {
                counts[l[t]] += 1;
            }
            let majority = counts.iter().copied().max().unwrap_or(0) as f64;
            let m = counts
                .iter()
                .map(|&n| {
                    if n == 0 {
                        1
                    } else {
                        ((target_ratio * majority / n as f64).round() as usize).clamp(1, max_multiplier.max(1))
                    }
                })
                .collect();
            multipliers.insert(task, m);
        }
        Self { multipliers }
    }

    pub fn multiplier(&self, classes: &[usize; 5]) -> usize {
        Task::ALL
            .iter()
            .enumerate()
            .filter_map(|(t, task)| self.multipliers.get(task)?.get(classes[t]).copied())
            .max()
            .unwrap_or(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub max_rotation_deg: f64,
    pub gain_jitter: f32,
    pub bias_jitter: f32,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            max_rotation_deg: 10.0,
            gain_jitter: 0.1,
            bias_jitter: 10.0,
        }
    }
}

fn jitter_view<R: Rng>(img: &RgbImage, params: &AugmentParams, fill: [u8; 3], rng: &mut R) -> RgbImage {
    let mut out = if rng.random_bool(0.5) {
        flip_horizontal(img)
    } else {
        img.clone()
    };
    let angle = rng.random_range(-params.max_rotation_deg..=params.max_rotation_deg);
    out = rotate(&out, angle, fill);
    let gain = 1.0 + rng.random_range(-params.gain_jitter..=params.gain_jitter);
    let bias = rng.random_range(-params.bias_jitter..=params.bias_jitter);
    photometric(&out, gain, bias, fill)
}

/// The original pair followed by `multiplier − 1` variants. Each view is
/// flipped, rotated and jittered independently in its own frame.
pub fn augment_pair<R: Rng>(
    top: &RgbImage,
    facade: &RgbImage,
    multiplier: usize,
    params: &AugmentParams,
    fill: [u8; 3],
    rng: &mut R,
) -> Result<Vec<(RgbImage, RgbImage)>> {
    if multiplier < 1 {
        return Err(Error::InvalidArgument("augmentation multiplier must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(multiplier);
    out.push((top.clone(), facade.clone()));
    for _ in 1..multiplier {
        let t = jitter_view(top, params, fill, rng);
        let f = jitter_view(facade, params, fill, rng);
        out.push((t, f));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chip(seed: u8) -> RgbImage {
        RgbImage::from_fn(16, 16, |i, j| Rgb([(i * 13 + j) as u8 ^ seed, (j * 7) as u8, 40]))
    }

    #[test]
    fn multiplier_one_is_identity() {
        let (t, f) = (chip(1), chip(2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_pair(&t, &f, 1, &AugmentParams::default(), [128; 3], &mut rng).unwrap();
        assert_eq!(out, vec![(t, f)]);
    }

    #[test]
    fn multiplier_four_gives_three_variants() {
        let (t, f) = (chip(1), chip(2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_pair(&t, &f, 4, &AugmentParams::default(), [128; 3], &mut rng).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[0], (t.clone(), f.clone()));
        assert!(out[1..].iter().all(|(a, _)| a.dimensions() == t.dimensions()));
        assert!(augment_pair(&t, &f, 0, &AugmentParams::default(), [128; 3], &mut rng).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let c = chip(9);
        assert_eq!(flip_horizontal(&flip_horizontal(&c)), c);
    }

    #[test]
    fn plan_boosts_minority_only() {
        // vegetation: 8 No (index 1), 2 Yes (index 0)
        let labels: Vec<[usize; 5]> = (0..10).map(|i| [0, 0, usize::from(i >= 2), 0, 0]).collect();
        let plan = AugmentationPlan::from_labels(&labels, &[Task::Vegetation], 1.0, 4);
        assert_eq!(plan.multipliers[&Task::Vegetation], vec![4, 1]);
        assert_eq!(plan.multiplier(&[0, 0, 0, 0, 0]), 4);
        assert_eq!(plan.multiplier(&[0, 0, 1, 0, 0]), 1);
    }
}
