use std::collections::BTreeMap;

use crossview_heat::domain::Task;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Toy,
    Tiny,
}

/// Architecture of one GCViT stream plus the task heads. Stage depths count
/// (local, global) block pairs, so every stage has both attention kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcvitConfig {
    pub profile: Profile,
    pub chip_size: usize,
    pub patch_size: usize,
    pub stage_dims: [usize; 4],
    pub stage_depths: [usize; 4],
    pub window_sizes: [usize; 4],
    pub num_heads: [usize; 4],
    pub mlp_ratio: usize,
    pub head_tasks: BTreeMap<Task, usize>,
}

fn default_heads() -> BTreeMap<Task, usize> {
    Task::ALL.iter().map(|&t| (t, t.num_classes())).collect()
}

impl GcvitConfig {
    /// Small profile: dims (32, 64, 128, 256), depths (1, 1, 2, 1), window 4
    /// (clipped to the stage resolution).
    pub fn toy(chip_size: usize) -> Self {
        let patch = 4;
        let mut windows = [4; 4];
        for (i, w) in windows.iter_mut().enumerate() {
            *w = (*w).min((chip_size / patch) >> i).max(1);
        }
        Self {
            profile: Profile::Toy,
            chip_size,
            patch_size: patch,
            stage_dims: [32, 64, 128, 256],
            stage_depths: [1, 1, 2, 1],
            window_sizes: windows,
            num_heads: [2, 4, 8, 16],
            mlp_ratio: 4,
            head_tasks: default_heads(),
        }
    }

    /// GCViT-Tiny widths with depths rounded to (local, global) pairs.
    pub fn tiny(chip_size: usize) -> Self {
        let patch = 4;
        let mut windows = [8, 8, 16, 8];
        for (i, w) in windows.iter_mut().enumerate() {
            *w = (*w).min((chip_size / patch) >> i).max(1);
        }
        Self {
            profile: Profile::Tiny,
            chip_size,
            patch_size: patch,
            stage_dims: [64, 128, 256, 512],
            stage_depths: [2, 2, 10, 3],
            window_sizes: windows,
            num_heads: [2, 4, 8, 16],
            mlp_ratio: 3,
            head_tasks: default_heads(),
        }
    }

    pub fn for_profile(profile: Profile, chip_size: usize) -> Self {
        match profile {
            Profile::Toy => Self::toy(chip_size),
            Profile::Tiny => Self::tiny(chip_size),
        }
    }

    /// Token grid side at stage `i`.
    pub fn stage_resolution(&self, i: usize) -> usize {
        (self.chip_size / self.patch_size) >> i
    }

    pub fn final_dim(&self) -> usize {
        self.stage_dims[3]
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.chip_size % self.patch_size != 0 {
            return err(format!(
                "chip_size {} not divisible by patch_size {}",
                self.chip_size, self.patch_size
            ));
        }
        let base = self.chip_size / self.patch_size;
        if base % 8 != 0 {
            return err(format!("token grid {base} must be divisible by 8 for three 2x reductions"));
        }
        for i in 0..4 {
            let res = self.stage_resolution(i);
            let w = self.window_sizes[i];
            if w == 0 || res % w != 0 {
                return err(format!("stage {i}: resolution {res} not divisible by window {w}"));
            }
            let (d, h) = (self.stage_dims[i], self.num_heads[i]);
            if h == 0 || d % h != 0 {
                return err(format!("stage {i}: dim {d} not divisible by {h} heads"));
            }
            if self.stage_depths[i] == 0 {
                return err(format!("stage {i}: depth must be at least 1"));
            }
        }
        for t in Task::ALL {
            match self.head_tasks.get(&t) {
                Some(&c) if c == t.num_classes() => {}
                Some(&c) => {
                    return err(format!(
                        "task {t} has {c} classes, vocabulary has {}",
                        t.num_classes()
                    ))
                }
                None => return err(format!("missing head for task {t}")),
            }
        }
        if self.head_tasks.len() != Task::ALL.len() {
            return err("unexpected head task".into());
        }
        Ok(())
    }
}
