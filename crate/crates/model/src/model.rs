//! Two-stream cross-view classifier: a top-view and a façade-view GCViT,
//! pooled features concatenated and fed to one linear head per task.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Linear;
use crossview_heat::domain::Task;
use crossview_heat::eval::Modality;
use image::RgbImage;

use crate::config::GcvitConfig;
use crate::error::{Error, Result};
use crate::gcvit::{linear, GcvitStream};
use crate::params::ParamStore;

pub struct CrossViewModel {
    pub config: GcvitConfig,
    pub store: ParamStore,
    top: GcvitStream,
    facade: GcvitStream,
    /// Stand-ins for a stream that is switched off.
    absent_top: Tensor,
    absent_facade: Tensor,
    heads: Vec<(Task, Linear)>,
}

impl CrossViewModel {
    pub fn new(config: GcvitConfig, seed: u64, dtype: DType, device: Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype, device);
        let top = GcvitStream::new(&mut store, "top", &config)?;
        let facade = GcvitStream::new(&mut store, "facade", &config)?;
        let d = config.final_dim();
        let absent_top = store.zeros("absent.top", &[d])?;
        let absent_facade = store.zeros("absent.facade", &[d])?;
        let mut heads = Vec::new();
        for (&task, &c) in &config.head_tasks {
            heads.push((task, linear(&mut store, &format!("head.{}", task.key()), 2 * d, c)?));
        }
        heads.sort_by_key(|(t, _)| t.index_in_all());
        Ok(Self {
            config,
            store,
            top,
            facade,
            absent_top,
            absent_facade,
            heads,
        })
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// `[B, 2·d]` fused features; a switched-off stream contributes its
    /// learned stand-in vector and is not evaluated.
    pub fn features(&self, top: &Tensor, facade: &Tensor, modality: Modality) -> Result<Tensor> {
        let b = top.dim(0)?;
        if facade.dim(0)? != b {
            return Err(Error::Shape(format!("batch sizes differ: {} vs {}", b, facade.dim(0)?)));
        }
        let d = self.config.final_dim();
        let ft = if modality.uses_top() {
            self.top.forward(top)?
        } else {
            self.absent_top.unsqueeze(0)?.broadcast_as((b, d))?.contiguous()?
        };
        let ff = if modality.uses_facade() {
            self.facade.forward(facade)?
        } else {
            self.absent_facade.unsqueeze(0)?.broadcast_as((b, d))?.contiguous()?
        };
        Ok(Tensor::cat(&[&ft, &ff], 1)?)
    }

    /// Per-task logits in [`Task::ALL`] order.
    pub fn classify(&self, features: &Tensor) -> Result<Vec<(Task, Tensor)>> {
        self.heads
            .iter()
            .map(|(t, h)| Ok((*t, h.forward(features)?)))
            .collect()
    }

    pub fn forward(&self, top: &Tensor, facade: &Tensor, modality: Modality) -> Result<Vec<(Task, Tensor)>> {
        self.classify(&self.features(top, facade, modality)?)
    }
}

trait TaskOrder {
    fn index_in_all(self) -> usize;
}

impl TaskOrder for Task {
    fn index_in_all(self) -> usize {
        Task::ALL.iter().position(|&t| t == self).unwrap_or(usize::MAX)
    }
}

/// Scale 8-bit RGB to `(v/255 − 0.5)/0.25`.
pub fn normalize_pixel(v: u8) -> f32 {
    (v as f32 / 255.0 - 0.5) / 0.25
}

/// Stack chips into a `[B, S, S, 3]` tensor.
pub fn images_to_tensor(images: &[&RgbImage], size: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * size * size * 3);
    for img in images {
        if img.width() as usize != size || img.height() as usize != size {
            return Err(Error::Shape(format!(
                "chip is {}x{}, model expects {size}x{size}",
                img.width(),
                img.height()
            )));
        }
        data.extend(img.as_raw().iter().map(|&v| normalize_pixel(v)));
    }
    Ok(Tensor::from_vec(data, (images.len(), size, size, 3), device)?.to_dtype(dtype)?)
}
