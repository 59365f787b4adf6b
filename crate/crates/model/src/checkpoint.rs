//! Safetensors checkpoints with the model and training configuration in the
//! header metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use crossview_heat::eval::Modality;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::config::GcvitConfig;
use crate::error::{Error, Result};
use crate::model::CrossViewModel;
use crate::train::TrainConfig;

const META_KEY: &str = "crossview_heat";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: GcvitConfig,
    pub train: Option<TrainConfig>,
    pub modality: Modality,
    /// Held-out fold when trained inside cross-validation.
    pub fold: Option<usize>,
    /// Seed the parameters were initialized with.
    pub init_seed: u64,
    pub epoch: usize,
    pub step: usize,
    /// Position of the training shuffle RNG (seeded by `train.seed`).
    pub rng_word_pos: u64,
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn save(model: &CrossViewModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if meta.model != model.config {
        return Err(ckpt_err(path, "metadata config differs from the model's"));
    }
    let tensors: BTreeMap<String, Tensor> = model
        .store
        .named()
        .iter()
        .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
        .collect();
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(tensors.iter(), Some(info), path)?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| ckpt_err(path, "missing metadata"))?;
    Ok(serde_json::from_str(json)?)
}

/// Rebuild the model described by the checkpoint and load its parameters.
pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<(CrossViewModel, CheckpointMeta)> {
    let meta = read_meta(path)?;
    let model = CrossViewModel::new(meta.model.clone(), meta.init_seed, dtype, device.clone())?;
    let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load(path, device)?.into_iter().collect();
    if tensors.len() != model.store.named().len() {
        return Err(ckpt_err(
            path,
            format!("{} tensors, model has {}", tensors.len(), model.store.named().len()),
        ));
    }
    model.store.restore(&tensors)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let cfg = GcvitConfig::toy(32);
        let m = CrossViewModel::new(cfg.clone(), 11, DType::F32, Device::Cpu).unwrap();
        // move off the initial values so loading really restores
        for v in m.store.vars() {
            v.set(&(v.as_tensor() + 0.01).unwrap()).unwrap();
        }
        let meta = CheckpointMeta {
            model: cfg,
            train: Some(TrainConfig::default()),
            modality: Modality::Multi,
            fold: Some(2),
            init_seed: 11,
            epoch: 3,
            step: 42,
            rng_word_pos: 7,
        };
        save(&m, &meta, &path).unwrap();
        let (m2, meta2) = load(&path, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(meta, meta2);
        let x = Tensor::randn(0f32, 1.0, (2, 32, 32, 3), &Device::Cpu).unwrap();
        let a = m.forward(&x, &x, Modality::Multi).unwrap();
        let b = m2.forward(&x, &x, Modality::Multi).unwrap();
        for ((_, za), (_, zb)) in a.iter().zip(&b) {
            let d = (za - zb).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0);
        }
    }
}
