//! Classification losses over logits `[B, C]` and one-hot targets `[B, C]`.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn log_softmax(z: &Tensor) -> candle_core::Result<Tensor> {
    let m = z.max_keepdim(D::Minus1)?.detach();
    let zc = z.broadcast_sub(&m)?;
    let lse = zc.exp()?.sum_keepdim(D::Minus1)?.log()?;
    zc.broadcast_sub(&lse)
}

fn check_targets(z: &Tensor, y: &Tensor) -> Result<()> {
    if z.dims().len() != 2 || z.dims() != y.dims() {
        return Err(Error::Shape(format!("logits {:?} vs targets {:?}", z.dims(), y.dims())));
    }
    let rows: Vec<Vec<f64>> = y.to_dtype(DType::F64)?.to_vec2()?;
    for (i, r) in rows.iter().enumerate() {
        let ones = r.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || r.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Target(format!("row {i} is not one-hot: {r:?}")));
        }
    }
    Ok(())
}

/// Mean of `−Σ_c y_c log softmax(z)_c` over the batch.
pub fn softmax_cross_entropy(z: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_targets(z, y)?;
    let per = (log_softmax(z)? * y)?.sum(D::Minus1)?.neg()?;
    Ok(per.mean_all()?)
}

/// Mean of `−Σ_c α_c (1 − p_c)^γ y_c log p_c`. `alpha` is per class, `None`
/// means all ones.
pub fn focal_loss(z: &Tensor, y: &Tensor, gamma: f64, alpha: Option<&Tensor>) -> Result<Tensor> {
    check_targets(z, y)?;
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("focal gamma must be >= 0, got {gamma}")));
    }
    let logp = log_softmax(z)?;
    let mut per = (&logp * y)?;
    if gamma != 0.0 {
        // relu keeps the base non-negative when p rounds above 1
        let base = logp.exp()?.affine(-1.0, 1.0)?.relu()?;
        per = (per * base.powf(gamma)?)?;
    }
    if let Some(a) = alpha {
        if a.dims() != [z.dim(1)?] {
            return Err(Error::Shape(format!("alpha {:?} for {} classes", a.dims(), z.dim(1)?)));
        }
        per = per.broadcast_mul(a)?;
    }
    Ok(per.sum(D::Minus1)?.neg()?.mean_all()?)
}

pub fn one_hot(labels: &[usize], classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Target(format!("label {l} out of range for {classes} classes")));
        }
        data[i * classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(data, (labels.len(), classes), device)?.to_dtype(dtype)?)
}

/// Inverse class frequency scaled to mean 1 over the classes that occur;
/// absent classes get weight 0.
pub fn class_alpha(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l < classes {
            counts[l] += 1;
        }
    }
    let inv: Vec<f64> = counts.iter().map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 }).collect();
    let present = counts.iter().filter(|&&c| c > 0).count();
    let mean = inv.iter().sum::<f64>() / present.max(1) as f64;
    if mean == 0.0 {
        return vec![1.0; classes];
    }
    inv.iter().map(|v| v / mean).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Focal loss when a task's classes are imbalanced, cross-entropy otherwise.
    #[default]
    Auto,
    Focal,
    Ce,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    #[default]
    InverseFrequency,
    None,
}
