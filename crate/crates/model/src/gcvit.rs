//! One GCViT stream: patch embedding, four stages of windowed local attention
//! interleaved with global-query attention, and average pooling.

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;

use crate::attention::{attend, RelativePositionBias};
use crate::config::GcvitConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

const INIT_STD: f64 = 0.02;

pub(crate) fn linear(store: &mut ParamStore, name: &str, inp: usize, out: usize) -> Result<Linear> {
    let w = store.trunc_normal(&format!("{name}.weight"), &[out, inp], INIT_STD)?;
    let b = store.zeros(&format!("{name}.bias"), &[out])?;
    Ok(Linear::new(w, Some(b)))
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.ones(&format!("{name}.weight"), &[dim])?,
            bias: store.zeros(&format!("{name}.bias"), &[dim])?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new(store: &mut ParamStore, name: &str, dim: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            fc1: linear(store, &format!("{name}.fc1"), dim, dim * ratio)?,
            fc2: linear(store, &format!("{name}.fc2"), dim * ratio, dim)?,
        })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// `[B, H, W, C]` → `[B·nW, w², C]`.
fn window_partition(x: &Tensor, w: usize) -> candle_core::Result<Tensor> {
    let (b, h, wd, c) = x.dims4()?;
    x.reshape((b, h / w, w, wd / w, w, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / w) * (wd / w), w * w, c))
}

/// Inverse of `window_partition`.
fn window_reverse(x: &Tensor, w: usize, b: usize, h: usize, wd: usize) -> candle_core::Result<Tensor> {
    let c = x.dim(D::Minus1)?;
    x.reshape((b, h / w, wd / w, w, w, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, wd, c))
}

/// `[N, T, C]` → `[N, heads, T, C / heads]`.
fn split_heads(x: &Tensor, heads: usize) -> candle_core::Result<Tensor> {
    let (n, t, c) = x.dims3()?;
    x.reshape((n, t, heads, c / heads))?.transpose(1, 2)?.contiguous()
}

fn merge_heads(x: &Tensor) -> candle_core::Result<Tensor> {
    let (n, h, t, d) = x.dims4()?;
    x.transpose(1, 2)?.contiguous()?.reshape((n, t, h * d))
}

#[derive(Clone, Debug)]
struct LocalBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    rpb: RelativePositionBias,
    norm2: LayerNorm,
    mlp: Mlp,
    heads: usize,
    window: usize,
}

impl LocalBlock {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, window: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            qkv: linear(store, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: linear(store, &format!("{name}.proj"), dim, dim)?,
            rpb: RelativePositionBias::new(store, &format!("{name}.rel_pos"), window, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, ratio)?,
            heads,
            window,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let win = window_partition(&self.norm1.forward(x)?, self.window)?;
        let qkv = self.qkv.forward(&win)?;
        let q = split_heads(&qkv.narrow(D::Minus1, 0, c)?, self.heads)?;
        let k = split_heads(&qkv.narrow(D::Minus1, c, c)?, self.heads)?;
        let v = split_heads(&qkv.narrow(D::Minus1, 2 * c, c)?, self.heads)?;
        let o = attend(&q, &k, &v, Some(&self.rpb.bias()?), (c / self.heads) as f64)?;
        let o = self.proj.forward(&merge_heads(&o)?)?;
        let x = (x + window_reverse(&o, self.window, b, h, w)?)?;
        &x + self.mlp.forward(&self.norm2.forward(&x)?)?
    }
}

#[derive(Clone, Debug)]
struct GlobalBlock {
    norm1: LayerNorm,
    kv: Linear,
    proj: Linear,
    rpb: RelativePositionBias,
    norm2: LayerNorm,
    mlp: Mlp,
    heads: usize,
    window: usize,
}

impl GlobalBlock {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, window: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            kv: linear(store, &format!("{name}.kv"), dim, 2 * dim)?,
            proj: linear(store, &format!("{name}.proj"), dim, dim)?,
            rpb: RelativePositionBias::new(store, &format!("{name}.rel_pos"), window, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, ratio)?,
            heads,
            window,
        })
    }

    /// `g_q` is `[B, heads, w², head_dim]`, shared by all windows of an image.
    fn forward(&self, x: &Tensor, g_q: &Tensor) -> candle_core::Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let n_win = (h / self.window) * (w / self.window);
        let win = window_partition(&self.norm1.forward(x)?, self.window)?;
        let kv = self.kv.forward(&win)?;
        let k = split_heads(&kv.narrow(D::Minus1, 0, c)?, self.heads)?;
        let v = split_heads(&kv.narrow(D::Minus1, c, c)?, self.heads)?;
        let (_, nh, t, d) = g_q.dims4()?;
        let q = g_q
            .unsqueeze(1)?
            .broadcast_as((b, n_win, nh, t, d))?
            .contiguous()?
            .reshape((b * n_win, nh, t, d))?;
        let o = attend(&q, &k, &v, Some(&self.rpb.bias()?), d as f64)?;
        let o = self.proj.forward(&merge_heads(&o)?)?;
        let x = (x + window_reverse(&o, self.window, b, h, w)?)?;
        &x + self.mlp.forward(&self.norm2.forward(&x)?)?
    }
}

/// Global query tokens from the whole stage feature map: average-pool to the
/// window grid, normalize and project.
#[derive(Clone, Debug)]
struct GlobalQueryGen {
    norm: LayerNorm,
    proj: Linear,
    window: usize,
    heads: usize,
}

impl GlobalQueryGen {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let win = self.window;
        let pooled = x
            .reshape((b, win, h / win, win, w / win, c))?
            .mean(4)?
            .mean(2)?
            .reshape((b, win * win, c))?;
        let q = self.proj.forward(&self.norm.forward(&pooled)?)?;
        split_heads(&q, self.heads)
    }
}

/// 2×2 space-to-depth followed by a linear projection.
#[derive(Clone, Debug)]
struct Downsample {
    norm: LayerNorm,
    reduction: Linear,
}

impl Module for Downsample {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let x = x
            .reshape((b, h / 2, 2, w / 2, 2, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        self.reduction.forward(&self.norm.forward(&x)?)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<(LocalBlock, GlobalBlock)>,
    qgen: GlobalQueryGen,
    downsample: Option<Downsample>,
}

impl Stage {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let g_q = self.qgen.forward(x)?;
        let mut x = x.clone();
        for (local, global) in &self.blocks {
            x = local.forward(&x)?;
            x = global.forward(&x, &g_q)?;
        }
        match &self.downsample {
            Some(d) => d.forward(&x),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GcvitStream {
    patch: Linear,
    patch_norm: LayerNorm,
    stages: Vec<Stage>,
    norm: LayerNorm,
    chip_size: usize,
    patch_size: usize,
}

impl GcvitStream {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &GcvitConfig) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let patch = linear(store, &format!("{name}.patch_embed"), p * p * 3, cfg.stage_dims[0])?;
        let patch_norm = LayerNorm::new(store, &format!("{name}.patch_norm"), cfg.stage_dims[0])?;
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let (dim, heads, win) = (cfg.stage_dims[i], cfg.num_heads[i], cfg.window_sizes[i]);
            let sname = format!("{name}.stage{i}");
            let qgen = GlobalQueryGen {
                norm: LayerNorm::new(store, &format!("{sname}.q_global.norm"), dim)?,
                proj: linear(store, &format!("{sname}.q_global.proj"), dim, dim)?,
                window: win,
                heads,
            };
            let mut blocks = Vec::with_capacity(cfg.stage_depths[i]);
            for d in 0..cfg.stage_depths[i] {
                blocks.push((
                    LocalBlock::new(store, &format!("{sname}.block{d}.local"), dim, heads, win, cfg.mlp_ratio)?,
                    GlobalBlock::new(store, &format!("{sname}.block{d}.global"), dim, heads, win, cfg.mlp_ratio)?,
                ));
            }
            let downsample = if i < 3 {
                Some(Downsample {
                    norm: LayerNorm::new(store, &format!("{sname}.downsample.norm"), 4 * dim)?,
                    reduction: linear(store, &format!("{sname}.downsample.reduction"), 4 * dim, cfg.stage_dims[i + 1])?,
                })
            } else {
                None
            };
            stages.push(Stage {
                blocks,
                qgen,
                downsample,
            });
        }
        let norm = LayerNorm::new(store, &format!("{name}.norm"), cfg.final_dim())?;
        Ok(Self {
            patch,
            patch_norm,
            stages,
            norm,
            chip_size: cfg.chip_size,
            patch_size: p,
        })
    }

    /// `[B, S, S, 3]` normalized chips → `[B, final_dim]` pooled features.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let s = self.chip_size;
        if dims.len() != 4 || dims[1] != s || dims[2] != s || dims[3] != 3 {
            return Err(Error::Shape(format!("expected [B, {s}, {s}, 3] chips, got {dims:?}")));
        }
        let (b, p, g) = (dims[0], self.patch_size, s / self.patch_size);
        let patches = x
            .reshape((b, g, p, g, p, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, g, g, p * p * 3))?;
        let mut h = self.patch_norm.forward(&self.patch.forward(&patches)?)?;
        for stage in &self.stages {
            h = stage.forward(&h)?;
        }
        let (b, hh, ww, c) = h.dims4()?;
        let tokens = self.norm.forward(&h.reshape((b, hh * ww, c))?)?;
        Ok(tokens.mean(1)?)
    }
}
