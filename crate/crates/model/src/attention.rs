//! Global-query token attention and the relative position bias.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Inputs of `G = Softmax(g_q·kᵀ/√s + p)·v`. Tensors are laid out as
/// `[..., heads, tokens, head_dim]`; `p` is `[heads, q_tokens, k_tokens]` or
/// carries the same leading dims as `g_q`.
#[derive(Clone, Debug)]
pub struct AttentionInputs {
    pub g_q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub p: Option<Tensor>,
    pub s: f64,
}

/// Softmax over the last axis. The row maximum is subtracted as a constant,
/// which leaves values and gradients unchanged.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub(crate) fn attention_weights_unchecked(
    q: &Tensor,
    k: &Tensor,
    p: Option<&Tensor>,
    s: f64,
) -> candle_core::Result<Tensor> {
    let logits = (q.matmul(&k.t()?.contiguous()?)? / s.sqrt())?;
    let logits = match p {
        Some(p) => logits.broadcast_add(p)?,
        None => logits,
    };
    softmax_last(&logits)
}

pub(crate) fn attend(q: &Tensor, k: &Tensor, v: &Tensor, p: Option<&Tensor>, s: f64) -> candle_core::Result<Tensor> {
    attention_weights_unchecked(q, k, p, s)?.matmul(v)
}

fn all_finite(t: &Tensor) -> Result<bool> {
    let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

fn validate(inputs: &AttentionInputs) -> Result<()> {
    let (q, k, v) = (inputs.g_q.dims(), inputs.k.dims(), inputs.v.dims());
    if q.len() < 3 || k.len() != q.len() || v.len() != q.len() {
        return Err(Error::Shape(format!("g_q {q:?}, k {k:?}, v {v:?}")));
    }
    let r = q.len();
    if q[..r - 2] != k[..r - 2] || k[..r - 1] != v[..r - 1] || q[r - 1] != k[r - 1] {
        return Err(Error::Shape(format!("g_q {q:?}, k {k:?}, v {v:?}")));
    }
    if let Some(p) = &inputs.p {
        let pd = p.dims();
        let want = [q[r - 3], q[r - 2], k[r - 2]];
        let ok = (pd.len() == 3 && pd == want) || (pd.len() == r && pd[..r - 3] == q[..r - 3] && pd[r - 3..] == want);
        if !ok {
            return Err(Error::Shape(format!("p {pd:?}, expected [.., {}, {}, {}]", want[0], want[1], want[2])));
        }
    }
    if !(inputs.s > 0.0) || !inputs.s.is_finite() {
        return Err(Error::InvalidArgument(format!("scaling factor must be positive, got {}", inputs.s)));
    }
    for (name, t) in [("g_q", &inputs.g_q), ("k", &inputs.k), ("v", &inputs.v)] {
        if !all_finite(t)? {
            return Err(Error::NonFinite(name));
        }
    }
    if let Some(p) = &inputs.p {
        if !all_finite(p)? {
            return Err(Error::NonFinite("p"));
        }
    }
    Ok(())
}

/// Attention of global query tokens over window keys and values.
pub fn global_token_attention(inputs: &AttentionInputs) -> Result<Tensor> {
    validate(inputs)?;
    Ok(attend(&inputs.g_q, &inputs.k, &inputs.v, inputs.p.as_ref(), inputs.s)?)
}

/// The softmax matrix of `global_token_attention`.
pub fn attention_weights(inputs: &AttentionInputs) -> Result<Tensor> {
    validate(inputs)?;
    Ok(attention_weights_unchecked(&inputs.g_q, &inputs.k, inputs.p.as_ref(), inputs.s)?)
}

/// Index into a `(2w − 1)²` offset table for every ordered pair of tokens
/// in a `w × w` window (row-major token order).
pub fn relative_position_index(window: usize) -> Vec<u32> {
    let n = window * window;
    let side = 2 * window - 1;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / window, i % window);
        for j in 0..n {
            let (yj, xj) = (j / window, j % window);
            let dy = yi + window - 1 - yj;
            let dx = xi + window - 1 - xj;
            out.push((dy * side + dx) as u32);
        }
    }
    out
}

/// Learned bias shared by all token pairs with the same spatial offset.
#[derive(Clone, Debug)]
pub struct RelativePositionBias {
    table: Tensor,
    index: Tensor,
    heads: usize,
    tokens: usize,
}

impl RelativePositionBias {
    pub fn new(store: &mut ParamStore, name: &str, window: usize, heads: usize) -> Result<Self> {
        let side = 2 * window - 1;
        let table = store.zeros(name, &[side * side, heads])?;
        let index = Tensor::from_vec(relative_position_index(window), window.pow(4), store.device())?;
        Ok(Self {
            table,
            index,
            heads,
            tokens: window * window,
        })
    }

    pub fn from_table(table: Tensor, window: usize) -> Result<Self> {
        let heads = table.dim(1)?;
        let index = Tensor::from_vec(relative_position_index(window), window.pow(4), table.device())?;
        Ok(Self {
            table,
            index,
            heads,
            tokens: window * window,
        })
    }

    /// `[heads, tokens, tokens]`.
    pub fn bias(&self) -> candle_core::Result<Tensor> {
        self.table
            .index_select(&self.index, 0)?
            .reshape((self.tokens, self.tokens, self.heads))?
            .permute((2, 0, 1))?
            .contiguous()
    }
}
