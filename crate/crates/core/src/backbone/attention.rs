use candle_core::{Result, Tensor};

use crate::nn::{softmax_last_dim, GroupNorm, Linear, ParamPath};

/// Attention weights `softmax(QKᵀ/√d)` for `q: [.., L, d]`, `k: [.., M, d]`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d = q.dim(candle_core::D::Minus1)?;
    let logits = (q.matmul(&k.transpose(candle_core::D::Minus2, candle_core::D::Minus1)?.contiguous()?)?
        / (d as f64).sqrt())?;
    softmax_last_dim(&logits)
}

/// `softmax(QKᵀ/√d)·V` with `Q = x·W_Qᵀ`, `K = c·W_Kᵀ`, `V = c·W_Vᵀ`.
///
/// `x: [B, L, d_x]`, `ctx: [B, M, d_c]`; the weights are `[d, d_x]`,
/// `[d, d_c]` and `[d_v, d_c]`.
pub fn cross_attention(x: &Tensor, ctx: &Tensor, w_q: &Tensor, w_k: &Tensor, w_v: &Tensor) -> Result<Tensor> {
    let (dq, dx) = w_q.dims2()?;
    let (dk, dc) = w_k.dims2()?;
    let (_, dv_in) = w_v.dims2()?;
    if dq != dk || x.dim(candle_core::D::Minus1)? != dx || ctx.dim(candle_core::D::Minus1)? != dc || dv_in != dc {
        candle_core::bail!(
            "attention dims: x {:?}, ctx {:?}, W_Q {:?}, W_K {:?}, W_V {:?}",
            x.dims(),
            ctx.dims(),
            w_q.dims(),
            w_k.dims(),
            w_v.dims()
        );
    }
    let q = x.broadcast_matmul(&w_q.t()?)?;
    let k = ctx.broadcast_matmul(&w_k.t()?)?;
    let v = ctx.broadcast_matmul(&w_v.t()?)?;
    attention_weights(&q, &k)?.matmul(&v)
}

/// Feature-map block: normalized pixels attend to prompt tokens; the
/// result is projected back and added residually.
#[derive(Debug, Clone)]
pub struct CrossAttnBlock {
    norm: GroupNorm,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    proj: Linear,
}

impl CrossAttnBlock {
    pub fn new(p: &ParamPath, channels: usize, ctx_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&p.pp("norm"), channels, groups)?,
            w_q: Linear::no_bias(&p.pp("q"), channels, channels)?,
            w_k: Linear::no_bias(&p.pp("k"), ctx_dim, channels)?,
            w_v: Linear::no_bias(&p.pp("v"), ctx_dim, channels)?,
            proj: Linear::new(&p.pp("proj"), channels, channels)?,
        })
    }

    /// `x: [B, C, H, W]`, `ctx: [B, M, d_c]`.
    pub fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let att = cross_attention(&tokens, ctx, &self.w_q, &self.w_k, &self.w_v)?;
        let out = self.proj.forward(&att)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        x + out
    }
}
