//! Conditional denoiser: a latent U-Net with sinusoidal time conditioning,
//! prompt cross-attention, AFT filters on the encoder path, and two
//! decoders sharing the encoder and its skips. One decoder predicts the
//! drift parameters, the other the noise.

pub mod aft;
pub mod attention;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array3, Array4};
use thiserror::Error;

pub use aft::{aft_apply, spectral_filter, Aft, AftWeights};
pub use attention::{attention_weights, cross_attention, CrossAttnBlock};

use crate::diffusion::{DiffusionError, DriftKind, PredictionPair, Predictor};
use crate::domain::{PromptTensor, LATENT_CHANNELS, PROMPT_CHANNELS};
use crate::nn::{avg_pool, sinusoidal_embedding, upsample2x, Conv2d, GroupNorm, Init, Linear, ParamPath, ParamStore};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite activation after block '{block}'")]
    NonFiniteActivation { block: String },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

type Result<T> = std::result::Result<T, BackboneError>;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub latent_channels: usize,
    /// Latent side length; fixes the AFT weight grids.
    pub latent_size: usize,
    /// Image pixels per latent cell.
    pub spatial_factor: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    /// Encoder/decoder levels carrying cross-attention (the middle block
    /// always has one).
    pub attention_levels: Vec<usize>,
    pub prompt_embed_dim: usize,
    /// Total stride of the prompt extractor, a power of two.
    pub prompt_stride: usize,
    pub aft_enabled: bool,
    /// Encoder levels followed by an AFT layer when enabled.
    pub aft_levels: Vec<usize>,
    /// Also feed the pooled prompt to the U-Net input.
    pub prompt_concat: bool,
    pub groups: usize,
    pub drift_kind: DriftKind,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            latent_channels: LATENT_CHANNELS,
            latent_size: 64,
            spatial_factor: 4,
            base_width: 64,
            channel_mults: vec![1, 2, 2],
            res_blocks: 1,
            attention_levels: vec![1, 2],
            prompt_embed_dim: 64,
            prompt_stride: 8,
            aft_enabled: true,
            aft_levels: vec![0, 1, 2],
            prompt_concat: true,
            groups: 8,
            drift_kind: DriftKind::Constant,
        }
    }
}

impl BackboneConfig {
    /// Small network for CPU-scale runs on `image_size` maps.
    pub fn desk(image_size: usize) -> Self {
        Self {
            latent_size: image_size / 4,
            base_width: 32,
            channel_mults: vec![1, 2],
            attention_levels: vec![1],
            prompt_embed_dim: 32,
            aft_levels: vec![0, 1],
            ..Self::default()
        }
    }

    pub fn image_size(&self) -> usize {
        self.latent_size * self.spatial_factor
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BackboneError::InvalidConfig(m));
        if self.latent_channels == 0 || self.base_width == 0 || self.prompt_embed_dim == 0 || self.groups == 0 {
            return bad("widths must be positive".into());
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad("channel multipliers must be non-empty and positive".into());
        }
        if self.res_blocks == 0 {
            return bad("res_blocks must be at least 1".into());
        }
        let levels = self.channel_mults.len();
        if self.attention_levels.is_empty() {
            return bad("at least one attention stage is required".into());
        }
        if let Some(l) = self.attention_levels.iter().chain(&self.aft_levels).find(|l| **l >= levels) {
            return bad(format!("level {l} does not exist ({levels} levels)"));
        }
        if self.latent_size % (1 << (levels - 1)) != 0 {
            return bad(format!("latent size {} not divisible by 2^{}", self.latent_size, levels - 1));
        }
        if !self.prompt_stride.is_power_of_two() || self.image_size() % self.prompt_stride != 0 {
            return bad(format!("prompt stride {} does not tile {}", self.prompt_stride, self.image_size()));
        }
        for l in 0..levels {
            if self.width(l) % self.groups.min(self.width(l)) != 0 {
                return bad(format!("width {} not divisible into {} groups", self.width(l), self.groups));
            }
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width * self.channel_mults[level]
    }

    fn time_dim(&self) -> usize {
        4 * self.base_width
    }

    fn f_channels(&self) -> usize {
        self.latent_channels * self.drift_kind.param_count()
    }

    /// Number of prompt tokens for the configured image size.
    pub fn prompt_tokens(&self) -> usize {
        let side = self.image_size() / self.prompt_stride;
        side * side
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(p: &ParamPath, c_in: usize, c_out: usize, t_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&p.pp("norm1"), c_in, groups)?,
            conv1: Conv2d::new(&p.pp("conv1"), c_in, c_out, 3, 1)?,
            time: Linear::new(&p.pp("time"), t_dim, c_out)?,
            norm2: GroupNorm::new(&p.pp("norm2"), c_out, groups)?,
            conv2: Conv2d::new(&p.pp("conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in == c_out {
                None
            } else {
                Some(Conv2d::new(&p.pp("skip"), c_in, c_out, 1, 1)?)
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward_silu(x)?)?;
        let (b, c) = (h.dim(0)?, h.dim(1)?);
        let t = self.time.forward(&temb.silu()?)?.reshape((b, c, 1, 1))?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward_silu(&h)?)?;
        match &self.skip {
            Some(s) => s.forward(x)? + h,
            None => x + h,
        }
    }
}

/// Strided conv stack turning a `3×N×N` prompt into `(N/s)²` tokens.
#[derive(Debug, Clone)]
pub struct PromptExtractor {
    convs: Vec<Conv2d>,
    dim: usize,
}

impl PromptExtractor {
    fn new(p: &ParamPath, stride: usize, dim: usize) -> Result<Self> {
        let n = stride.trailing_zeros() as usize;
        let mut convs = Vec::with_capacity(n + 1);
        let mut c_in = PROMPT_CHANNELS;
        for i in 0..n {
            let c_out = if i + 1 == n { dim } else { (16 << i).min(dim) };
            convs.push(Conv2d::new(&p.pp(format!("conv{i}")), c_in, c_out, 3, 2)?);
            c_in = c_out;
        }
        convs.push(Conv2d::new(&p.pp("mix"), c_in, dim, 1, 1)?);
        Ok(Self { convs, dim })
    }

    /// `[B, 3, N, N]` to `[B, M, d_c]`, with a fixed 2-D sinusoidal
    /// position code added to every token.
    pub fn forward(&self, prompt: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = prompt.clone();
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&h)?;
            if i < last {
                h = h.silu()?;
            }
        }
        let (b, d, gh, gw) = h.dims4()?;
        let tokens = h.reshape((b, d, gh * gw))?.transpose(1, 2)?.contiguous()?;
        let pos = position_code(gh, gw, self.dim, tokens.dtype(), tokens.device())?;
        tokens.broadcast_add(&pos)
    }
}

fn position_code(gh: usize, gw: usize, dim: usize, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
    let half = dim / 2;
    let rows: Vec<f64> = (0..gh).map(|r| r as f64).collect();
    let cols: Vec<f64> = (0..gw).map(|c| c as f64).collect();
    let er = sinusoidal_embedding(&rows, half, 1.0, DType::F64, dev)?;
    let ec = sinusoidal_embedding(&cols, dim - half, 1.0, DType::F64, dev)?;
    let er = er.unsqueeze(1)?.broadcast_as((gh, gw, half))?;
    let ec = ec.unsqueeze(0)?.broadcast_as((gh, gw, dim - half))?;
    Tensor::cat(&[er, ec], 2)?.reshape((gh * gw, dim))?.to_dtype(dtype)
}

#[derive(Debug, Clone)]
struct EncLevel {
    blocks: Vec<ResBlock>,
    aft: Option<Aft>,
    attn: Option<CrossAttnBlock>,
    down: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct DecLevel {
    blocks: Vec<ResBlock>,
    attn: Option<CrossAttnBlock>,
    up: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct Decoder {
    // deepest level first
    levels: Vec<DecLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

/// The denoising network. Parameters live in the [`ParamStore`] it was
/// built from.
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    store: ParamStore,
    dtype: DType,
    device: Device,
    time1: Linear,
    time2: Linear,
    extractor: PromptExtractor,
    input: Conv2d,
    enc: Vec<EncLevel>,
    mid1: ResBlock,
    mid_attn: CrossAttnBlock,
    mid2: ResBlock,
    dec_f: Decoder,
    dec_eps: Decoder,
}

struct Probe {
    on: bool,
}

impl Probe {
    fn check(&self, t: &Tensor, block: impl FnOnce() -> String) -> Result<()> {
        if !self.on {
            return Ok(());
        }
        let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if v.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(BackboneError::NonFiniteActivation { block: block() })
        }
    }
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let root = store.root();
        let g = cfg.groups;
        let td = cfg.time_dim();
        let levels = cfg.channel_mults.len();
        let in_ch = cfg.latent_channels + if cfg.prompt_concat { PROMPT_CHANNELS } else { 0 };

        let mut enc = Vec::with_capacity(levels);
        let mut ch = cfg.base_width;
        for l in 0..levels {
            let p = root.pp("enc").pp(l);
            let w = cfg.width(l);
            let mut blocks = Vec::with_capacity(cfg.res_blocks);
            for i in 0..cfg.res_blocks {
                blocks.push(ResBlock::new(&p.pp(format!("res{i}")), ch, w, td, g)?);
                ch = w;
            }
            let side = cfg.latent_size >> l;
            let aft = if cfg.aft_enabled && cfg.aft_levels.contains(&l) {
                Some(Aft::new(&p.pp("aft"), w, side, side)?)
            } else {
                None
            };
            let attn = if cfg.attention_levels.contains(&l) {
                Some(CrossAttnBlock::new(&p.pp("attn"), w, cfg.prompt_embed_dim, g)?)
            } else {
                None
            };
            let down = if l + 1 < levels {
                Some(Conv2d::new(&p.pp("down"), w, w, 3, 2)?)
            } else {
                None
            };
            enc.push(EncLevel { blocks, aft, attn, down });
        }
        let deep = cfg.width(levels - 1);
        let mid = root.pp("mid");
        let decoder = |name: &str, out_ch: usize| -> Result<Decoder> {
            let p = root.pp(name);
            let mut dl = Vec::with_capacity(levels);
            let mut ch = deep;
            for l in (0..levels).rev() {
                let q = p.pp(l);
                let w = cfg.width(l);
                let mut blocks = Vec::with_capacity(cfg.res_blocks);
                for i in 0..cfg.res_blocks {
                    let c_in = if i == 0 { ch + w } else { w };
                    blocks.push(ResBlock::new(&q.pp(format!("res{i}")), c_in, w, td, g)?);
                }
                ch = w;
                let attn = if cfg.attention_levels.contains(&l) {
                    Some(CrossAttnBlock::new(&q.pp("attn"), w, cfg.prompt_embed_dim, g)?)
                } else {
                    None
                };
                let up = if l > 0 {
                    let next = cfg.width(l - 1);
                    let conv = Conv2d::new(&q.pp("up"), w, next, 3, 1)?;
                    ch = next;
                    Some(conv)
                } else {
                    None
                };
                dl.push(DecLevel { blocks, attn, up });
            }
            Ok(Decoder {
                levels: dl,
                out_norm: GroupNorm::new(&p.pp("out_norm"), cfg.base_width * cfg.channel_mults[0], g)?,
                out_conv: Conv2d::with_init(
                    &p.pp("out"),
                    cfg.width(0),
                    out_ch,
                    3,
                    1,
                    Init::FanIn { gain: 0.5 },
                )?,
            })
        };
        Ok(Self {
            store: store.clone(),
            dtype: store.dtype(),
            device: store.device().clone(),
            time1: Linear::new(&root.pp("time1"), cfg.base_width, td)?,
            time2: Linear::new(&root.pp("time2"), td, td)?,
            extractor: PromptExtractor::new(&root.pp("prompt"), cfg.prompt_stride, cfg.prompt_embed_dim)?,
            input: Conv2d::new(&root.pp("input"), in_ch, cfg.base_width, 3, 1)?,
            mid1: ResBlock::new(&mid.pp("res0"), deep, deep, td, g)?,
            mid_attn: CrossAttnBlock::new(&mid.pp("attn"), deep, cfg.prompt_embed_dim, g)?,
            mid2: ResBlock::new(&mid.pp("res1"), deep, deep, td, g)?,
            dec_f: decoder("dec_f", cfg.f_channels())?,
            dec_eps: decoder("dec_eps", cfg.latent_channels)?,
            enc,
            cfg,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Copy of every weight, keyed by path.
    pub fn params(&self) -> Result<std::collections::BTreeMap<String, Tensor>> {
        Ok(self.store.snapshot()?)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Prompt tokens `[B, M, d_c]` for prompts `[B, 3, N, N]`.
    pub fn encode_prompt(&self, prompt: &Tensor) -> Result<Tensor> {
        Ok(self.extractor.forward(&prompt.to_dtype(self.dtype)?)?)
    }

    /// `(f̂, ε̂)` for latents `z: [B, C, h, w]`, times `t` (one per sample)
    /// and prompts `[B, 3, N, N]`.
    pub fn forward(&self, z: &Tensor, t: &[f64], prompt: &Tensor) -> Result<(Tensor, Tensor)> {
        self.run(z, t, prompt, &Probe { on: false })
    }

    /// [`Backbone::forward`] that reports the first block producing a
    /// non-finite activation.
    pub fn forward_checked(&self, z: &Tensor, t: &[f64], prompt: &Tensor) -> Result<(Tensor, Tensor)> {
        self.run(z, t, prompt, &Probe { on: true })
    }

    fn check_inputs(&self, z: &Tensor, t: &[f64], prompt: &Tensor) -> Result<()> {
        let (b, c, h, w) = z.dims4()?;
        let s = self.cfg.latent_size;
        if c != self.cfg.latent_channels || h != s || w != s || t.len() != b {
            return Err(BackboneError::ShapeMismatch {
                expected: vec![t.len(), self.cfg.latent_channels, s, s],
                actual: z.dims().to_vec(),
            });
        }
        let n = self.cfg.image_size();
        if prompt.dims() != [b, PROMPT_CHANNELS, n, n] {
            return Err(BackboneError::ShapeMismatch {
                expected: vec![b, PROMPT_CHANNELS, n, n],
                actual: prompt.dims().to_vec(),
            });
        }
        Ok(())
    }

    fn run(&self, z: &Tensor, t: &[f64], prompt: &Tensor, probe: &Probe) -> Result<(Tensor, Tensor)> {
        self.check_inputs(z, t, prompt)?;
        let z = z.to_dtype(self.dtype)?;
        let prompt = prompt.to_dtype(self.dtype)?;
        let temb = sinusoidal_embedding(t, self.cfg.base_width, 1000.0, self.dtype, &self.device)?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;
        probe.check(&temb, || "time".into())?;
        let ctx = self.extractor.forward(&prompt)?;
        probe.check(&ctx, || "prompt".into())?;

        let x = if self.cfg.prompt_concat {
            let pooled = avg_pool(&prompt, self.cfg.spatial_factor)?;
            Tensor::cat(&[&z, &pooled], 1)?
        } else {
            z
        };
        let mut h = self.input.forward(&x)?;
        probe.check(&h, || "input".into())?;
        let mut skips = Vec::with_capacity(self.enc.len());
        for (l, level) in self.enc.iter().enumerate() {
            for (i, b) in level.blocks.iter().enumerate() {
                h = b.forward(&h, &temb)?;
                probe.check(&h, || format!("enc{l}.res{i}"))?;
            }
            if let Some(a) = &level.aft {
                h = a.forward(&h)?;
                probe.check(&h, || format!("enc{l}.aft"))?;
            }
            if let Some(a) = &level.attn {
                h = a.forward(&h, &ctx)?;
                probe.check(&h, || format!("enc{l}.attn"))?;
            }
            skips.push(h.clone());
            if let Some(d) = &level.down {
                h = d.forward(&h)?;
                probe.check(&h, || format!("enc{l}.down"))?;
            }
        }
        h = self.mid1.forward(&h, &temb)?;
        h = self.mid_attn.forward(&h, &ctx)?;
        h = self.mid2.forward(&h, &temb)?;
        probe.check(&h, || "mid".into())?;

        let f = self.decode(&self.dec_f, "dec_f", &h, &skips, &temb, &ctx, probe)?;
        let eps = self.decode(&self.dec_eps, "dec_eps", &h, &skips, &temb, &ctx, probe)?;
        Ok((f, eps))
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        dec: &Decoder,
        name: &str,
        h: &Tensor,
        skips: &[Tensor],
        temb: &Tensor,
        ctx: &Tensor,
        probe: &Probe,
    ) -> Result<Tensor> {
        let mut h = h.clone();
        let levels = skips.len();
        for (k, level) in dec.levels.iter().enumerate() {
            let l = levels - 1 - k;
            for (i, b) in level.blocks.iter().enumerate() {
                if i == 0 {
                    h = Tensor::cat(&[&h, &skips[l]], 1)?;
                }
                h = b.forward(&h, temb)?;
                probe.check(&h, || format!("{name}{l}.res{i}"))?;
            }
            if let Some(a) = &level.attn {
                h = a.forward(&h, ctx)?;
                probe.check(&h, || format!("{name}{l}.attn"))?;
            }
            if let Some(u) = &level.up {
                h = u.forward(&upsample2x(&h)?)?;
                probe.check(&h, || format!("{name}{l}.up"))?;
            }
        }
        let out = dec.out_conv.forward(&dec.out_norm.forward_silu(&h)?)?;
        probe.check(&out, || format!("{name}.out"))?;
        Ok(out)
    }

    /// Single-sample convenience over ndarray inputs.
    pub fn predict(&self, z_t: &Array3<f64>, t: f64, prompt: &PromptTensor) -> Result<PredictionPair> {
        let mut out = self.predict_batch(std::slice::from_ref(z_t), t, &[prompt])?;
        Ok(out.remove(0))
    }

    pub fn predict_batch(&self, z_t: &[Array3<f64>], t: f64, prompts: &[&PromptTensor]) -> Result<Vec<PredictionPair>> {
        if z_t.len() != prompts.len() {
            return Err(BackboneError::ShapeMismatch {
                expected: vec![z_t.len()],
                actual: vec![prompts.len()],
            });
        }
        let z = stack3(z_t, &self.device)?;
        let p = stack_generic(prompts.iter().map(|p| p.channels()), prompts.len(), &self.device)?;
        let ts = vec![t; z_t.len()];
        let (f, e) = self.forward_checked(&z, &ts, &p)?;
        let f = unstack(&f)?;
        let e = unstack(&e)?;
        Ok(f.into_iter()
            .zip(e)
            .map(|(f_hat, eps_hat)| PredictionPair { f_hat, eps_hat })
            .collect())
    }
}

/// Stack `C×H×W` arrays into a `[B, C, H, W]` f64 tensor.
pub fn stack3<A>(arrays: &[A], dev: &Device) -> candle_core::Result<Tensor>
where
    A: std::borrow::Borrow<Array3<f64>>,
{
    stack_generic(arrays.iter().map(|a| a.borrow()), arrays.len(), dev)
}

fn stack_generic<'a, T, I>(arrays: I, n: usize, dev: &Device) -> candle_core::Result<Tensor>
where
    T: Copy + Into<f64> + 'a,
    I: Iterator<Item = &'a Array3<T>>,
{
    let mut dims = (0, 0, 0);
    let mut data = Vec::new();
    for a in arrays {
        dims = a.dim();
        data.extend(a.iter().map(|v| (*v).into()));
    }
    Tensor::from_vec(data, (n, dims.0, dims.1, dims.2), dev)
}

/// Inverse of [`stack3`].
pub fn unstack(t: &Tensor) -> candle_core::Result<Vec<Array3<f64>>> {
    let (b, c, h, w) = t.dims4()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let arr = Array4::from_shape_vec((b, c, h, w), v).expect("dims match");
    Ok(arr.outer_iter().map(|a| a.to_owned()).collect())
}

impl Predictor for Backbone {
    fn latent_dims(&self, _prompt_size: usize) -> (usize, usize, usize) {
        let s = self.cfg.latent_size;
        (self.cfg.latent_channels, s, s)
    }

    fn spatial_factor(&self) -> usize {
        self.cfg.spatial_factor
    }

    fn drift_kind(&self) -> DriftKind {
        self.cfg.drift_kind
    }

    fn predict(&self, z_t: &[Array3<f64>], t: f64, prompts: &[&PromptTensor]) -> std::result::Result<Vec<PredictionPair>, DiffusionError> {
        self.predict_batch(z_t, t, prompts)
            .map_err(|e| DiffusionError::Predictor(e.to_string()))
    }
}
