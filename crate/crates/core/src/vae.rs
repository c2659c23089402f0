//! KL-regularized convolutional autoencoder between `1×N×N` gray maps and
//! `3×(N/4)×(N/4)` latents.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::{stack3, unstack};
use crate::diffusion::standard_normal;
use crate::domain::{LatentTensor, LATENT_CHANNELS};
use crate::nn::{sigmoid, upsample2x, Conv2d, GroupNorm, ParamPath, ParamStore};

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("invalid autoencoder config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite activation in '{0}'")]
    NonFiniteActivation(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

type Result<T> = std::result::Result<T, VaeError>;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub z_channels: usize,
    pub embed_dim: usize,
    /// Width multipliers of the three stages at `N`, `N/2`, `N/4`.
    pub channel_mults: Vec<usize>,
    pub downsample_factor: usize,
    pub kl_weight: f64,
    pub perceptual_weight: f64,
    pub groups: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            z_channels: LATENT_CHANNELS,
            embed_dim: 128,
            channel_mults: vec![1, 2, 2],
            downsample_factor: 4,
            kl_weight: 1e-6,
            perceptual_weight: 0.0,
            groups: 8,
        }
    }
}

impl VaeConfig {
    /// Narrow variant for CPU-scale runs.
    pub fn desk() -> Self {
        Self {
            embed_dim: 8,
            channel_mults: vec![1, 2, 4],
            groups: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(VaeError::InvalidConfig(m.to_string()));
        if self.z_channels != LATENT_CHANNELS {
            return bad("z_channels must be 3");
        }
        if self.perceptual_weight != 0.0 {
            return bad("perceptual loss is not supported; perceptual_weight must be 0");
        }
        if self.embed_dim == 0 || self.groups == 0 || self.channel_mults.contains(&0) {
            return bad("widths must be positive");
        }
        if self.downsample_factor == 0 || !self.downsample_factor.is_power_of_two() {
            return bad("downsample_factor must be a power of two");
        }
        if self.channel_mults.len() != self.downsample_factor.trailing_zeros() as usize + 1 {
            return bad("one stage per resolution: channel_mults.len() == log2(downsample_factor) + 1");
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return bad("kl_weight must be finite and non-negative");
        }
        for &m in &self.channel_mults {
            let w = self.embed_dim * m;
            if w % self.groups.min(w) != 0 {
                return bad("stage widths must split into the group count");
            }
        }
        Ok(())
    }

    fn width(&self, stage: usize) -> usize {
        self.embed_dim * self.channel_mults[stage]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodeMode {
    Sample,
    Mean,
}

#[derive(Debug, Clone)]
struct Block {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl Block {
    fn new(p: &ParamPath, c_in: usize, c_out: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&p.pp("norm1"), c_in, groups)?,
            conv1: Conv2d::new(&p.pp("conv1"), c_in, c_out, 3, 1)?,
            norm2: GroupNorm::new(&p.pp("norm2"), c_out, groups)?,
            conv2: Conv2d::new(&p.pp("conv2"), c_out, c_out, 3, 1)?,
            skip: (c_in != c_out)
                .then(|| Conv2d::new(&p.pp("skip"), c_in, c_out, 1, 1))
                .transpose()?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward_silu(x)?)?;
        let h = self.conv2.forward(&self.norm2.forward_silu(&h)?)?;
        match &self.skip {
            Some(s) => s.forward(x)? + h,
            None => x + h,
        }
    }
}

/// Posterior moments of a batch: `[B, 3, h, w]` each.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl Posterior {
    pub fn std(&self) -> candle_core::Result<Tensor> {
        (&self.logvar * 0.5)?.exp()
    }

    /// `mean + std·noise`.
    pub fn sample_with(&self, noise: &Tensor) -> candle_core::Result<Tensor> {
        &self.mean + (self.std()? * noise)?
    }

    /// Per-element mean of `KL(q ‖ N(0, I))`.
    pub fn kl(&self) -> candle_core::Result<Tensor> {
        let t = ((self.mean.sqr()? + self.logvar.exp()?)? - &self.logvar)?;
        ((t - 1.0)? * 0.5)?.mean_all()
    }
}

/// Autoencoder weights and forward passes.
#[derive(Debug, Clone)]
pub struct Vae {
    cfg: VaeConfig,
    store: ParamStore,
    device: Device,
    dtype: DType,
    enc_in: Conv2d,
    enc_blocks: Vec<Block>,
    enc_down: Vec<Conv2d>,
    enc_mid: Block,
    enc_norm: GroupNorm,
    enc_out: Conv2d,
    moments: Conv2d,
    post_quant: Conv2d,
    dec_in: Conv2d,
    dec_mid: Block,
    dec_blocks: Vec<Block>,
    dec_up: Vec<Conv2d>,
    dec_norm: GroupNorm,
    dec_out: Conv2d,
}

impl Vae {
    pub fn new(cfg: VaeConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let root = store.root();
        let g = cfg.groups;
        let stages = cfg.channel_mults.len();
        let deep = cfg.width(stages - 1);
        let z = cfg.z_channels;

        let e = root.pp("encoder");
        let mut enc_blocks = Vec::with_capacity(stages);
        let mut enc_down = Vec::with_capacity(stages - 1);
        let mut ch = cfg.width(0);
        for s in 0..stages {
            let w = cfg.width(s);
            enc_blocks.push(Block::new(&e.pp(format!("block{s}")), ch, w, g)?);
            ch = w;
            if s + 1 < stages {
                enc_down.push(Conv2d::new(&e.pp(format!("down{s}")), w, w, 3, 2)?);
            }
        }

        let d = root.pp("decoder");
        let mut dec_blocks = Vec::with_capacity(stages);
        let mut dec_up = Vec::with_capacity(stages - 1);
        let mut ch = deep;
        for s in (0..stages).rev() {
            let w = cfg.width(s);
            dec_blocks.push(Block::new(&d.pp(format!("block{s}")), ch, w, g)?);
            ch = w;
            if s > 0 {
                let next = cfg.width(s - 1);
                dec_up.push(Conv2d::new(&d.pp(format!("up{s}")), w, next, 3, 1)?);
                ch = next;
            }
        }

        Ok(Self {
            store: store.clone(),
            device: store.device().clone(),
            dtype: store.dtype(),
            enc_in: Conv2d::new(&e.pp("conv_in"), 1, cfg.width(0), 3, 1)?,
            enc_blocks,
            enc_down,
            enc_mid: Block::new(&e.pp("mid"), deep, deep, g)?,
            enc_norm: GroupNorm::new(&e.pp("norm_out"), deep, g)?,
            enc_out: Conv2d::new(&e.pp("conv_out"), deep, 2 * z, 3, 1)?,
            moments: Conv2d::new(&root.pp("moments"), 2 * z, 2 * z, 1, 1)?,
            post_quant: Conv2d::new(&root.pp("post_quant"), z, z, 1, 1)?,
            dec_in: Conv2d::new(&d.pp("conv_in"), z, deep, 3, 1)?,
            dec_mid: Block::new(&d.pp("mid"), deep, deep, g)?,
            dec_blocks,
            dec_up,
            dec_norm: GroupNorm::new(&d.pp("norm_out"), cfg.width(0), g)?,
            dec_out: Conv2d::new(&d.pp("conv_out"), cfg.width(0), 1, 3, 1)?,
            cfg,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Copy of every weight, keyed by path.
    pub fn params(&self) -> Result<BTreeMap<String, Tensor>> {
        Ok(self.store.snapshot()?)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Posterior for gray maps `[B, 1, N, N]`.
    pub fn posterior(&self, x: &Tensor) -> Result<Posterior> {
        let (_, c, h, w) = x.dims4()?;
        let f = self.cfg.downsample_factor;
        if c != 1 || h != w || h % f != 0 || h == 0 {
            return Err(VaeError::ShapeMismatch {
                expected: vec![x.dim(0)?, 1, h - h % f, h - h % f],
                actual: x.dims().to_vec(),
            });
        }
        let x = x.to_dtype(self.dtype)?;
        let mut h = self.enc_in.forward(&x)?;
        for (s, b) in self.enc_blocks.iter().enumerate() {
            h = b.forward(&h)?;
            if let Some(d) = self.enc_down.get(s) {
                h = d.forward(&h)?;
            }
        }
        h = self.enc_mid.forward(&h)?;
        h = self.enc_out.forward(&self.enc_norm.forward_silu(&h)?)?;
        let m = self.moments.forward(&h)?;
        let z = self.cfg.z_channels;
        let mean = m.narrow(1, 0, z)?;
        let logvar = m.narrow(1, z, z)?.clamp(-30.0, 20.0)?;
        Ok(Posterior { mean, logvar })
    }

    /// Gray maps in `[0, 1]` from latents `[B, 3, h, w]`.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.cfg.z_channels {
            return Err(VaeError::ShapeMismatch {
                expected: vec![self.cfg.z_channels],
                actual: z.dims().to_vec(),
            });
        }
        let z = z.to_dtype(self.dtype)?;
        let mut h = self.dec_in.forward(&self.post_quant.forward(&z)?)?;
        h = self.dec_mid.forward(&h)?;
        for (s, b) in self.dec_blocks.iter().enumerate() {
            h = b.forward(&h)?;
            if let Some(u) = self.dec_up.get(s) {
                h = u.forward(&upsample2x(&h)?)?;
            }
        }
        let out = self.dec_out.forward(&self.dec_norm.forward_silu(&h)?)?;
        Ok(sigmoid(&out)?)
    }

    /// Reconstruction L1 plus weighted KL, with posterior noise `noise`.
    pub fn loss(&self, x: &Tensor, noise: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let post = self.posterior(x)?;
        let z = post.sample_with(&noise.to_dtype(self.dtype)?)?;
        let rec = (self.decode_tensor(&z)? - x.to_dtype(self.dtype)?)?.abs()?.mean_all()?;
        let kl = post.kl()?;
        let total = (&rec + (&kl * self.cfg.kl_weight)?)?;
        Ok((total, rec, kl))
    }

    /// Latent of one gray map. `Mean` is deterministic; `Sample` draws the
    /// posterior noise from `seed`.
    pub fn encode(&self, gray: &Array2<f64>, mode: EncodeMode, seed: u64) -> Result<LatentTensor> {
        let (n, m) = gray.dim();
        let x = Tensor::from_iter(gray.iter().copied(), &self.device)?.reshape((1, 1, n, m))?;
        let post = self.posterior(&x)?;
        let z = match mode {
            EncodeMode::Mean => post.mean.clone(),
            EncodeMode::Sample => {
                let dims = post.mean.dims3_tail()?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let noise = stack3(&[standard_normal(&mut rng, dims)], &self.device)?;
                post.sample_with(&noise.to_dtype(self.dtype)?)?
            }
        };
        let data = unstack(&z)?.remove(0);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VaeError::NonFiniteActivation("encoder".into()));
        }
        LatentTensor::new(data, self.cfg.downsample_factor).map_err(|e| VaeError::InvalidConfig(e.to_string()))
    }

    /// Gray map of one latent.
    pub fn decode(&self, z: &LatentTensor) -> Result<Array2<f64>> {
        Ok(self.decode_batch(std::slice::from_ref(z.data()))?.remove(0))
    }

    pub fn decode_batch(&self, zs: &[Array3<f64>]) -> Result<Vec<Array2<f64>>> {
        let z = stack3(zs, &self.device)?;
        let out = unstack(&self.decode_tensor(&z)?)?;
        Ok(out
            .into_iter()
            .map(|a| a.index_axis_move(ndarray::Axis(0), 0))
            .collect())
    }
}

trait Dims3Tail {
    fn dims3_tail(&self) -> candle_core::Result<(usize, usize, usize)>;
}

impl Dims3Tail for Tensor {
    fn dims3_tail(&self) -> candle_core::Result<(usize, usize, usize)> {
        let (_, c, h, w) = self.dims4()?;
        Ok((c, h, w))
    }
}

/// Stack gray maps into a `[B, 1, N, N]` f64 tensor.
pub fn stack_gray(maps: &[&Array2<f64>], dev: &Device) -> candle_core::Result<Tensor> {
    let (n, m) = maps.first().map(|a| a.dim()).unwrap_or((0, 0));
    let data: Vec<f64> = maps.iter().flat_map(|a| a.iter().copied()).collect();
    Tensor::from_vec(data, (maps.len(), 1, n, m), dev)
}
