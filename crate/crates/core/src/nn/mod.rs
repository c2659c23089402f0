//! Small neural-network toolkit on top of candle tensors: a named parameter
//! store with order-independent seeded initialization, the layers the models
//! need, and an AdamW optimizer whose state can be checkpointed.

pub mod conv;
mod norm;
pub mod optim;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Result, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub use conv::ConvGeometry;

/// Initialization rule for a fresh parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    /// Uniform on `±gain / sqrt(fan_in)`, fan-in taken from dims `1..`.
    FanIn { gain: f64 },
}

enum Source {
    Seeded(u64),
    Loaded(BTreeMap<String, Tensor>),
}

struct StoreInner {
    source: Source,
    params: BTreeMap<String, Var>,
}

/// Owns every parameter of one model, keyed by dotted path.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
    device: Device,
    trainable: bool,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.len())
            .field("dtype", &self.dtype)
            .field("trainable", &self.trainable)
            .finish()
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the path, mixed with the store seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    /// Fresh parameters drawn from a seed. Each value depends only on the
    /// seed and the parameter path, never on construction order.
    pub fn seeded(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                source: Source::Seeded(seed),
                params: BTreeMap::new(),
            })),
            dtype,
            device: device.clone(),
            trainable: true,
        }
    }

    /// Parameters taken from `tensors`; `trainable` decides whether gradients
    /// are tracked.
    pub fn from_tensors(
        tensors: BTreeMap<String, Tensor>,
        dtype: DType,
        device: &Device,
        trainable: bool,
    ) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                source: Source::Loaded(tensors),
                params: BTreeMap::new(),
            })),
            dtype,
            device: device.clone(),
            trainable,
        }
    }

    pub fn root(&self) -> ParamPath {
        ParamPath {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registered parameters in path order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.inner
            .lock()
            .unwrap()
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Detached copies of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.inner
            .lock()
            .unwrap()
            .params
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_detached_tensor().copy()?)))
            .collect()
    }

    /// Loaded tensors that no layer asked for.
    pub fn unused(&self) -> Vec<String> {
        let inner = self.inner.lock().unwrap();
        match &inner.source {
            Source::Seeded(_) => Vec::new(),
            Source::Loaded(map) => map
                .keys()
                .filter(|k| !inner.params.contains_key(*k))
                .cloned()
                .collect(),
        }
    }

    fn get(&self, name: String, shape: Shape, init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(v) = inner.params.get(&name) {
            if v.shape() != &shape {
                candle_core::bail!("parameter {name} requested twice with different shapes");
            }
            return Ok(self.expose(v));
        }
        let tensor = match &inner.source {
            Source::Seeded(seed) => init_tensor(*seed, &name, &shape, init, self.dtype, &self.device)?,
            Source::Loaded(map) => {
                let t = map
                    .get(&name)
                    .ok_or_else(|| candle_core::Error::Msg(format!("missing parameter {name}")))?;
                if t.shape() != &shape {
                    candle_core::bail!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        t.dims(),
                        shape.dims()
                    );
                }
                t.to_dtype(self.dtype)?.to_device(&self.device)?.copy()?
            }
        };
        let var = Var::from_tensor(&tensor)?;
        let out = self.expose(&var);
        inner.params.insert(name, var);
        Ok(out)
    }

    fn expose(&self, v: &Var) -> Tensor {
        if self.trainable {
            v.as_tensor().clone()
        } else {
            v.as_detached_tensor()
        }
    }
}

fn init_tensor(
    seed: u64,
    name: &str,
    shape: &Shape,
    init: Init,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n = shape.elem_count();
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    let data: Vec<f64> = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal { std } => (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        Init::FanIn { gain } => {
            let fan_in: usize = shape.dims().iter().skip(1).product::<usize>().max(1);
            let bound = gain / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        }
    };
    Tensor::from_vec(data, shape.clone(), device)?.to_dtype(dtype)
}

/// A position in the parameter namespace.
#[derive(Clone, Debug)]
pub struct ParamPath {
    store: ParamStore,
    prefix: String,
}

impl ParamPath {
    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Self {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.get(full, shape.into(), init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// SHA-256 over names, shapes and little-endian values, in path order.
pub fn params_hash(params: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in params {
        hasher.update(name.as_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: &ParamPath, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: p.get((d_out, d_in), "weight", Init::FanIn { gain: 1.0 })?,
            bias: p.get(d_out, "bias", Init::Zeros)?,
        })
    }

    /// Linear map without bias.
    pub fn no_bias(p: &ParamPath, d_in: usize, d_out: usize) -> Result<Tensor> {
        p.get((d_out, d_in), "weight", Init::FanIn { gain: 1.0 })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    geo: ConvGeometry,
}

impl Conv2d {
    pub fn new(p: &ParamPath, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::with_init(p, c_in, c_out, kernel, stride, Init::FanIn { gain: 1.0 })
    }

    pub fn with_init(
        p: &ParamPath,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: p.get((c_out, c_in, kernel, kernel), "weight", init)?,
            bias: p.get(c_out, "bias", Init::Zeros)?,
            geo: ConvGeometry {
                stride,
                padding: kernel / 2,
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dim(0)?;
        conv::conv2d(x, &self.weight, self.geo)?.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(p: &ParamPath, channels: usize, groups: usize) -> Result<Self> {
        let groups = groups.min(channels).max(1);
        if channels % groups != 0 {
            candle_core::bail!("{channels} channels do not split into {groups} groups");
        }
        Ok(Self {
            weight: p.get(channels, "weight", Init::Ones)?,
            bias: p.get(channels, "bias", Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    fn op(&self, silu: bool) -> norm::GroupNormOp {
        norm::GroupNormOp {
            groups: self.groups,
            eps: self.eps,
            silu,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        norm::group_norm(x, &self.weight, &self.bias, self.op(false))
    }

    /// `silu(norm(x))` in one pass.
    pub fn forward_silu(&self, x: &Tensor) -> Result<Tensor> {
        norm::group_norm(x, &self.weight, &self.bias, self.op(true))
    }
}

/// Nearest-neighbour 2x upsampling via broadcasting, so it has a gradient.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))
}

/// Average pooling by an integer factor.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h / factor, factor, w / factor, factor))?
        .mean(5)?
        .mean(3)
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

/// Sinusoidal embedding of continuous times `t` scaled by `scale`,
/// `[sin(t s w_0) .. sin(t s w_{d/2-1}), cos(..)]` with geometric frequencies.
pub fn sinusoidal_embedding(t: &[f64], dim: usize, scale: f64, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| ti * scale * f).collect();
        data.extend(args.iter().map(|a| a.sin()));
        data.extend(args.iter().map(|a| a.cos()));
        data.extend(std::iter::repeat(0.0).take(dim - 2 * half));
    }
    Tensor::from_vec(data, (t.len(), dim), device)?.to_dtype(dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_order_independent() {
        let dev = Device::Cpu;
        let a = ParamStore::seeded(5, DType::F64, &dev);
        let b = ParamStore::seeded(5, DType::F64, &dev);
        let a1 = a.root().pp("x").get((3, 4), "w", Init::Normal { std: 1.0 }).unwrap();
        let _ = b.root().pp("y").get(7, "w", Init::Normal { std: 1.0 }).unwrap();
        let b1 = b.root().pp("x").get((3, 4), "w", Init::Normal { std: 1.0 }).unwrap();
        let diff = (a1 - b1).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn loaded_store_reports_missing_and_unused() {
        let dev = Device::Cpu;
        let mut map = BTreeMap::new();
        map.insert("a.w".to_string(), Tensor::zeros(2, DType::F32, &dev).unwrap());
        map.insert("b.w".to_string(), Tensor::zeros(2, DType::F32, &dev).unwrap());
        let store = ParamStore::from_tensors(map, DType::F32, &dev, false);
        assert!(store.root().pp("a").get(2, "w", Init::Zeros).is_ok());
        assert!(store.root().pp("a").get(3, "v", Init::Zeros).is_err());
        assert_eq!(store.unused(), vec!["b.w".to_string()]);
    }

    #[test]
    fn upsample_and_pool_are_inverse_on_constants_per_block() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f32, 4., &dev).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let up = upsample2x(&x).unwrap();
        let v: Vec<f32> = up.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![0., 0., 1., 1., 0., 0., 1., 1., 2., 2., 3., 3., 2., 2., 3., 3.]);
        let back = avg_pool(&up, 2).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![0., 1., 2., 3.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[0f64, 3f64.ln()], [100.0, 100.0]], &dev).unwrap();
        let s = softmax_last_dim(&x).unwrap().to_vec2::<f64>().unwrap();
        assert!((s[0][0] - 0.25).abs() < 1e-15 && (s[0][1] - 0.75).abs() < 1e-15);
        assert_eq!(s[1], vec![0.5, 0.5]);
    }
}
