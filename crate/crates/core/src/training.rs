//! Seeded training harness shared by the autoencoder and the denoiser:
//! per-step RNG streams, AdamW with cosine decay, checkpoints, a
//! `step,lr,loss` log, and exact resume.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Zip};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{stack3, Backbone, BackboneConfig, BackboneError};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::diffusion::{forward_diffuse, solve_drift_ground_truth, standard_normal, DriftKind};
use crate::domain::PromptTensor;
use crate::ingest::{build_prompt, Sample};
use crate::nn::optim::{AdamW, AdamWConfig, CosineDecay};
use crate::nn::{params_hash, ParamStore};
use crate::vae::{stack_gray, Vae, VaeConfig, VaeError};

pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_ECHO: &str = "config.json";
pub const FINAL_CHECKPOINT: &str = "final.rmck";
pub const DIVERGED_CHECKPOINT: &str = "diverged.rmck";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("loss became non-finite at step {step}; state saved to {}", checkpoint.display())]
    DivergedLoss { step: u64, checkpoint: PathBuf },
    #[error("checkpoint config hash {found} does not match the current config {expected}")]
    ResumeMismatch { expected: String, found: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Diffusion steps; training times are drawn from `{1..T}/T`.
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub decay: LrDecay,
    pub max_steps: usize,
    pub seed: u64,
    pub drift_kind: DriftKind,
    /// Save every this many steps; 0 saves only the final state.
    pub checkpoint_every: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            batch_size: 8,
            lr_start: 5e-5,
            lr_end: 5e-6,
            decay: LrDecay::Cosine,
            max_steps: 10_000,
            seed: 0,
            drift_kind: DriftKind::Constant,
            checkpoint_every: 0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return bad("need lr_start >= lr_end > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.train_steps == 0 {
            return bad("train_steps must be at least 1");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineDecay {
        CosineDecay {
            start: self.lr_start,
            end: self.lr_end,
            total_steps: self.max_steps,
        }
    }

    /// Learning rate used at 1-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        self.schedule().lr(step.saturating_sub(1) as usize)
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Per-step generator: the same `(seed, step)` always yields the same
/// stream, independent of how the run got there.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Distinct sample indices when the batch fits the dataset, otherwise
/// drawn with replacement.
pub fn batch_indices<R: Rng>(rng: &mut R, len: usize, batch: usize) -> Vec<usize> {
    if batch <= len {
        index::sample(rng, len, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Squared-L2 terms averaged over elements:
/// `mean((ε - ε̂)²) + mean((f - f̂)²)`.
pub fn diffusion_loss(
    eps: &[Array3<f64>],
    eps_hat: &[Array3<f64>],
    f: &[Array3<f64>],
    f_hat: &[Array3<f64>],
) -> Result<f64> {
    fn term(a: &[Array3<f64>], b: &[Array3<f64>]) -> Result<f64> {
        if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.dim() != y.dim()) {
            return Err(TrainError::ShapeMismatch {
                expected: a.first().map(|x| x.shape().to_vec()).unwrap_or_default(),
                actual: b.first().map(|x| x.shape().to_vec()).unwrap_or_default(),
            });
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for (x, y) in a.iter().zip(b) {
            Zip::from(x).and(y).for_each(|p, q| sum += (p - q) * (p - q));
            count += x.len();
        }
        Ok(if count == 0 { 0.0 } else { sum / count as f64 })
    }
    Ok(term(eps, eps_hat)? + term(f, f_hat)?)
}

/// Tensor form of [`diffusion_loss`] used for backpropagation.
pub fn diffusion_loss_tensor(eps: &Tensor, eps_hat: &Tensor, f: &Tensor, f_hat: &Tensor) -> Result<Tensor> {
    let a = (eps - eps_hat)?.sqr()?.mean_all()?;
    let b = (f - f_hat)?.sqr()?.mean_all()?;
    Ok((a + b)?)
}

/// A model plus data that yields a differentiable loss per step.
pub trait Objective {
    /// Checkpoint kind tag.
    fn kind(&self) -> &'static str;
    fn store(&self) -> &ParamStore;
    fn dataset_len(&self) -> usize;
    /// Model description echoed into checkpoints and hashed for resume.
    fn model_json(&self) -> serde_json::Value;
    fn loss(&self, batch: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Tensor>;
    /// Extra tensors stored with every checkpoint.
    fn attachments(&self) -> Result<BTreeMap<String, Tensor>> {
        Ok(BTreeMap::new())
    }
}

/// Where and how far to run.
#[derive(Debug, Clone, Default)]
pub struct RunControl {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) after this step, as if interrupted.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

impl LogRecord {
    pub fn line(&self) -> String {
        format!("{},{},{}", self.step, self.lr, self.loss)
    }

    pub fn parse(line: &str) -> Option<Self> {
        let mut it = line.split(',');
        let rec = Self {
            step: it.next()?.trim().parse().ok()?,
            lr: it.next()?.trim().parse().ok()?,
            loss: it.next()?.trim().parse().ok()?,
        };
        it.next().is_none().then_some(rec)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Records appended by this invocation.
    pub records: Vec<LogRecord>,
    pub last_step: u64,
    pub checkpoint: PathBuf,
    pub interrupted: bool,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// SHA-256 over the kind, model description and training config.
pub fn config_hash(kind: &str, model: &serde_json::Value, cfg: &TrainConfig) -> String {
    let doc = serde_json::json!({ "kind": kind, "model": model, "train": cfg });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

fn build_checkpoint<O: Objective + ?Sized>(obj: &O, cfg: &TrainConfig, opt: &AdamW, step: u64, hash: &str) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(
        obj.kind(),
        serde_json::json!({ "model": obj.model_json(), "train": cfg }),
    );
    ck.meta.insert("step".into(), step.to_string());
    ck.meta.insert("config_hash".into(), hash.into());
    let (opt_steps, state) = opt.state();
    ck.meta.insert("opt_steps".into(), opt_steps.to_string());
    let params = obj.store().snapshot()?;
    ck.meta.insert("params_hash".into(), params_hash(&params)?);
    ck.insert_section("param.", &params);
    ck.insert_section("opt.", &state);
    ck.insert_section("", &obj.attachments()?);
    Ok(ck)
}

fn restore<O: Objective + ?Sized>(obj: &O, ck: &Checkpoint, cfg: &TrainConfig) -> Result<(AdamW, u64)> {
    let params = ck.section("param.");
    for (name, var) in obj.store().vars() {
        let t = params
            .get(&name)
            .ok_or_else(|| CheckpointError::Malformed(format!("checkpoint lacks parameter {name}")))?;
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    let step = ck.meta_u64("step")?;
    let opt = AdamW::restore(cfg.adamw(), ck.meta_u64("opt_steps")?, &ck.section("opt."));
    Ok((opt, step))
}

/// One optimizer step: loss, backward, AdamW update. Returns the loss.
pub fn train_step<O: Objective + ?Sized>(obj: &O, opt: &mut AdamW, cfg: &TrainConfig, step: u64) -> Result<f64> {
    let mut rng = step_rng(cfg.seed, step);
    let batch = batch_indices(&mut rng, obj.dataset_len(), cfg.batch_size);
    let loss = obj.loss(&batch, cfg, &mut rng)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = loss.backward()?;
    opt.step(&obj.store().vars(), &grads, cfg.lr(step))?;
    Ok(value)
}

fn read_log(path: &Path, keep_through: u64) -> Result<Vec<String>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    Ok(text
        .lines()
        .filter(|l| LogRecord::parse(l).is_some_and(|r| r.step <= keep_through))
        .map(str::to_string)
        .collect())
}

/// Runs (or resumes) training to `cfg.max_steps`.
pub fn run_training<O: Objective + ?Sized>(obj: &O, cfg: &TrainConfig, control: &RunControl) -> Result<TrainReport> {
    cfg.validate()?;
    if obj.dataset_len() == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let out = &control.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let model = obj.model_json();
    let hash = config_hash(obj.kind(), &model, cfg);
    let echo = out.join(CONFIG_ECHO);
    let echo_doc = serde_json::json!({ "kind": obj.kind(), "model": model, "train": cfg, "config_hash": hash });
    fs::write(&echo, serde_json::to_string_pretty(&echo_doc).expect("json")).map_err(io_err(&echo))?;

    let (mut opt, start) = match &control.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.expect_kind(obj.kind())?;
            let found = ck.meta.get("config_hash").cloned().unwrap_or_default();
            if found != hash {
                return Err(TrainError::ResumeMismatch { expected: hash, found });
            }
            restore(obj, &ck, cfg)?
        }
        None => (AdamW::new(cfg.adamw()), 0),
    };

    let log_path = out.join(LOG_FILE);
    let kept = read_log(&log_path, start)?;
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    for line in &kept {
        writeln!(log, "{line}").map_err(io_err(&log_path))?;
    }

    let mut records = Vec::new();
    let mut step = start;
    let end = cfg.max_steps as u64;
    while step < end {
        step += 1;
        let loss = train_step(obj, &mut opt, cfg, step)?;
        if !loss.is_finite() {
            let path = out.join(DIVERGED_CHECKPOINT);
            build_checkpoint(obj, cfg, &opt, step - 1, &hash)?.save(&path)?;
            return Err(TrainError::DivergedLoss { step, checkpoint: path });
        }
        let rec = LogRecord {
            step,
            lr: cfg.lr(step),
            loss,
        };
        writeln!(log, "{}", rec.line()).map_err(io_err(&log_path))?;
        records.push(rec);
        log::debug!("step {step} loss {loss:.6}");
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every as u64 == 0 && step < end {
            build_checkpoint(obj, cfg, &opt, step, &hash)?.save(&out.join(format!("ckpt-{step:08}.rmck")))?;
        }
        if control.stop_after == Some(step) && step < end {
            let path = out.join(format!("ckpt-{step:08}.rmck"));
            build_checkpoint(obj, cfg, &opt, step, &hash)?.save(&path)?;
            log.flush().map_err(io_err(&log_path))?;
            return Ok(TrainReport {
                records,
                last_step: step,
                checkpoint: path,
                interrupted: true,
            });
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    let path = out.join(FINAL_CHECKPOINT);
    build_checkpoint(obj, cfg, &opt, step, &hash)?.save(&path)?;
    Ok(TrainReport {
        records,
        last_step: step,
        checkpoint: path,
        interrupted: false,
    })
}

/// Reads a `step,lr,loss` log.
pub fn read_log_records(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().filter_map(LogRecord::parse).collect())
}

/// Autoencoder objective: L1 reconstruction plus weighted KL on gray maps.
pub struct VaeObjective {
    vae: Vae,
    store: ParamStore,
    grays: Vec<Array2<f64>>,
}

impl VaeObjective {
    pub fn new(cfg: VaeConfig, grays: Vec<Array2<f64>>, init_seed: u64) -> Result<Self> {
        let store = ParamStore::seeded(init_seed, DType::F32, &Device::Cpu);
        let vae = Vae::new(cfg, &store)?;
        if let Some(g) = grays.iter().find(|g| g.dim() != grays[0].dim()) {
            return Err(TrainError::ShapeMismatch {
                expected: grays[0].shape().to_vec(),
                actual: g.shape().to_vec(),
            });
        }
        Ok(Self { vae, store, grays })
    }

    pub fn vae(&self) -> &Vae {
        &self.vae
    }

    /// Mean loss over `maps` with zero posterior noise.
    pub fn eval_loss(&self, maps: &[&Array2<f64>]) -> Result<f64> {
        let x = stack_gray(maps, self.vae.device())?;
        let post = self.vae.posterior(&x)?;
        let noise = post.mean.zeros_like()?;
        let (loss, _, _) = self.vae.loss(&x, &noise)?;
        Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    /// Frozen copy of the trained weights.
    pub fn frozen(&self) -> Result<Vae> {
        let store = ParamStore::from_tensors(self.store.snapshot()?, DType::F32, &Device::Cpu, false);
        Ok(Vae::new(self.vae.config().clone(), &store)?)
    }
}

impl Objective for VaeObjective {
    fn kind(&self) -> &'static str {
        "vae"
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn dataset_len(&self) -> usize {
        self.grays.len()
    }

    fn model_json(&self) -> serde_json::Value {
        serde_json::json!({ "vae": self.vae.config() })
    }

    fn loss(&self, batch: &[usize], _cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let maps: Vec<&Array2<f64>> = batch.iter().map(|&i| &self.grays[i]).collect();
        let x = stack_gray(&maps, self.vae.device())?;
        let n = self.grays[0].dim().0 / self.vae.config().downsample_factor;
        let noise: Vec<Array3<f64>> = batch
            .iter()
            .map(|_| standard_normal(rng, (self.vae.config().z_channels, n, n)))
            .collect();
        let noise = stack3(&noise, self.vae.device())?;
        let (loss, _, _) = self.vae.loss(&x, &noise)?;
        Ok(loss)
    }
}

/// Frozen autoencoder weights and their identity.
pub fn vae_from_checkpoint(ck: &Checkpoint, prefix: &str, cfg_json: &serde_json::Value) -> Result<Vae> {
    let cfg: VaeConfig = serde_json::from_value(cfg_json.clone())
        .map_err(|e| CheckpointError::Malformed(format!("autoencoder config: {e}")))?;
    let store = ParamStore::from_tensors(ck.section(prefix), DType::F32, &Device::Cpu, false);
    let vae = Vae::new(cfg, &store)?;
    if let Some(extra) = store.unused().first() {
        return Err(CheckpointError::Malformed(format!("unexpected tensor {prefix}{extra}")).into());
    }
    Ok(vae)
}

/// Loads a trained autoencoder from a `vae` checkpoint.
pub fn load_vae(path: &Path) -> Result<Vae> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind("vae")?;
    vae_from_checkpoint(&ck, "param.", &ck.config["model"]["vae"])
}

/// Cached posterior of one training map.
#[derive(Debug, Clone)]
struct LatentStats {
    mean: Array3<f64>,
    std: Array3<f64>,
}

/// One diffusion training batch, all in f64.
#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    pub indices: Vec<usize>,
    pub t: Vec<f64>,
    pub z_t: Vec<Array3<f64>>,
    pub eps: Vec<Array3<f64>>,
    /// Drift targets stacked as in `DriftFamily::to_target`.
    pub f: Vec<Array3<f64>>,
}

/// Denoiser objective over latents of a frozen autoencoder.
pub struct DiffusionObjective {
    backbone: Backbone,
    store: ParamStore,
    vae: Vae,
    vae_hash: String,
    latents: Vec<LatentStats>,
    prompts: Vec<PromptTensor>,
    latent_scale: f64,
}

impl DiffusionObjective {
    /// Encodes every sample once; the autoencoder is never updated.
    pub fn new(cfg: BackboneConfig, vae: Vae, samples: &[Sample], init_seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let store = ParamStore::seeded(init_seed, DType::F32, &Device::Cpu);
        let backbone = Backbone::new(cfg, &store)?;
        let vae_hash = params_hash(&vae.params()?)?;
        let mut latents = Vec::with_capacity(samples.len());
        for s in samples {
            let (n, _) = s.gray.dim();
            let x = stack_gray(&[&s.gray], vae.device())?;
            let post = vae.posterior(&x)?;
            let to_arr = |t: &Tensor| -> Result<Array3<f64>> { Ok(crate::backbone::unstack(t)?.remove(0)) };
            let stats = LatentStats {
                mean: to_arr(&post.mean)?,
                std: to_arr(&post.std()?)?,
            };
            if stats.mean.dim().1 * vae.config().downsample_factor != n {
                return Err(TrainError::ShapeMismatch {
                    expected: vec![n],
                    actual: vec![stats.mean.dim().1 * vae.config().downsample_factor],
                });
            }
            latents.push(stats);
        }
        let count: usize = latents.iter().map(|l| l.mean.len()).sum();
        let sq: f64 = latents.iter().flat_map(|l| l.mean.iter()).map(|v| v * v).sum();
        let rms = (sq / count as f64).sqrt();
        let latent_scale = if rms > 1e-8 { 1.0 / rms } else { 1.0 };
        Ok(Self {
            backbone,
            store,
            vae,
            vae_hash,
            latents,
            prompts: samples.iter().map(|s| build_prompt(&s.scene)).collect(),
            latent_scale,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn vae(&self) -> &Vae {
        &self.vae
    }

    /// Multiplier mapping autoencoder latents to unit RMS.
    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    /// Draws `t`, posterior noise, diffusion noise and drift targets.
    pub fn make_batch(&self, indices: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> DiffusionBatch {
        let mut b = DiffusionBatch {
            indices: indices.to_vec(),
            t: Vec::new(),
            z_t: Vec::new(),
            eps: Vec::new(),
            f: Vec::new(),
        };
        for &i in indices {
            let stats = &self.latents[i];
            let dim = stats.mean.dim();
            let n = rng.random_range(1..=cfg.train_steps);
            let t = n as f64 / cfg.train_steps as f64;
            let post_noise = standard_normal(rng, dim);
            let z0 = (&stats.mean + &(&stats.std * &post_noise)) * self.latent_scale;
            let eps = standard_normal(rng, dim);
            let drift = solve_drift_ground_truth(&z0, cfg.drift_kind, rng);
            let z_t = forward_diffuse(&z0, t, &eps, &drift).expect("t in (0, 1]");
            b.t.push(t);
            b.z_t.push(z_t);
            b.eps.push(eps);
            b.f.push(drift.to_target());
        }
        b
    }

    /// Network outputs for a batch as tensors.
    pub fn forward(&self, b: &DiffusionBatch) -> Result<(Tensor, Tensor)> {
        let dev = self.backbone.device();
        let z = stack3(&b.z_t, dev)?;
        let prompts: Vec<Array3<f64>> = b
            .indices
            .iter()
            .map(|&i| self.prompts[i].channels().mapv(f64::from))
            .collect();
        let p = stack3(&prompts, dev)?;
        Ok(self.backbone.forward(&z, &b.t, &p)?)
    }
}

impl Objective for DiffusionObjective {
    fn kind(&self) -> &'static str {
        "diffusion"
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn dataset_len(&self) -> usize {
        self.latents.len()
    }

    fn model_json(&self) -> serde_json::Value {
        serde_json::json!({
            "backbone": self.backbone.config(),
            "vae": self.vae.config(),
            "vae_hash": self.vae_hash,
            "latent_scale": self.latent_scale,
        })
    }

    fn loss(&self, batch: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if cfg.drift_kind != self.backbone.config().drift_kind {
            return Err(TrainError::InvalidConfig(format!(
                "training drift {:?} differs from the network's {:?}",
                cfg.drift_kind,
                self.backbone.config().drift_kind
            )));
        }
        let b = self.make_batch(batch, cfg, rng);
        let (f_hat, eps_hat) = self.forward(&b)?;
        let dev = self.backbone.device();
        let dt = self.backbone.dtype();
        let eps = stack3(&b.eps, dev)?.to_dtype(dt)?;
        let f = stack3(&b.f, dev)?.to_dtype(dt)?;
        diffusion_loss_tensor(&eps, &eps_hat, &f, &f_hat)
    }

    fn attachments(&self) -> Result<BTreeMap<String, Tensor>> {
        Ok(self
            .vae
            .params()?
            .into_iter()
            .map(|(k, v)| (format!("vae.{k}"), v))
            .collect())
    }
}

/// Trains the autoencoder on gray maps and returns frozen weights.
pub fn train_vae(
    grays: Vec<Array2<f64>>,
    vae_cfg: VaeConfig,
    cfg: &TrainConfig,
    control: &RunControl,
) -> Result<(Vae, TrainReport)> {
    if grays.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let obj = VaeObjective::new(vae_cfg, grays, cfg.seed)?;
    let report = run_training(&obj, cfg, control)?;
    Ok((obj.frozen()?, report))
}
