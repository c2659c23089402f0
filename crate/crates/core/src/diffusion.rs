//! Decoupled diffusion on latents.
//!
//! The forward process attenuates `z0` to zero along a drift `f` with
//! `z0 + ∫₀¹ f dt = 0` while Wiener noise is added independently:
//!
//! ```text
//! z_t = z0 + F(t) + √t·ε,             F(t) = ∫₀ᵗ f dτ
//! z_{t-Δ} = z_t + F(t-Δ) - F(t) - (Δ/√t)·ε + √(Δ(t-Δ)/t)·ξ
//! ```
//!
//! For the constant family `f = -z0`, so `z_t = (1-t)·z0 + √t·ε`.
//!
//! A classic DDPM schedule is kept alongside as a reference process for
//! cross-checks.

use ndarray::{Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::domain::{LatentTensor, PromptTensor};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("time {0} is outside (0, 1]")]
    TOutOfRange(f64),
    #[error("step size {dt} is outside (0, t] for t = {t}")]
    DtOutOfRange { t: f64, dt: f64 },
    #[error("step {n} is outside 1..={steps}")]
    StepOutOfRange { n: usize, steps: usize },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("predictor returned shape {actual:?}, expected {expected:?}")]
    PredictorShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("predictor failed: {0}")]
    Predictor(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

fn check_same(a: &Array3<f64>, b: &Array3<f64>) -> Result<(), DiffusionError> {
    if a.dim() != b.dim() {
        return Err(DiffusionError::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Standard-normal array drawn from `rng`.
pub fn standard_normal<R: Rng>(rng: &mut R, dim: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftKind {
    #[default]
    Constant,
    Linear,
}

impl DriftKind {
    /// Parameter arrays per latent: `c` for constant, `(a, b)` for linear.
    pub fn param_count(self) -> usize {
        match self {
            DriftKind::Constant => 1,
            DriftKind::Linear => 2,
        }
    }
}

impl std::str::FromStr for DriftKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(DriftKind::Constant),
            "linear" => Ok(DriftKind::Linear),
            other => Err(format!("unknown drift kind '{other}' (constant|linear)")),
        }
    }
}

/// Drift `f_t` of the attenuation process, `c` or `a·t + b`.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftFamily {
    Constant { c: Array3<f64> },
    Linear { a: Array3<f64>, b: Array3<f64> },
}

impl DriftFamily {
    pub fn kind(&self) -> DriftKind {
        match self {
            DriftFamily::Constant { .. } => DriftKind::Constant,
            DriftFamily::Linear { .. } => DriftKind::Linear,
        }
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        match self {
            DriftFamily::Constant { c } => c.dim(),
            DriftFamily::Linear { a, .. } => a.dim(),
        }
    }

    /// Linear drift with slope `a`, intercept solved from the boundary
    /// condition: `a/2 + b = -z0`.
    pub fn linear_with_slope(z0: &Array3<f64>, a: Array3<f64>) -> Result<Self, DiffusionError> {
        check_same(z0, &a)?;
        let b = -z0 - &a * 0.5;
        Ok(DriftFamily::Linear { a, b })
    }

    /// `F(t) = ∫₀ᵗ f dτ`.
    pub fn integral(&self, t: f64) -> Array3<f64> {
        match self {
            DriftFamily::Constant { c } => c * t,
            DriftFamily::Linear { a, b } => a * (0.5 * t * t) + b * t,
        }
    }

    /// `F(to) - F(from)`.
    pub fn increment(&self, from: f64, to: f64) -> Array3<f64> {
        match self {
            DriftFamily::Constant { c } => c * (to - from),
            DriftFamily::Linear { a, b } => a * (0.5 * (to * to - from * from)) + b * (to - from),
        }
    }

    /// `z0 + ∫₀¹ f dt`, zero for a solved drift.
    pub fn boundary_residual(&self, z0: &Array3<f64>) -> Array3<f64> {
        z0 + &self.integral(1.0)
    }

    /// Parameters stacked on the channel axis: `[c]` or `[a; b]`.
    pub fn to_target(&self) -> Array3<f64> {
        match self {
            DriftFamily::Constant { c } => c.clone(),
            DriftFamily::Linear { a, b } => {
                ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("equal shapes")
            }
        }
    }

    /// Inverse of [`DriftFamily::to_target`].
    pub fn from_target(kind: DriftKind, target: Array3<f64>) -> Result<Self, DiffusionError> {
        let (c, _, _) = target.dim();
        if c % kind.param_count() != 0 {
            return Err(DiffusionError::ShapeMismatch {
                expected: vec![kind.param_count()],
                actual: target.shape().to_vec(),
            });
        }
        Ok(match kind {
            DriftKind::Constant => DriftFamily::Constant { c: target },
            DriftKind::Linear => {
                let half = c / 2;
                DriftFamily::Linear {
                    a: target.slice(ndarray::s![..half, .., ..]).to_owned(),
                    b: target.slice(ndarray::s![half.., .., ..]).to_owned(),
                }
            }
        })
    }
}

/// Ground-truth drift for `z0`: `c = -z0`, or `a ~ N(0, I)` and
/// `b = -z0 - a/2`.
pub fn solve_drift_ground_truth<R: Rng>(z0: &Array3<f64>, kind: DriftKind, rng: &mut R) -> DriftFamily {
    match kind {
        DriftKind::Constant => DriftFamily::Constant { c: -z0 },
        DriftKind::Linear => {
            let a = standard_normal(rng, z0.dim());
            DriftFamily::linear_with_slope(z0, a).expect("same shape")
        }
    }
}

/// Time discretization of the decoupled process.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DdmSchedule {
    pub train_steps: usize,
    pub infer_steps: usize,
}

impl Default for DdmSchedule {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            infer_steps: 500,
        }
    }
}

impl DdmSchedule {
    /// `t = n / steps`.
    pub fn t_of(n: usize, steps: usize) -> f64 {
        n as f64 / steps as f64
    }

    /// Mean coefficient of the constant family, `1 - t`.
    pub fn gamma(t: f64) -> f64 {
        1.0 - t
    }

    /// Noise scale, `√t`.
    pub fn delta(t: f64) -> f64 {
        t.sqrt()
    }

    /// `(t, Δt)` pairs of the reverse chain from `t = 1` down to `Δt`.
    pub fn reverse_times(&self) -> Vec<(f64, f64)> {
        let steps = self.infer_steps;
        (1..=steps)
            .rev()
            .map(|n| {
                let t = Self::t_of(n, steps);
                (t, t - Self::t_of(n - 1, steps))
            })
            .collect()
    }
}

/// `z_t = z0 + F(t) + √t·eps`.
pub fn forward_diffuse(
    z0: &Array3<f64>,
    t: f64,
    eps: &Array3<f64>,
    drift: &DriftFamily,
) -> Result<Array3<f64>, DiffusionError> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(DiffusionError::TOutOfRange(t));
    }
    check_same(z0, eps)?;
    if drift.dim() != z0.dim() {
        return Err(DiffusionError::ShapeMismatch {
            expected: z0.shape().to_vec(),
            actual: vec![drift.dim().0, drift.dim().1, drift.dim().2],
        });
    }
    let mut out = z0 + &drift.integral(t);
    out.scaled_add(t.sqrt(), eps);
    Ok(out)
}

/// One reverse jump from `t` to `t - dt`. With `dt == t` the variance term
/// vanishes and `xi` is ignored.
pub fn reverse_step(
    z_t: &Array3<f64>,
    t: f64,
    dt: f64,
    drift_hat: &DriftFamily,
    eps_hat: &Array3<f64>,
    xi: Option<&Array3<f64>>,
) -> Result<Array3<f64>, DiffusionError> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(DiffusionError::TOutOfRange(t));
    }
    if !(dt > 0.0 && dt <= t) {
        return Err(DiffusionError::DtOutOfRange { t, dt });
    }
    check_same(z_t, eps_hat)?;
    let next_t = (t - dt).max(0.0);
    let mut out = z_t + &drift_hat.increment(t, next_t);
    out.scaled_add(-dt / t.sqrt(), eps_hat);
    let var = dt * next_t / t;
    if var > 0.0 {
        if let Some(xi) = xi {
            check_same(z_t, xi)?;
            out.scaled_add(var.sqrt(), xi);
        }
    }
    Ok(out)
}

/// Network outputs: drift parameters and the noise estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPair {
    /// Drift parameters stacked as in [`DriftFamily::to_target`].
    pub f_hat: Array3<f64>,
    pub eps_hat: Array3<f64>,
}

/// Anything that maps `(z_t, t, prompt)` to a [`PredictionPair`].
pub trait Predictor {
    /// Latent shape `(c, h, w)` for prompts of side `prompt_size`.
    fn latent_dims(&self, prompt_size: usize) -> (usize, usize, usize);

    /// Pixels per latent cell along each axis.
    fn spatial_factor(&self) -> usize;

    fn drift_kind(&self) -> DriftKind;

    /// Predictions for a batch sharing one time `t`.
    fn predict(
        &self,
        z_t: &[Array3<f64>],
        t: f64,
        prompts: &[&PromptTensor],
    ) -> Result<Vec<PredictionPair>, DiffusionError>;
}

/// Reverse chain from `z_1 ~ N(0, I)` to `t = 0`, deterministic in `seed`.
pub fn sample<P: Predictor + ?Sized>(
    predictor: &P,
    prompt: &PromptTensor,
    schedule: &DdmSchedule,
    seed: u64,
) -> Result<LatentTensor, DiffusionError> {
    Ok(sample_batch(predictor, &[prompt], schedule, &[seed])?.remove(0))
}

/// [`sample`] for several prompts at once; each prompt draws its noise from
/// its own seed, so results do not depend on batch composition.
pub fn sample_batch<P: Predictor + ?Sized>(
    predictor: &P,
    prompts: &[&PromptTensor],
    schedule: &DdmSchedule,
    seeds: &[u64],
) -> Result<Vec<LatentTensor>, DiffusionError> {
    if prompts.is_empty() {
        return Ok(Vec::new());
    }
    if seeds.len() != prompts.len() || schedule.infer_steps == 0 {
        return Err(DiffusionError::InvalidSchedule(format!(
            "{} prompts, {} seeds, {} steps",
            prompts.len(),
            seeds.len(),
            schedule.infer_steps
        )));
    }
    let size = prompts[0].size();
    let dims = predictor.latent_dims(size);
    let kind = predictor.drift_kind();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut z: Vec<Array3<f64>> = rngs.iter_mut().map(|r| standard_normal(r, dims)).collect();
    let f_dims = (dims.0 * kind.param_count(), dims.1, dims.2);
    for (t, dt) in schedule.reverse_times() {
        let preds = predictor.predict(&z, t, prompts)?;
        if preds.len() != z.len() {
            return Err(DiffusionError::Predictor(format!(
                "{} predictions for {} inputs",
                preds.len(),
                z.len()
            )));
        }
        for ((zi, pred), rng) in z.iter_mut().zip(preds).zip(rngs.iter_mut()) {
            for (arr, want) in [(&pred.f_hat, f_dims), (&pred.eps_hat, dims)] {
                if arr.dim() != want {
                    return Err(DiffusionError::PredictorShapeMismatch {
                        expected: vec![want.0, want.1, want.2],
                        actual: arr.shape().to_vec(),
                    });
                }
            }
            let drift = DriftFamily::from_target(kind, pred.f_hat)?;
            let xi = standard_normal(rng, dims);
            *zi = reverse_step(zi, t, dt, &drift, &pred.eps_hat, Some(&xi))?;
        }
    }
    z.into_iter()
        .map(|d| {
            LatentTensor::new(d, predictor.spatial_factor())
                .map_err(|e| DiffusionError::Predictor(e.to_string()))
        })
        .collect()
}

/// DDPM reference schedule: `ᾱ_n = ∏_{i≤n} (1 - β_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DdpmRefSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DdpmRefSchedule {
    /// Linear β ramp over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::InvalidSchedule("zero steps".into()));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Arbitrary β sequence with every β in `[0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::InvalidSchedule("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(DiffusionError::InvalidSchedule(format!("beta {b} outside [0, 1)")));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, n: usize) -> Result<usize, DiffusionError> {
        if n == 0 || n > self.steps() {
            return Err(DiffusionError::StepOutOfRange {
                n,
                steps: self.steps(),
            });
        }
        Ok(n - 1)
    }

    pub fn beta(&self, n: usize) -> Result<f64, DiffusionError> {
        Ok(self.betas[self.check(n)?])
    }

    pub fn alpha(&self, n: usize) -> Result<f64, DiffusionError> {
        Ok(1.0 - self.beta(n)?)
    }

    pub fn alpha_bar(&self, n: usize) -> Result<f64, DiffusionError> {
        Ok(self.alpha_bars[self.check(n)?])
    }
}

/// `x_n = √ᾱ_n·x0 + √(1-ᾱ_n)·eps`.
pub fn ddpm_reference_forward(
    x0: &Array3<f64>,
    n: usize,
    sched: &DdpmRefSchedule,
    eps: &Array3<f64>,
) -> Result<Array3<f64>, DiffusionError> {
    check_same(x0, eps)?;
    let ab = sched.alpha_bar(n)?;
    let mut out = x0 * ab.sqrt();
    out.scaled_add((1.0 - ab).sqrt(), eps);
    Ok(out)
}

/// `x_{n-1} = (x_n - β_n/√(1-ᾱ_n)·eps_hat)/√α_n + √β_n·noise`.
pub fn ddpm_reference_reverse_step(
    x_n: &Array3<f64>,
    n: usize,
    sched: &DdpmRefSchedule,
    eps_hat: &Array3<f64>,
    noise: &Array3<f64>,
) -> Result<Array3<f64>, DiffusionError> {
    check_same(x_n, eps_hat)?;
    check_same(x_n, noise)?;
    let beta = sched.beta(n)?;
    let alpha = 1.0 - beta;
    let ab = sched.alpha_bar(n)?;
    let coef = if beta == 0.0 { 0.0 } else { beta / (1.0 - ab).sqrt() };
    let mut out = Array3::zeros(x_n.dim());
    Zip::from(&mut out)
        .and(x_n)
        .and(eps_hat)
        .and(noise)
        .for_each(|o, &x, &e, &z| *o = (x - coef * e) / alpha.sqrt() + beta.sqrt() * z);
    Ok(out)
}
