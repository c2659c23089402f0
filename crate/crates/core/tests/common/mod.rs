#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radiomap::backbone::{stack3, Backbone, BackboneConfig};
use radiomap::diffusion::{forward_diffuse, solve_drift_ground_truth, standard_normal, DriftKind};
use radiomap::domain::PromptTensor;
use radiomap::ingest::{build_prompt, Sample};
use radiomap::nn::ParamStore;
use radiomap::sim::{compute_pathloss, generate_scene, OracleConfig};
use radiomap::training::diffusion_loss_tensor;

/// Oracle-labelled synthetic samples, deterministic in `seed`.
pub fn samples(seed: u64, count: usize, n: usize) -> Vec<Sample> {
    let oracle = OracleConfig::default();
    (0..count)
        .map(|i| {
            let scene = generate_scene(seed + i as u64, n, 6, 4).unwrap();
            let gray = compute_pathloss(&scene, &oracle).unwrap().gray;
            Sample {
                record_id: format!("{i}_0"),
                scene,
                gray,
            }
        })
        .collect()
}

/// 3-channel 8x8 latent network small enough for finite differences.
pub fn toy_config(drift: DriftKind) -> BackboneConfig {
    BackboneConfig {
        latent_size: 8,
        spatial_factor: 1,
        base_width: 8,
        channel_mults: vec![1, 2],
        attention_levels: vec![1],
        prompt_embed_dim: 8,
        prompt_stride: 2,
        aft_levels: vec![0, 1],
        groups: 2,
        drift_kind: drift,
        ..BackboneConfig::default()
    }
}

/// Fixed batch of `(z_t, t, prompts, eps, f)` for the toy network.
pub struct ToyBatch {
    pub z: Tensor,
    pub t: Vec<f64>,
    pub prompts: Tensor,
    pub eps: Tensor,
    pub f: Tensor,
}

pub fn toy_batch(cfg: &BackboneConfig, seed: u64) -> ToyBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dev = Device::Cpu;
    let s = cfg.latent_size;
    let (mut z, mut eps, mut f, mut t, mut p) = (vec![], vec![], vec![], vec![], vec![]);
    for i in 0..2 {
        let z0 = standard_normal(&mut rng, (cfg.latent_channels, s, s));
        let e = standard_normal(&mut rng, z0.dim());
        let d = solve_drift_ground_truth(&z0, cfg.drift_kind, &mut rng);
        let ti = 0.2 + 0.5 * i as f64;
        z.push(forward_diffuse(&z0, ti, &e, &d).unwrap());
        eps.push(e);
        f.push(d.to_target());
        t.push(ti);
        let scene = generate_scene(seed + i, 16, 3, 2).unwrap();
        let small = build_prompt(&scene).channels().slice(ndarray::s![.., ..s, ..s]).to_owned();
        let mut small = small.mapv(f64::from);
        small.index_axis_mut(ndarray::Axis(0), 2).fill(0.0);
        small[[2, rng.random_range(0..s), rng.random_range(0..s)]] = 1.0;
        p.push(small);
    }
    ToyBatch {
        z: stack3(&z, &dev).unwrap(),
        t,
        prompts: stack3(&p, &dev).unwrap(),
        eps: stack3(&eps, &dev).unwrap(),
        f: stack3(&f, &dev).unwrap(),
    }
}

pub fn toy_loss(net: &Backbone, b: &ToyBatch) -> Tensor {
    let (f_hat, eps_hat) = net.forward(&b.z, &b.t, &b.prompts).unwrap();
    diffusion_loss_tensor(&b.eps, &eps_hat, &b.f, &f_hat).unwrap()
}

/// Largest relative error between autograd and central differences over
/// `samples` randomly chosen scalar weights.
pub struct GradCheck {
    pub worst_rel: f64,
    pub checked: Vec<(String, usize, f64, f64)>,
}

pub fn finite_difference_check(samples: usize, seed: u64) -> GradCheck {
    let cfg = toy_config(DriftKind::Constant);
    let store = ParamStore::seeded(seed, DType::F64, &Device::Cpu);
    let net = Backbone::new(cfg.clone(), &store).unwrap();
    // Nudge the zero-initialized tensors so every path carries gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, var) in store.vars() {
        let noise: Vec<f64> = (0..var.elem_count()).map(|_| rng.random_range(-0.05..0.05)).collect();
        let noise = Tensor::from_vec(noise, var.shape(), &Device::Cpu).unwrap();
        var.set(&(var.as_tensor() + noise).unwrap()).unwrap();
    }
    let batch = toy_batch(&cfg, seed);
    let grads = toy_loss(&net, &batch).backward().unwrap();
    let vars = store.vars();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = Vec::new();
    for _ in 0..samples {
        let (name, var) = &vars[rng.random_range(0..vars.len())];
        let flat: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let idx = rng.random_range(0..flat.len());
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx];
        let eval = |delta: f64| {
            let mut v = flat.clone();
            v[idx] += delta;
            var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
            toy_loss(&net, &batch).to_scalar::<f64>().unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        eval(0.0);
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
        checked.push((name.clone(), idx, g, fd));
    }
    GradCheck {
        worst_rel: worst,
        checked,
    }
}

pub fn prompt_batch(prompts: &[&PromptTensor]) -> Tensor {
    let arrays: Vec<Array3<f64>> = prompts.iter().map(|p| p.channels().mapv(f64::from)).collect();
    stack3(&arrays, &Device::Cpu).unwrap()
}

fn ramp(h: usize, w: usize) -> ndarray::Array2<f64> {
    ndarray::Array2::from_shape_fn((h, w), |(r, c)| ((r * w + c) % 17) as f64 / 20.0 + 0.05)
}

/// Hand-checkable metric examples as `(name, holds)`.
pub fn metric_examples() -> Vec<(&'static str, bool)> {
    use ndarray::Array2;
    use radiomap::metrics::*;
    let a = ramp(16, 16);
    let b = ramp(16, 16).mapv(|v| 1.0 - v);
    let cfg = SsimConfig::default();
    let zeros = Array2::zeros((16, 16));
    let (c1v, c2v) = (0.3, 0.7);
    let ca = Array2::from_elem((16, 16), c1v);
    let cb = Array2::from_elem((16, 16), c2v);
    let k1 = cfg.c1();
    let const_ssim = (2.0 * c1v * c2v + k1) / (c1v * c1v + c2v * c2v + k1);
    let report = evaluate_split(&Passthrough, &samples(900, 2, 16), EvalDomain::Gray).unwrap();
    let zero_pred = |s: &Sample| Ok::<_, String>(Array2::zeros(s.gray.dim()));
    let zero_report = evaluate_split(&zero_pred, &samples(900, 2, 16), EvalDomain::Gray).unwrap();
    vec![
        ("mse(a, a) = 0", mse(&a, &a).unwrap() == 0.0),
        ("uniform 0.1 offset: mse 0.01", (mse(&(&a + 0.1), &a).unwrap() - 0.01).abs() < 1e-12),
        ("uniform 0.1 offset: rmse 0.1", (rmse(&(&a + 0.1), &a).unwrap() - 0.1).abs() < 1e-12),
        ("mse symmetric", mse(&a, &b).unwrap() == mse(&b, &a).unwrap()),
        ("nmse(0, truth) = 1", nmse(&zeros, &a).unwrap() == 1.0),
        ("nmse(truth, truth) = 0", nmse(&a, &a).unwrap() == 0.0),
        ("nmse(1.1 truth, truth) = 0.01", (nmse(&(&a * 1.1), &a).unwrap() - 0.01).abs() < 1e-12),
        ("nmse zero reference rejected", matches!(nmse(&a, &zeros), Err(MetricsError::ZeroReference))),
        (
            "psnr(r=1, mse=0.01) = 20 dB",
            (psnr(&(&a + 0.1), &a, 1.0).unwrap() - 20.0).abs() < 1e-9,
        ),
        ("psnr identical = inf", psnr(&a, &a, 1.0).unwrap() == f64::INFINITY),
        (
            "doubling r adds 20 log10 2",
            (psnr(&b, &a, 2.0).unwrap() - psnr(&b, &a, 1.0).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-9,
        ),
        ("c3 = c2 / 2", cfg.c3() == cfg.c2() / 2.0),
        ("ssim(a, a) = 1", (ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-12),
        ("ssim of constants", (ssim(&ca, &cb, &cfg).unwrap() - const_ssim).abs() < 1e-12),
        ("ssim symmetric", ssim(&a, &b, &cfg).unwrap() == ssim(&b, &a, &cfg).unwrap()),
        (
            "passthrough report: nmse 0, ssim 1, rmse 0",
            report.nmse == 0.0 && report.rmse == 0.0 && (report.ssim - 1.0).abs() < 1e-12,
        ),
        ("zero predictor: nmse 1 per sample", zero_report.samples.iter().all(|s| s.nmse == 1.0)),
        (
            "report lists nmse, rmse, ssim, psnr",
            report.csv().lines().next() == Some("record_id,nmse,rmse,ssim,psnr"),
        ),
    ]
}

/// 16x16 autoencoder with random frozen weights.
pub fn tiny_vae(seed: u64) -> radiomap::vae::Vae {
    let cfg = radiomap::vae::VaeConfig {
        embed_dim: 4,
        channel_mults: vec![1, 1, 1],
        groups: 2,
        ..radiomap::vae::VaeConfig::default()
    };
    let store = ParamStore::seeded(seed, DType::F32, &Device::Cpu);
    radiomap::vae::Vae::new(cfg, &store).unwrap()
}

/// Denoiser over the 4x4 latents of [`tiny_vae`].
pub fn tiny_backbone(drift: DriftKind) -> BackboneConfig {
    BackboneConfig {
        latent_size: 4,
        base_width: 8,
        channel_mults: vec![1, 2],
        attention_levels: vec![1],
        prompt_embed_dim: 8,
        aft_levels: vec![0, 1],
        groups: 2,
        drift_kind: drift,
        ..BackboneConfig::default()
    }
}
