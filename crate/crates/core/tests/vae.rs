mod common;

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use radiomap::diffusion::standard_normal;
use radiomap::domain::LatentTensor;
use radiomap::nn::ParamStore;
use radiomap::training::{run_training, RunControl, TrainConfig, VaeObjective};
use radiomap::vae::*;

fn desk_vae(seed: u64) -> Vae {
    Vae::new(VaeConfig::desk(), &ParamStore::seeded(seed, DType::F32, &Device::Cpu)).unwrap()
}

fn gray(seed: u64) -> Array2<f64> {
    common::samples(seed, 1, 64).remove(0).gray
}

#[test]
fn latent_shape_follows_the_downsample_factor() {
    let z = desk_vae(0).encode(&gray(1), EncodeMode::Mean, 0).unwrap();
    assert_eq!(z.data().dim(), (3, 16, 16));
    assert_eq!(z.image_size(), 64);
}

#[test]
fn mean_encoding_is_deterministic_and_sampling_is_seeded() {
    let vae = desk_vae(1);
    let g = gray(2);
    let a = vae.encode(&g, EncodeMode::Mean, 0).unwrap();
    let b = vae.encode(&g, EncodeMode::Mean, 99).unwrap();
    assert_eq!(a, b);
    let s1 = vae.encode(&g, EncodeMode::Sample, 5).unwrap();
    let s2 = vae.encode(&g, EncodeMode::Sample, 5).unwrap();
    let s3 = vae.encode(&g, EncodeMode::Sample, 6).unwrap();
    assert_eq!(s1, s2);
    assert_ne!(s1, s3);
}

#[test]
fn posterior_std_is_positive() {
    let vae = desk_vae(2);
    let maps: Vec<Array2<f64>> = (0..3).map(gray).collect();
    let refs: Vec<&Array2<f64>> = maps.iter().collect();
    let post = vae.posterior(&stack_gray(&refs, &Device::Cpu).unwrap()).unwrap();
    let std = post.std().unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!(std.iter().all(|&v| v > 0.0 && v.is_finite()));
}

#[test]
fn decoder_output_is_squashed() {
    let vae = desk_vae(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = standard_normal(&mut rng, (3, 16, 16)) * 20.0;
    let out = vae.decode(&LatentTensor::new(z, 4).unwrap()).unwrap();
    assert_eq!(out.dim(), (64, 64));
    assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn standard_normal_posterior_has_zero_kl() {
    let zeros = Tensor::zeros((2, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
    let post = Posterior {
        mean: zeros.clone(),
        logvar: zeros,
    };
    assert_eq!(post.kl().unwrap().to_scalar::<f64>().unwrap(), 0.0);
}

#[test]
fn wrong_input_size_is_rejected() {
    let vae = desk_vae(4);
    assert!(matches!(
        vae.encode(&Array2::zeros((30, 30)), EncodeMode::Mean, 0),
        Err(VaeError::ShapeMismatch { .. })
    ));
}

#[test]
fn config_validation() {
    for cfg in [
        VaeConfig {
            z_channels: 4,
            ..VaeConfig::desk()
        },
        VaeConfig {
            perceptual_weight: 0.1,
            ..VaeConfig::desk()
        },
        VaeConfig {
            channel_mults: vec![1, 2],
            ..VaeConfig::desk()
        },
        VaeConfig {
            downsample_factor: 3,
            ..VaeConfig::desk()
        },
    ] {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    VaeConfig::default().validate().unwrap();
}

#[test]
fn encoder_is_translation_covariant_in_the_interior() {
    // Content padded by zeros so a 4-pixel shift loses nothing.
    let vae = desk_vae(5);
    let mut base = Array2::zeros((128, 128));
    let g = gray(7);
    base.slice_mut(s![32..96, 28..92]).assign(&g);
    let mut shifted = Array2::zeros((128, 128));
    shifted.slice_mut(s![32..96, 32..96]).assign(&g);
    let a = vae.encode(&base, EncodeMode::Mean, 0).unwrap();
    let b = vae.encode(&shifted, EncodeMode::Mean, 0).unwrap();
    let crop_a: Array3<f64> = a.data().slice(s![.., 10..22, 10..21]).to_owned();
    let crop_b: Array3<f64> = b.data().slice(s![.., 10..22, 11..22]).to_owned();
    let max_abs = |x: &Array3<f64>| x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // Group statistics are pooled over the whole map, so moving content
    // perturbs them slightly; unshifted crops must differ far more.
    let diff = max_abs(&(&crop_a - &crop_b));
    let unaligned = max_abs(&(&crop_a - &b.data().slice(s![.., 10..22, 10..21])));
    assert!(diff < 1e-3 * max_abs(&crop_a), "{diff}");
    assert!(unaligned > 100.0 * diff, "{unaligned} vs {diff}");
}

#[test]
fn short_training_reduces_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let grays: Vec<Array2<f64>> = common::samples(100, 8, 64).into_iter().map(|s| s.gray).collect();
    let obj = VaeObjective::new(VaeConfig::desk(), grays.clone(), 0).unwrap();
    let refs: Vec<&Array2<f64>> = grays.iter().collect();
    let before = obj.eval_loss(&refs).unwrap();
    let cfg = TrainConfig {
        lr_start: 1e-3,
        lr_end: 1e-4,
        max_steps: 200,
        ..TrainConfig::default()
    };
    let report = run_training(
        &obj,
        &cfg,
        &RunControl {
            out_dir: dir.path().into(),
            ..RunControl::default()
        },
    )
    .unwrap();
    let after = obj.eval_loss(&refs).unwrap();
    assert!(after < before, "{before} -> {after}");
    assert!(report.final_loss().unwrap() < report.records[0].loss);
}
