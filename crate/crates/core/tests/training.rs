mod common;

use std::cell::Cell;
use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;
use radiomap::checkpoint::Checkpoint;
use radiomap::diffusion::DriftKind;
use radiomap::nn::{params_hash, Init, ParamStore};
use radiomap::training::*;

fn tiny_objective(drift: DriftKind) -> DiffusionObjective {
    let samples = common::samples(40, 4, 16);
    DiffusionObjective::new(common::tiny_backbone(drift), common::tiny_vae(1), &samples, 2).unwrap()
}

fn tiny_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        lr_start: 1e-3,
        lr_end: 1e-4,
        max_steps: steps,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn control(dir: &Path) -> RunControl {
    RunControl {
        out_dir: dir.to_path_buf(),
        ..RunControl::default()
    }
}

fn log_of(dir: &Path) -> Vec<LogRecord> {
    read_log_records(&dir.join(LOG_FILE)).unwrap()
}

fn arrays(v: f64, n: usize) -> Vec<Array3<f64>> {
    vec![Array3::from_elem((3, 2, 2), v); n]
}

#[test]
fn loss_examples() {
    let eps = arrays(0.3, 2);
    let f = arrays(-1.2, 2);
    assert_eq!(diffusion_loss(&eps, &eps, &f, &f).unwrap(), 0.0);
    let shifted: Vec<_> = f.iter().map(|a| a + 1.0).collect();
    assert!((diffusion_loss(&eps, &eps, &f, &shifted).unwrap() - 1.0).abs() < 1e-12);
    // Swapping which term carries the residual leaves the loss unchanged.
    let eps_shift: Vec<_> = eps.iter().map(|a| a + 1.0).collect();
    assert_eq!(
        diffusion_loss(&eps, &eps_shift, &f, &f).unwrap(),
        diffusion_loss(&eps, &eps, &f, &shifted).unwrap()
    );
    assert!(matches!(
        diffusion_loss(&eps, &arrays(0.0, 1), &f, &f),
        Err(TrainError::ShapeMismatch { .. })
    ));
}

#[test]
fn tensor_loss_matches_array_loss() {
    let eps = common::toy_batch(&common::toy_config(DriftKind::Linear), 3);
    let other = common::toy_batch(&common::toy_config(DriftKind::Linear), 4);
    let t = diffusion_loss_tensor(&eps.eps, &other.eps, &eps.f, &other.f)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    let un = |x: &Tensor| radiomap::backbone::unstack(x).unwrap();
    let a = diffusion_loss(&un(&eps.eps), &un(&other.eps), &un(&eps.f), &un(&other.f)).unwrap();
    assert!((t - a).abs() < 1e-12);
}

#[test]
fn batches_follow_the_forward_law_and_oracle_loss_is_zero() {
    for drift in [DriftKind::Constant, DriftKind::Linear] {
        let obj = tiny_objective(drift);
        let cfg = TrainConfig {
            drift_kind: drift,
            ..tiny_cfg(1)
        };
        for step in 1..=5 {
            let mut rng = step_rng(cfg.seed, step);
            let b = obj.make_batch(&[0, 1, 2, 3], &cfg, &mut rng);
            assert_eq!(diffusion_loss(&b.eps, &b.eps, &b.f, &b.f).unwrap(), 0.0);
            for i in 0..4 {
                let t = b.t[i];
                assert!(t > 0.0 && t <= 1.0 && (t * 1000.0).fract().abs() < 1e-9);
                let f = &b.f[i];
                // Recover z0 from the targets and rebuild z_t.
                let z0 = match drift {
                    DriftKind::Constant => -f,
                    DriftKind::Linear => {
                        let a = f.slice(ndarray::s![..3, .., ..]).to_owned();
                        let bb = f.slice(ndarray::s![3.., .., ..]).to_owned();
                        -(&bb + &a * 0.5)
                    }
                };
                let integral = match drift {
                    DriftKind::Constant => -&z0 * t,
                    DriftKind::Linear => {
                        let a = f.slice(ndarray::s![..3, .., ..]).to_owned();
                        let bb = f.slice(ndarray::s![3.., .., ..]).to_owned();
                        &a * (t * t / 2.0) + &bb * t
                    }
                };
                let want = &z0 + &integral + &b.eps[i] * t.sqrt();
                let err = (&want - &b.z_t[i]).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(err < 1e-12, "{drift:?} {err}");
            }
        }
    }
}

proptest! {
    #[test]
    fn lr_decays_monotonically(steps in 1usize..5000, start in 1e-5f64..1e-2, ratio in 1.0f64..100.0) {
        let cfg = TrainConfig { lr_start: start, lr_end: start / ratio, max_steps: steps, ..TrainConfig::default() };
        prop_assert!((cfg.lr(1) - start).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 1..=steps as u64 {
            let lr = cfg.lr(s);
            prop_assert!(lr <= prev && lr >= cfg.lr_end * (1.0 - 1e-12));
            prev = lr;
        }
    }

    #[test]
    fn log_records_round_trip(step in 1u64..1_000_000, lr in 1e-8f64..1.0, loss in 0.0f64..100.0) {
        let r = LogRecord { step, lr, loss };
        prop_assert_eq!(LogRecord::parse(&r.line()), Some(r));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        TrainConfig {
            lr_end: 0.0,
            ..tiny_cfg(1)
        },
        TrainConfig {
            lr_start: 1e-5,
            lr_end: 1e-4,
            ..tiny_cfg(1)
        },
        TrainConfig {
            batch_size: 0,
            ..tiny_cfg(1)
        },
    ] {
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
    }
}

#[test]
fn seeded_runs_are_bit_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        run_training(&tiny_objective(DriftKind::Constant), &tiny_cfg(6), &control(dir.path())).unwrap();
    }
    assert_eq!(log_of(a.path()), log_of(b.path()));
    let bytes = |d: &Path| std::fs::read(d.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(bytes(a.path()), bytes(b.path()));
}

#[test]
fn interrupted_run_resumes_to_the_same_trajectory() {
    let whole = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        drift_kind: DriftKind::Linear,
        ..tiny_cfg(6)
    };
    run_training(&tiny_objective(DriftKind::Linear), &cfg, &control(whole.path())).unwrap();

    let first = run_training(
        &tiny_objective(DriftKind::Linear),
        &cfg,
        &RunControl {
            stop_after: Some(3),
            ..control(split.path())
        },
    )
    .unwrap();
    assert!(first.interrupted);
    assert_eq!(first.last_step, 3);
    // A fresh process: new objective, weights restored from the checkpoint.
    let second = run_training(
        &tiny_objective(DriftKind::Linear),
        &cfg,
        &RunControl {
            resume: Some(first.checkpoint.clone()),
            ..control(split.path())
        },
    )
    .unwrap();
    assert_eq!(second.records.len(), 3);
    assert_eq!(log_of(whole.path()), log_of(split.path()));
    let final_params = |d: &Path| Checkpoint::load(&d.join(FINAL_CHECKPOINT)).unwrap().meta["params_hash"].clone();
    assert_eq!(final_params(whole.path()), final_params(split.path()));
}

#[test]
fn resume_with_a_changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let rep = run_training(
        &tiny_objective(DriftKind::Constant),
        &tiny_cfg(4),
        &RunControl {
            stop_after: Some(2),
            ..control(dir.path())
        },
    )
    .unwrap();
    let changed = TrainConfig {
        lr_start: 2e-3,
        ..tiny_cfg(4)
    };
    let err = run_training(
        &tiny_objective(DriftKind::Constant),
        &changed,
        &RunControl {
            resume: Some(rep.checkpoint),
            ..control(dir.path())
        },
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::ResumeMismatch { .. }), "{err}");
}

#[test]
fn checkpoint_cadence_and_log_length() {
    let dir = tempfile::tempdir().unwrap();
    let rep = run_training(&tiny_objective(DriftKind::Constant), &tiny_cfg(5), &control(dir.path())).unwrap();
    let names = |d: &Path| {
        let mut v: Vec<String> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".rmck"))
            .collect();
        v.sort();
        v
    };
    assert_eq!(names(dir.path()), vec![FINAL_CHECKPOINT.to_string()]);
    assert_eq!(log_of(dir.path()).len(), 5);
    assert_eq!(rep.records.len(), 5);
    assert!(dir.path().join(CONFIG_ECHO).exists());

    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..tiny_cfg(5)
    };
    run_training(&tiny_objective(DriftKind::Constant), &cfg, &control(dir.path())).unwrap();
    assert_eq!(names(dir.path()), vec!["ckpt-00000002.rmck", "ckpt-00000004.rmck", FINAL_CHECKPOINT]);
    let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().all(|l| l.split(',').count() == 3));
}

#[test]
fn autoencoder_stays_frozen() {
    let obj = tiny_objective(DriftKind::Constant);
    let before = params_hash(&obj.vae().params().unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_training(&obj, &tiny_cfg(4), &control(dir.path())).unwrap();
    assert_eq!(params_hash(&obj.vae().params().unwrap()).unwrap(), before);
    let ck = Checkpoint::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(ck.config["model"]["vae_hash"], before.as_str());
    assert_eq!(params_hash(&ck.section("vae.")).unwrap(), before);
}

#[test]
fn drift_mismatch_and_empty_data_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        drift_kind: DriftKind::Linear,
        ..tiny_cfg(2)
    };
    let err = run_training(&tiny_objective(DriftKind::Constant), &cfg, &control(dir.path())).unwrap_err();
    assert!(matches!(err, TrainError::InvalidConfig(_)), "{err}");
    let err = DiffusionObjective::new(common::tiny_backbone(DriftKind::Constant), common::tiny_vae(1), &[], 0);
    assert!(matches!(err, Err(TrainError::EmptyDataset)));
}

/// Finite loss until `blow_at` calls, then NaN.
struct Exploding {
    store: ParamStore,
    w: Tensor,
    calls: Cell<usize>,
    blow_at: usize,
}

impl Objective for Exploding {
    fn kind(&self) -> &'static str {
        "toy"
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn dataset_len(&self) -> usize {
        4
    }
    fn model_json(&self) -> serde_json::Value {
        serde_json::json!({ "toy": 1 })
    }
    fn loss(&self, _batch: &[usize], _cfg: &TrainConfig, _rng: &mut ChaCha8Rng) -> Result<Tensor, TrainError> {
        self.calls.set(self.calls.get() + 1);
        let scale = if self.calls.get() >= self.blow_at { f64::NAN } else { 1.0 };
        Ok((self.w.sqr()?.sum_all()? * scale)?)
    }
    fn attachments(&self) -> Result<BTreeMap<String, Tensor>, TrainError> {
        Ok(BTreeMap::new())
    }
}

#[test]
fn non_finite_loss_stops_with_a_diagnostic_checkpoint() {
    let store = ParamStore::seeded(0, DType::F64, &Device::Cpu);
    let w = store.root().get(4, "w", Init::Ones).unwrap();
    let obj = Exploding {
        store,
        w,
        calls: Cell::new(0),
        blow_at: 3,
    };
    let dir = tempfile::tempdir().unwrap();
    let err = run_training(&obj, &tiny_cfg(10), &control(dir.path())).unwrap_err();
    match err {
        TrainError::DivergedLoss { step, checkpoint } => {
            assert_eq!(step, 3);
            assert_eq!(checkpoint, dir.path().join(DIVERGED_CHECKPOINT));
            assert_eq!(Checkpoint::load(&checkpoint).unwrap().meta_u64("step").unwrap(), 2);
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(log_of(dir.path()).len(), 2);
}

#[test]
fn overfitting_four_maps_cuts_the_loss_tenfold() {
    let samples = common::samples(60, 4, 64);
    // A random autoencoder has posterior noise far above its mean, which
    // leaves the targets mostly unpredictable; fit it briefly first.
    let vae_cfg = TrainConfig {
        batch_size: 4,
        lr_start: 1e-3,
        lr_end: 1e-4,
        max_steps: 300,
        ..TrainConfig::default()
    };
    let vae_dir = tempfile::tempdir().unwrap();
    let (vae, _) = train_vae(
        samples.iter().map(|s| s.gray.clone()).collect(),
        radiomap::vae::VaeConfig::desk(),
        &vae_cfg,
        &control(vae_dir.path()),
    )
    .unwrap();
    let obj = DiffusionObjective::new(radiomap::backbone::BackboneConfig::desk(64), vae, &samples, 6).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        lr_start: 1e-3,
        lr_end: 1e-4,
        max_steps: 500,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let rep = run_training(&obj, &cfg, &control(dir.path())).unwrap();
    // Single-step losses depend on the drawn t, so compare window means.
    let mean = |r: &[LogRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    let (head, tail) = (mean(&rep.records[..10]), mean(&rep.records[450..]));
    assert!(tail < 0.1 * head, "{head} -> {tail}");
}
