use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use proptest::prelude::*;
use radiomap::checkpoint::*;
use sha2::{Digest, Sha256};

fn sample() -> Checkpoint {
    let mut ck = Checkpoint::new("diffusion", serde_json::json!({ "model": { "width": 32 }, "lr": 1e-3 }));
    ck.meta.insert("step".into(), "42".into());
    ck.meta.insert("note".into(), "ünïcode ok".into());
    let dev = Device::Cpu;
    ck.tensors.insert(
        "param.a".into(),
        Tensor::from_vec(vec![1.5f32, -2.0, 3.25, 0.0, 7.0, -0.5], (2, 3), &dev).unwrap(),
    );
    ck.tensors.insert("param.b".into(), Tensor::from_vec(vec![std::f64::consts::PI], (), &dev).unwrap());
    ck.tensors.insert("opt.m.a".into(), Tensor::zeros((2, 3), candle_core::DType::F32, &dev).unwrap());
    ck
}

fn reseal(mut bytes: Vec<u8>) -> Vec<u8> {
    let body = bytes.len() - 32;
    let digest = Sha256::digest(&bytes[..body]);
    bytes[body..].copy_from_slice(&digest);
    bytes
}

fn same(a: &Checkpoint, b: &Checkpoint) {
    assert_eq!((&a.kind, &a.config, &a.meta), (&b.kind, &b.config, &b.meta));
    assert_eq!(a.tensors.keys().collect::<Vec<_>>(), b.tensors.keys().collect::<Vec<_>>());
    for (k, t) in &a.tensors {
        let u = &b.tensors[k];
        assert_eq!((t.dtype(), t.dims()), (u.dtype(), u.dims()), "{k}");
        let f = |x: &Tensor| x.to_dtype(candle_core::DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(f(t), f(u), "{k}");
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.rmck");
    let ck = sample();
    ck.save(&path).unwrap();
    same(&ck, &Checkpoint::load(&path).unwrap());
    assert!(!path.with_extension("tmp").exists());
    assert_eq!(std::fs::read(&path).unwrap(), ck.to_bytes().unwrap());
}

#[test]
fn header_layout() {
    let bytes = sample().to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"RMCK");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
    let kind_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    assert_eq!(&bytes[12..12 + kind_len], b"diffusion");
    let body = bytes.len() - 32;
    assert_eq!(&bytes[body..], Sha256::digest(&bytes[..body]).as_slice());
}

#[test]
fn any_flipped_byte_is_detected() {
    let bytes = sample().to_bytes().unwrap();
    for i in 8..bytes.len() {
        let mut bad = bytes.clone();
        bad[i] ^= 0x40;
        assert!(Checkpoint::from_bytes(&bad).is_err(), "byte {i}");
    }
}

#[test]
fn corruption_errors_are_specific() {
    let bytes = sample().to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[20] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Checksum)));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 5]),
        Err(CheckpointError::Checksum)
    ));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(CheckpointError::BadMagic)));
    assert!(matches!(Checkpoint::from_bytes(b"RMCK"), Err(CheckpointError::BadMagic)));
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&reseal(version)),
        Err(CheckpointError::Version { found: 7, expected: 1 })
    ));
}

#[test]
fn resealed_garbage_is_malformed_not_a_panic() {
    let bytes = sample().to_bytes().unwrap();
    // Extra body bytes behind a valid checksum.
    let mut longer = bytes[..bytes.len() - 32].to_vec();
    longer.extend_from_slice(&[0u8; 3]);
    longer.extend_from_slice(&[0u8; 32]);
    assert!(matches!(Checkpoint::from_bytes(&reseal(longer)), Err(CheckpointError::Malformed(_))));
    // A tensor header claiming an absurd size.
    let mut ck = Checkpoint::new("k", serde_json::Value::Null);
    ck.tensors.insert("t".into(), Tensor::from_vec(vec![1f32], 1, &Device::Cpu).unwrap());
    let mut huge = ck.to_bytes().unwrap();
    let dims_at = huge.len() - 32 - 4 - 8;
    huge[dims_at..dims_at + 8].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&reseal(huge)), Err(CheckpointError::Malformed(_))));
}

#[test]
fn missing_file_is_an_io_error() {
    let err = Checkpoint::load(std::path::Path::new("/nonexistent/x.rmck")).unwrap_err();
    assert!(matches!(err, CheckpointError::Io { .. }));
}

#[test]
fn sections_and_kinds() {
    let ck = sample();
    let params = ck.section("param.");
    assert_eq!(params.keys().collect::<Vec<_>>(), vec!["a", "b"]);
    let mut other = Checkpoint::new("vae", serde_json::Value::Null);
    other.insert_section("vae.", &params);
    assert!(other.tensors.contains_key("vae.a"));
    assert_eq!(ck.meta_u64("step").unwrap(), 42);
    assert!(ck.meta_u64("note").is_err());
    assert!(matches!(ck.expect_kind("vae"), Err(CheckpointError::WrongKind { .. })));
    ck.expect_kind("diffusion").unwrap();
}

#[test]
fn unsupported_dtype_is_refused() {
    let mut ck = Checkpoint::new("k", serde_json::Value::Null);
    ck.tensors.insert("u".into(), Tensor::from_vec(vec![1u8, 2], 2, &Device::Cpu).unwrap());
    assert!(matches!(ck.to_bytes(), Err(CheckpointError::Malformed(_))));
}

proptest! {
    #[test]
    fn arbitrary_tensors_round_trip(
        values in proptest::collection::vec(-1e6f64..1e6, 1..64),
        rows in 1usize..4,
        meta in proptest::collection::btree_map("[a-z_]{1,8}", "[ -~]{0,16}", 0..5),
    ) {
        let cols = values.len() / rows;
        prop_assume!(cols > 0);
        let v: Vec<f64> = values[..rows * cols].to_vec();
        let mut ck = Checkpoint::new("p", serde_json::json!({ "n": rows }));
        ck.meta = meta;
        let t = Tensor::from_vec(v.clone(), (rows, cols), &Device::Cpu).unwrap();
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), t.clone());
        m.insert("w32".to_string(), t.to_dtype(candle_core::DType::F32).unwrap());
        ck.insert_section("param.", &m);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back.meta, &ck.meta);
        prop_assert_eq!(back.tensors["param.w"].flatten_all().unwrap().to_vec1::<f64>().unwrap(), v);
        prop_assert_eq!(back.tensors["param.w32"].dtype(), candle_core::DType::F32);
    }
}
