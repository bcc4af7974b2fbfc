//! Model forward contracts and checkpoint persistence.

mod common;

use common::seeded;
use facnn::model::{FaModel, HeadKind, ModelConfig};
use facnn::tensor::Tensor;
use facnn::{FaError, SkipKind};

fn cfg_24(channels: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 24,
        channels,
        num_classes: 10,
        input_channels: 3,
        input_height: 32,
        input_width: 32,
        pool_after: vec![8, 16],
        head: HeadKind::Pooling,
        skip: SkipKind::Dampened,
        seed: 11,
    }
}

#[test]
fn untrained_forward_respects_logit_contract() {
    let model = FaModel::new(cfg_24(20)).unwrap();
    let mut rng = seeded(1);
    let x = Tensor::rand_uniform(&[3, 3, 32, 32], 0.0, 1.0, &mut rng);
    let (logits, _) = model.forward(&x, false).unwrap();
    assert_eq!(logits.shape(), &[3, 10]);
    assert!(logits.is_all_finite());
    assert!(logits.data().iter().all(|&v| v >= 0.0));
    for row in logits.data().chunks(10) {
        let sum: f32 = row.iter().sum();
        assert!((0.0..=1.0 + 1e-6).contains(&sum), "row sum {sum}");
    }
}

#[test]
fn capture_produces_full_stack_with_halving() {
    let model = FaModel::new(cfg_24(20)).unwrap();
    let mut rng = seeded(2);
    let x = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let (_, features) = model.forward(&x, true).unwrap();
    let features = features.unwrap();
    assert_eq!(features.num_layers(), 24);
    for layer in 1..=24 {
        let t = features.layer(layer).unwrap();
        let expect = if layer < 8 {
            32
        } else if layer < 16 {
            16
        } else {
            8
        };
        // pooling applies after layers 8 and 16 themselves
        let expect = if layer == 8 { 16 } else if layer == 16 { 8 } else { expect };
        assert_eq!(t.shape(), &[1, 20, expect, expect], "layer {layer}");
        assert!(t.data().iter().all(|&v| v >= 0.0), "layer {layer} not post-relu");
    }
    assert!(features.layer(0).is_err());
    assert!(features.layer(25).is_err());
}

#[test]
fn forward_is_deterministic_for_fixed_seed() {
    let a = FaModel::new(cfg_24(20)).unwrap();
    let b = FaModel::new(cfg_24(20)).unwrap();
    let mut rng = seeded(3);
    let x = Tensor::rand_uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng);
    let la = a.logits(&x).unwrap();
    let lb = b.logits(&x).unwrap();
    assert_eq!(la, lb);
    let lc = a.logits(&x).unwrap();
    assert_eq!(la, lc);
}

#[test]
fn channel_ownership_is_a_pure_function_of_config() {
    let cfg = cfg_24(20);
    let own = cfg.channel_ownership();
    assert_eq!(own.len(), 20);
    assert_eq!(own[0], 0);
    assert_eq!(own[1], 0);
    assert_eq!(own[2], 1);
    assert_eq!(own[19], 9);
    assert_eq!(cfg.maps_per_class(), 2);
}

#[test]
fn config_validation_rejects_bad_setups() {
    let mut c = cfg_24(20);
    c.channels = 21; // not divisible by classes under the pooling head
    assert!(matches!(FaModel::new(c), Err(FaError::Config(_))));

    let mut c = cfg_24(20);
    c.pool_after = vec![8, 8];
    assert!(matches!(FaModel::new(c), Err(FaError::Config(_))));

    let mut c = cfg_24(20);
    c.pool_after = vec![8, 24]; // pool index must stay below num_layers
    assert!(matches!(FaModel::new(c), Err(FaError::Config(_))));

    let mut c = cfg_24(20);
    c.input_height = 30; // not divisible by 2^2
    assert!(matches!(FaModel::new(c), Err(FaError::Config(_))));

    let model = FaModel::new(cfg_24(20)).unwrap();
    let x = Tensor::zeros(&[1, 3, 16, 16]);
    assert!(matches!(model.forward(&x, false), Err(FaError::Config(_))));
}

fn small_cfg(channels: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 3,
        channels,
        num_classes: 10,
        input_channels: 1,
        input_height: 8,
        input_width: 8,
        pool_after: vec![],
        head: HeadKind::Pooling,
        skip: SkipKind::Dampened,
        seed: 5,
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.facn");
    let model = FaModel::new(small_cfg(20)).unwrap();
    model.save_checkpoint(&path).unwrap();
    let loaded = FaModel::load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config, model.config);

    let mut rng = seeded(6);
    let x = Tensor::rand_uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
    let a = model.logits(&x).unwrap();
    let b = loaded.logits(&x).unwrap();
    assert_eq!(a, b, "round-tripped forward must be bitwise identical");

    // saving the loaded model reproduces the file byte for byte
    let path2 = dir.path().join("model2.facn");
    loaded.save_checkpoint(&path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn truncated_checkpoint_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.facn");
    let model = FaModel::new(small_cfg(20)).unwrap();
    model.save_checkpoint(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [3usize, 9, 40, bytes.len() / 2, bytes.len() - 5] {
        let path_cut = dir.path().join(format!("cut{cut}.facn"));
        std::fs::write(&path_cut, &bytes[..cut]).unwrap();
        match FaModel::load_checkpoint(&path_cut) {
            Err(FaError::Checkpoint(msg)) => {
                assert!(msg.contains("truncated"), "cut {cut}: {msg}")
            }
            other => panic!("cut {cut}: expected checkpoint error, got {other:?}"),
        }
    }

    let path_bad = dir.path().join("bad_magic.facn");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path_bad, &bad).unwrap();
    assert!(matches!(FaModel::load_checkpoint(&path_bad), Err(FaError::Checkpoint(_))));
}

#[test]
fn config_mismatch_names_the_first_offending_tensor() {
    // a file whose config says K=30 but whose tensor table comes from a
    // K=20 model must fail on the first tensor, by name
    let dir = tempfile::tempdir().unwrap();
    let path_a = dir.path().join("a.facn");
    let path_b = dir.path().join("b.facn");
    FaModel::new(small_cfg(20)).unwrap().save_checkpoint(&path_a).unwrap();
    FaModel::new(small_cfg(30)).unwrap().save_checkpoint(&path_b).unwrap();
    let a = std::fs::read(&path_a).unwrap();
    let b = std::fs::read(&path_b).unwrap();

    let header_len = |bytes: &[u8]| -> usize {
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        12 + json_len
    };
    let mut spliced = b[..header_len(&b)].to_vec();
    spliced.extend_from_slice(&a[header_len(&a)..]);
    let path_s = dir.path().join("spliced.facn");
    std::fs::write(&path_s, spliced).unwrap();

    match FaModel::load_checkpoint(&path_s) {
        Err(FaError::Checkpoint(msg)) => {
            assert!(msg.contains("block01.conv.weight"), "{msg}");
            assert!(msg.contains("does not match"), "{msg}");
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn linear_head_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("linear.facn");
    let mut cfg = small_cfg(20);
    cfg.head = HeadKind::Linear;
    cfg.skip = SkipKind::Vanilla;
    let model = FaModel::new(cfg).unwrap();
    model.save_checkpoint(&path).unwrap();
    let loaded = FaModel::load_checkpoint(&path).unwrap();
    let mut rng = seeded(8);
    let x = Tensor::rand_uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
    assert_eq!(model.logits(&x).unwrap(), loaded.logits(&x).unwrap());
}
