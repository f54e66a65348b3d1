mod common;

use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use common::{copy_config, copy_examples, copy_features};
use mmt_core::autodiff::Tensor;
use mmt_core::error::{CheckpointError, Error};
use mmt_core::model::{ModelConfig, Seq2Seq};
use mmt_core::trainer::{
    adam_step, clip_grad_norm, train, AdamConfig, AdamState, Checkpoint, FeatureSplits, Mode,
    TrainConfig,
};

fn one_param_store(value: f64) -> Seq2Seq<f64> {
    let cfg = ModelConfig {
        emb_size: 1,
        hidden_size: 1,
        n_layers: 1,
        src_vocab: 1,
        tgt_vocab: 1,
        visual_regions: 1,
        visual_dim: 1,
        dropout: 0.0,
    };
    let mut m = Seq2Seq::<f64>::zeroed(cfg).unwrap();
    for t in m.params_mut().values_mut() {
        t.data_mut().fill(value);
    }
    m
}

fn grads_like(m: &Seq2Seq<f64>, g: f64) -> Vec<Vec<f64>> {
    m.params()
        .values()
        .iter()
        .map(|t| vec![g; t.len()])
        .collect()
}

#[test]
fn adam_first_step_matches_hand_computation() {
    let mut m = one_param_store(1.0);
    let mut state = AdamState::new(m.params());
    let grads = grads_like(&m, 1.0);
    adam_step(m.params_mut(), &grads, &mut state, &AdamConfig::default()).unwrap();
    let expected = 1.0 - 0.001 / (1.0 + 1e-8);
    for t in m.params().values() {
        for &v in t.data() {
            assert_abs_diff_eq!(v, expected, epsilon = 1e-9);
        }
    }
    assert_eq!(state.t, 1);
}

#[test]
fn zero_gradients_leave_fresh_parameters_unchanged() {
    let mut m = one_param_store(0.37);
    let before = m.params().clone();
    let mut state = AdamState::new(m.params());
    let grads = grads_like(&m, 0.0);
    adam_step(m.params_mut(), &grads, &mut state, &AdamConfig::default()).unwrap();
    assert_eq!(m.params(), &before);
}

#[test]
fn identical_histories_give_identical_updates() {
    let mut m = one_param_store(0.5);
    let mut state = AdamState::new(m.params());
    for g in [0.3, -1.2, 0.7] {
        let grads = grads_like(&m, g);
        adam_step(m.params_mut(), &grads, &mut state, &AdamConfig::default()).unwrap();
    }
    let first = m.params().values()[0].data()[0];
    assert!(m
        .params()
        .values()
        .iter()
        .all(|t| t.data().iter().all(|&v| v == first)));
}

#[test]
fn non_finite_gradient_aborts_and_names_parameter() {
    let mut m = one_param_store(0.5);
    let before = m.params().clone();
    let mut state = AdamState::new(m.params());
    let mut grads = grads_like(&m, 0.1);
    grads[3][0] = f64::NAN;
    let name = m.params().names()[3].clone();
    match adam_step(m.params_mut(), &grads, &mut state, &AdamConfig::default()) {
        Err(Error::NonFiniteGradient(n)) => assert_eq!(n, name),
        other => panic!("expected non-finite gradient error, got {other:?}"),
    }
    assert_eq!(m.params(), &before);
    assert_eq!(state.t, 0);
}

#[test]
fn clipping_bounds_global_norm() {
    let mut grads = vec![vec![3.0f64], vec![4.0]];
    let norm = clip_grad_norm(&mut grads, 1.0);
    assert_abs_diff_eq!(norm, 5.0);
    assert_abs_diff_eq!(grads[0][0], 0.6, epsilon = 1e-12);
    assert_abs_diff_eq!(grads[1][0], 0.8, epsilon = 1e-12);
    let mut small = vec![vec![0.1f64]];
    clip_grad_norm(&mut small, 1.0);
    assert_eq!(small[0][0], 0.1);
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs: epochs,
        seed: 5,
        mode: Mode::Scratch,
        adam: AdamConfig {
            lr: 0.005,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_keeps_parameters_bitwise() {
    let cfg = copy_config();
    let data = copy_examples(16, 1);
    let store = copy_features(&data, &cfg, 2);
    let model = Seq2Seq::<f32>::new(cfg, 3).unwrap();
    let mut tc = quick_config(1);
    tc.adam.lr = 0.0;
    let out = train(
        &tc,
        model.clone(),
        &data,
        &data,
        Some(FeatureSplits::shared(&store)),
        BTreeMap::new(),
        |_| {},
    )
    .unwrap();
    assert_eq!(out.last.params(), model.params());
}

#[test]
fn training_is_deterministic_and_selects_best_epoch() {
    let cfg = copy_config();
    let data = copy_examples(16, 1);
    let store = copy_features(&data, &cfg, 2);
    let run = || {
        let model = Seq2Seq::<f32>::new(cfg.clone(), 3).unwrap();
        train(
            &quick_config(4),
            model,
            &data,
            &data,
            Some(FeatureSplits::shared(&store)),
            BTreeMap::new(),
            |_| {},
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    let losses = |o: &mmt_core::trainer::TrainOutcome| -> Vec<u64> {
        o.log.iter().map(|e| e.train_loss.to_bits()).collect()
    };
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
    assert_eq!(a.log.len(), 4);
    for e in &a.log {
        assert!(e.valid_ppl >= 1.0);
        assert!(a.best.valid_ppl <= e.valid_ppl);
    }
    let line = a.log[0].to_string();
    assert!(line.starts_with("epoch=1 train_loss="), "{line}");
    assert!(line.contains(" valid_ppl=") && line.contains(" time_s="));
}

#[test]
fn copy_task_loss_decreases_over_first_epochs() {
    let cfg = copy_config();
    let data = copy_examples(32, 7);
    let store = copy_features(&data, &cfg, 8);
    let model = Seq2Seq::<f32>::new(cfg, 9).unwrap();
    let out = train(
        &quick_config(5),
        model,
        &data,
        &data,
        Some(FeatureSplits::shared(&store)),
        BTreeMap::new(),
        |_| {},
    )
    .unwrap();
    for w in out.log.windows(2) {
        assert!(w[1].train_loss < w[0].train_loss, "{:?}", out.log);
    }
}

#[test]
fn multimodal_modes_require_every_feature() {
    let cfg = copy_config();
    let mut data = copy_examples(4, 1);
    let store = copy_features(&data, &cfg, 2);
    data[2].feature_id = Some("999_missing".into());
    let model = Seq2Seq::<f32>::new(cfg, 3).unwrap();
    let err = train(
        &quick_config(1),
        model.clone(),
        &data,
        &data,
        Some(FeatureSplits::shared(&store)),
        BTreeMap::new(),
        |_| {},
    )
    .unwrap_err();
    assert!(
        matches!(&err, Error::MissingFeature(id) if id == "999_missing"),
        "{err}"
    );
    assert!(train(
        &quick_config(1),
        model,
        &data,
        &data,
        None,
        BTreeMap::new(),
        |_| {}
    )
    .is_err());
}

#[test]
fn empty_data_is_an_error() {
    let model = Seq2Seq::<f32>::new(copy_config(), 3).unwrap();
    let mut tc = quick_config(1);
    tc.mode = Mode::Pretrain;
    let err = train(&tc, model, &[], &[], None, BTreeMap::new(), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Empty(_)));
}

#[test]
fn over_long_pairs_are_dropped() {
    let cfg = copy_config();
    let mut data = copy_examples(6, 1);
    data[0].src = vec![4; 9];
    let mut tc = quick_config(1);
    tc.mode = Mode::Pretrain;
    tc.max_len = 8;
    let model = Seq2Seq::<f32>::new(cfg, 3).unwrap();
    let out = train(&tc, model, &data, &data[1..], None, BTreeMap::new(), |_| {}).unwrap();
    assert_eq!(out.dropped, 1);
}

#[test]
fn pretrain_checkpoint_hands_off_to_finetune() {
    let cfg = copy_config();
    let data = copy_examples(8, 4);
    let store = copy_features(&data, &cfg, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.mmck");
    let mut tc = quick_config(2);
    tc.mode = Mode::Pretrain;
    let pre = train(
        &tc,
        Seq2Seq::new(cfg.clone(), 1).unwrap(),
        &data,
        &data,
        None,
        BTreeMap::new(),
        |_| {},
    )
    .unwrap();
    pre.best.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.model.config(), &cfg);
    tc.mode = Mode::Finetune;
    let fine = train(
        &tc,
        loaded.model,
        &data,
        &data,
        Some(FeatureSplits::shared(&store)),
        BTreeMap::new(),
        |_| {},
    )
    .unwrap();
    assert_eq!(fine.log.len(), 2);
}

fn sample_checkpoint() -> Checkpoint {
    let mut metadata = BTreeMap::new();
    metadata.insert("tgt_vocab_digest".to_string(), "abc123".to_string());
    Checkpoint {
        model: Seq2Seq::new(copy_config(), 42).unwrap(),
        train: TrainConfig {
            clip_norm: Some(5.0),
            ..TrainConfig::default()
        },
        epoch: 7,
        valid_ppl: 3.1234567890123457,
        metadata,
    }
}

#[test]
fn checkpoint_round_trips_bitwise() {
    let ck = sample_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.mmck");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.model.params(), ck.model.params());
    assert_eq!(back.model.config(), ck.model.config());
    assert_eq!(back.train, ck.train);
    assert_eq!(back.epoch, 7);
    assert_eq!(back.valid_ppl.to_bits(), ck.valid_ppl.to_bits());
    assert_eq!(back.metadata, ck.metadata);
    assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
}

#[test]
fn checkpoint_header_layout() {
    let bytes = sample_checkpoint().to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"MMCK");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let text = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
    assert!(text.contains("model.hidden_size=32\n"));
    assert!(text.contains("train.batch_size=40\n"));
}

fn checkpoint_error(bytes: &[u8]) -> CheckpointError {
    match Checkpoint::from_bytes(bytes) {
        Err(Error::Checkpoint(e)) => e,
        other => panic!("expected checkpoint error, got {other:?}"),
    }
}

#[test]
fn checkpoint_defects_have_distinct_errors() {
    let bytes = sample_checkpoint().to_bytes().unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        checkpoint_error(&bad),
        CheckpointError::BadMagic(_)
    ));

    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(
        checkpoint_error(&bad),
        CheckpointError::UnsupportedVersion(2)
    ));

    for cut in [2, 10, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(
                checkpoint_error(&bytes[..cut]),
                CheckpointError::Truncated(_)
            ),
            "cut {cut}"
        );
    }

    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(
        checkpoint_error(&bad),
        CheckpointError::TrailingBytes(1)
    ));

    // Same-length edit of the config block: hidden_size 32 -> 31.
    let find = |needle: &[u8]| {
        bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap()
    };
    let at = find(b"model.hidden_size=32") + "model.hidden_size=3".len();
    let mut bad = bytes.clone();
    bad[at] = b'1';
    assert!(matches!(
        checkpoint_error(&bad),
        CheckpointError::ShapeMismatch(_)
    ));

    let at = find(b"model.emb_size");
    let mut bad = bytes.clone();
    bad[at] = b'q';
    assert!(matches!(
        checkpoint_error(&bad),
        CheckpointError::MalformedConfig(_)
    ));
}

#[test]
fn train_config_keys_round_trip() {
    let tc = TrainConfig {
        clip_norm: Some(5.0),
        mode: Mode::Finetune,
        ..TrainConfig::default()
    };
    let mut back = TrainConfig::default();
    for (k, v) in tc.to_pairs() {
        assert!(back.set(k, &v).unwrap());
    }
    assert_eq!(back, tc);
    assert!(!back.set("nope", "1").unwrap());
    assert!(back.set("mode", "sideways").is_err());
    let _ = Tensor::<f32>::zeros(&[1]);
}
