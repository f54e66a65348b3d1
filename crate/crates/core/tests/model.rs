use approx::assert_abs_diff_eq;
use mmt_core::autodiff::Tensor;
use mmt_core::features::VisualFeatures;
use mmt_core::model::{AttentionKind, Batch, ModelConfig, Seq2Seq};
use mmt_core::rng;
use rand::Rng as _;

fn micro() -> ModelConfig {
    ModelConfig {
        emb_size: 4,
        hidden_size: 5,
        n_layers: 2,
        src_vocab: 7,
        tgt_vocab: 7,
        visual_regions: 3,
        visual_dim: 2,
        dropout: 0.3,
    }
}

fn random_features(cfg: &ModelConfig, seed: u64) -> VisualFeatures {
    let mut r = rng::seeded(seed);
    let data = (0..cfg.visual_regions * cfg.visual_dim)
        .map(|_| r.random_range(0.0f32..1.0))
        .collect();
    VisualFeatures::new(cfg.visual_regions, cfg.visual_dim, data).unwrap()
}

fn sample_batch(cfg: &ModelConfig) -> Batch {
    Batch {
        src: vec![vec![4, 5, 6], vec![5], vec![6, 4, 4, 5]],
        tgt: vec![vec![6, 4], vec![5, 5, 6, 4], vec![4]],
        visual: Some((0..3).map(|i| random_features(cfg, i)).collect()),
    }
}

#[test]
fn length_one_source_gives_one_annotation_row() {
    let cfg = ModelConfig {
        src_vocab: 10,
        tgt_vocab: 10,
        n_layers: 1,
        ..ModelConfig::default()
    };
    let model = Seq2Seq::<f32>::new(cfg, 1).unwrap();
    let enc = model.encode(&[7]).unwrap();
    assert_eq!(enc.annotations.shape(), &[1, 1000]);
}

#[test]
fn zero_parameters_give_zero_annotations() {
    let model = Seq2Seq::<f64>::zeroed(micro()).unwrap();
    let enc = model.encode(&[4, 5, 6, 1]).unwrap();
    assert!(enc.annotations.data().iter().all(|&v| v == 0.0));
}

#[test]
fn encode_rejects_out_of_range_ids() {
    let model = Seq2Seq::<f64>::new(micro(), 0).unwrap();
    assert!(model.encode(&[4, 7]).is_err());
    assert!(model.encode(&[]).is_err());
}

#[test]
fn swapped_directions_mirror_reversed_input() {
    let cfg = ModelConfig {
        n_layers: 1,
        ..micro()
    };
    let model = Seq2Seq::<f64>::new(cfg.clone(), 11).unwrap();
    let mut swapped = model.clone();
    let names: Vec<String> = model.params().names().to_vec();
    for name in names.iter().filter(|n| n.starts_with("enc.l0.fwd.")) {
        let twin = name.replace(".fwd.", ".bwd.");
        *swapped.params_mut().get_mut(name).unwrap() = model.params().get(&twin).unwrap().clone();
        *swapped.params_mut().get_mut(&twin).unwrap() = model.params().get(name).unwrap().clone();
    }
    let src = [4, 6, 5, 5, 2];
    let mut rev = src;
    rev.reverse();
    let a = model.encode(&src).unwrap();
    let b = swapped.encode(&rev).unwrap();
    let h = cfg.hidden_size;
    let n = src.len();
    for t in 0..n {
        let fwd = &a.annotations.row(t)[..h];
        let bwd = &b.annotations.row(n - 1 - t)[h..];
        assert_eq!(fwd, bwd, "position {t}");
    }
}

fn engineered_attention() -> Seq2Seq<f64> {
    let cfg = micro();
    let mut model = Seq2Seq::<f64>::zeroed(cfg).unwrap();
    let [w_key, _, _, v] = model
        .attention_param_names(AttentionKind::Text)
        .map(String::from);
    model.params_mut().get_mut(&w_key).unwrap().data_mut()[0] = 1.0;
    model.params_mut().get_mut(&v).unwrap().data_mut()[0] = 2.0;
    model
}

#[test]
fn engineered_scores_give_quarter_and_three_quarters() {
    // score = 2 tanh(k[0]); choose k[0] so the scores are 0 and ln 3.
    let model = engineered_attention();
    let k1 = (3.0f64.ln() / 2.0).atanh();
    let mut keys = vec![0.0; 20];
    keys[10] = k1;
    keys[11] = 1.0;
    let keys = Tensor::new(vec![2, 10], keys).unwrap();
    let (ctx, w) = model.attend(AttentionKind::Text, &[0.0; 5], &keys).unwrap();
    assert_abs_diff_eq!(w[0], 0.25, epsilon = 1e-12);
    assert_abs_diff_eq!(w[1], 0.75, epsilon = 1e-12);
    assert_abs_diff_eq!(ctx[0], 0.75 * k1, epsilon = 1e-12);
    assert_abs_diff_eq!(ctx[1], 0.75, epsilon = 1e-12);
}

#[test]
fn single_key_and_equal_scores() {
    let model = Seq2Seq::<f64>::new(micro(), 3).unwrap();
    let row: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    let one = Tensor::new(vec![1, 10], row.clone()).unwrap();
    let (ctx, w) = model.attend(AttentionKind::Text, &[0.1; 5], &one).unwrap();
    assert_eq!(w, vec![1.0]);
    for (c, r) in ctx.iter().zip(&row) {
        assert_abs_diff_eq!(c, r, epsilon = 1e-12);
    }
    let same = Tensor::new(vec![4, 10], row.repeat(4)).unwrap();
    let (_, w) = model.attend(AttentionKind::Text, &[0.1; 5], &same).unwrap();
    for x in w {
        assert_abs_diff_eq!(x, 0.25, epsilon = 1e-12);
    }
}

#[test]
fn zero_visual_features_give_zero_context() {
    let model = Seq2Seq::<f64>::new(micro(), 4).unwrap();
    let (ctx, w) = model
        .attend(
            AttentionKind::Visual,
            &[0.3, -0.2, 0.1, 0.0, 0.5],
            &Tensor::zeros(&[3, 2]),
        )
        .unwrap();
    assert!(ctx.iter().all(|&c| c == 0.0));
    assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
}

#[test]
fn decode_step_contract() {
    let cfg = micro();
    let model = Seq2Seq::<f32>::new(cfg.clone(), 5).unwrap();
    let feats = random_features(&cfg, 9);
    let ctx = model.prepare(&[4, 5, 6], Some(&feats)).unwrap();
    let mut state = ctx.initial_state().clone();
    for prev in [2, 4, 6, 5] {
        let out = model.step(&ctx, &state, prev).unwrap();
        assert_eq!(out.logits.len(), cfg.tgt_vocab);
        assert_eq!(out.text_weights.len(), 3);
        assert_eq!(out.visual_weights.len(), cfg.visual_regions);
        for w in [&out.text_weights, &out.visual_weights] {
            assert!(w.iter().all(|&x| x > 0.0));
            assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        state = out.state;
    }
    assert!(model.step(&ctx, &state, 7).is_err());
    let wrong = VisualFeatures::zeros(4, 2);
    assert!(model.prepare(&[4], Some(&wrong)).is_err());
}

#[test]
fn uniform_logits_give_log_vocab() {
    let cfg = micro();
    let mut model = Seq2Seq::<f64>::new(cfg.clone(), 6).unwrap();
    for name in ["out.proj.w", "out.proj.b"] {
        model
            .params_mut()
            .get_mut(name)
            .unwrap()
            .data_mut()
            .fill(0.0);
    }
    let loss = model
        .forward_loss(&sample_batch(&cfg), false, &mut rng::seeded(0))
        .unwrap();
    assert_abs_diff_eq!(loss, (cfg.tgt_vocab as f64).ln(), epsilon = 1e-12);
}

#[test]
fn batch_loss_is_token_weighted_mean_of_sentence_losses() {
    let cfg = micro();
    let model = Seq2Seq::<f64>::new(cfg.clone(), 7).unwrap();
    let batch = sample_batch(&cfg);
    let whole = model
        .forward_loss(&batch, false, &mut rng::seeded(0))
        .unwrap();
    let mut total = 0.0;
    for i in 0..batch.len() {
        let single = Batch {
            src: vec![batch.src[i].clone()],
            tgt: vec![batch.tgt[i].clone()],
            visual: batch.visual.as_ref().map(|v| vec![v[i].clone()]),
        };
        let l = model
            .forward_loss(&single, false, &mut rng::seeded(0))
            .unwrap();
        total += l * (batch.tgt[i].len() + 1) as f64;
    }
    assert_abs_diff_eq!(
        whole,
        total / batch.n_target_tokens() as f64,
        epsilon = 1e-12
    );
}

#[test]
fn loss_is_permutation_invariant_in_eval_mode() {
    let cfg = micro();
    let model = Seq2Seq::<f32>::new(cfg.clone(), 8).unwrap();
    let batch = sample_batch(&cfg);
    let order = [2, 0, 1];
    let permuted = Batch {
        src: order.iter().map(|&i| batch.src[i].clone()).collect(),
        tgt: order.iter().map(|&i| batch.tgt[i].clone()).collect(),
        visual: batch
            .visual
            .as_ref()
            .map(|v| order.iter().map(|&i| v[i].clone()).collect()),
    };
    let a = model
        .forward_loss(&batch, false, &mut rng::seeded(0))
        .unwrap();
    let b = model
        .forward_loss(&permuted, false, &mut rng::seeded(0))
        .unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn eval_mode_is_bitwise_repeatable() {
    let cfg = micro();
    let model = Seq2Seq::<f32>::new(cfg.clone(), 9).unwrap();
    let batch = sample_batch(&cfg);
    let a = model
        .forward_loss(&batch, false, &mut rng::seeded(1))
        .unwrap();
    let b = model
        .forward_loss(&batch, false, &mut rng::seeded(2))
        .unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    let t1 = model
        .forward_loss(&batch, true, &mut rng::seeded(1))
        .unwrap();
    let t2 = model
        .forward_loss(&batch, true, &mut rng::seeded(1))
        .unwrap();
    assert_eq!(t1.to_bits(), t2.to_bits());
}

#[test]
fn empty_batch_is_an_error() {
    let model = Seq2Seq::<f32>::new(micro(), 0).unwrap();
    assert!(model
        .forward_loss(&Batch::default(), false, &mut rng::seeded(0))
        .is_err());
}

#[test]
fn text_only_batch_matches_explicit_zero_features() {
    let cfg = micro();
    let model = Seq2Seq::<f32>::new(cfg.clone(), 10).unwrap();
    let mut batch = sample_batch(&cfg);
    batch.visual = None;
    let a = model
        .forward_loss(&batch, false, &mut rng::seeded(0))
        .unwrap();
    batch.visual = Some(vec![VisualFeatures::zeros(3, 2); 3]);
    let b = model
        .forward_loss(&batch, false, &mut rng::seeded(0))
        .unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn micro_model_gradients_match_finite_differences() {
    let cfg = micro();
    let mut model = Seq2Seq::<f64>::new(cfg.clone(), 12).unwrap();
    // Larger weights keep every gradient well above finite-difference noise.
    for t in model.params_mut().values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 8.0);
    }
    let batch = sample_batch(&cfg);
    let eval = model.gradient_check(&batch, false, 1e-5, 0).unwrap();
    assert!(eval < 1e-3, "eval-mode relative error {eval}");
    let train = model.gradient_check(&batch, true, 1e-5, 3).unwrap();
    assert!(train < 1e-3, "train-mode relative error {train}");
}
