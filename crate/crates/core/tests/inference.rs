mod common;

use std::collections::BTreeMap;

use common::{copy_config, exhaustive_best, ToyScorer};
use mmt_core::corpus::SourceLine;
use mmt_core::features::{example_key, synthetic_records, FeatureStore};
use mmt_core::inference::{
    beam_search, check_compatible, greedy_decode, score_sequence, select_hypothesis,
    translate_corpus, write_translations, BeamConfig, Codec, Hypothesis, ModelScorer, META_BPE,
    META_SRC_VOCAB, META_TGT_VOCAB,
};
use mmt_core::model::{ModelConfig, Seq2Seq};
use mmt_core::subword::{build_vocab, learn_bpe, UNK};
use mmt_core::trainer::{Checkpoint, TrainConfig};
use mmt_core::Error;

fn hyp(tokens: &[usize], ll: f64) -> Hypothesis {
    Hypothesis {
        tokens: tokens.to_vec(),
        log_likelihood: ll,
        finished: true,
    }
}

#[test]
fn selection_filters_unk_then_takes_best() {
    let a = [hyp(&[5, UNK, 6], -1.2), hyp(&[5, 6], -2.0)];
    let b = [hyp(&[7, 8], -1.5), hyp(&[7], -3.0)];
    let (m, h) = select_hypothesis(&[&a, &b], UNK).unwrap();
    assert_eq!((m, h), (1, &b[0]));
}

#[test]
fn selection_without_unk_is_plain_argmax() {
    let a = [hyp(&[5], -0.7), hyp(&[6], -0.9)];
    let b = [hyp(&[7], -0.8)];
    let (m, h) = select_hypothesis(&[&a, &b], UNK).unwrap();
    assert_eq!((m, h), (0, &a[0]));
}

#[test]
fn selection_falls_back_when_everything_has_unk() {
    let a = [hyp(&[UNK], -2.0)];
    let b = [hyp(&[5, UNK], -1.0), hyp(&[UNK, UNK], -4.0)];
    let (m, h) = select_hypothesis(&[&a, &b], UNK).unwrap();
    assert_eq!((m, h), (1, &b[0]));
    assert!(select_hypothesis(&[&[], &[]], UNK).is_err());
}

#[test]
fn selection_ties_prefer_first_model() {
    let a = [hyp(&[5], -1.0)];
    let b = [hyp(&[6], -1.0)];
    assert_eq!(select_hypothesis(&[&a, &b], UNK).unwrap().0, 0);
}

#[test]
fn covering_beam_finds_exhaustive_argmax() {
    for seed in 0..10 {
        let toy = ToyScorer { vocab: 4, seed };
        let (tokens, score) = exhaustive_best(&toy, 3);
        let cfg = BeamConfig {
            width: 64,
            max_len: 3,
            ..BeamConfig::default()
        };
        let best = &beam_search(&toy, &cfg).unwrap()[0];
        assert_eq!(best.tokens, tokens, "seed {seed}");
        assert!((best.log_likelihood - score).abs() < 1e-12);
    }
}

#[test]
fn width_one_is_greedy() {
    for seed in 0..10 {
        let toy = ToyScorer { vocab: 5, seed };
        let cfg = BeamConfig {
            width: 1,
            max_len: 4,
            ..BeamConfig::default()
        };
        let beam = &beam_search(&toy, &cfg).unwrap()[0];
        let greedy = greedy_decode(&toy, 4).unwrap();
        assert_eq!(beam.tokens, greedy.tokens);
        assert_eq!(beam.log_likelihood, greedy.log_likelihood);
    }
}

#[test]
fn nbest_is_sorted_and_bounded() {
    let toy = ToyScorer { vocab: 5, seed: 3 };
    let out = beam_search(
        &toy,
        &BeamConfig {
            width: 3,
            max_len: 4,
            ..BeamConfig::default()
        },
    )
    .unwrap();
    assert!(out.len() <= 3 && !out.is_empty());
    assert!(out
        .windows(2)
        .all(|w| w[0].log_likelihood >= w[1].log_likelihood));
    assert!(out.iter().all(|h| h.log_likelihood <= 0.0));
    assert!(beam_search(
        &toy,
        &BeamConfig {
            width: 0,
            ..BeamConfig::default()
        }
    )
    .is_err());
}

fn random_model(seed: u64) -> Seq2Seq<f32> {
    Seq2Seq::new(copy_config(), seed).unwrap()
}

#[test]
fn model_scores_match_fresh_forward_pass() {
    let model = random_model(4);
    let scorer = ModelScorer::new(&model, &[4, 5, 6, 7], None).unwrap();
    let cfg = BeamConfig {
        width: 5,
        max_len: 6,
        ..BeamConfig::default()
    };
    let out = beam_search(&scorer, &cfg).unwrap();
    assert_eq!(out.len(), 5);
    for h in &out {
        let fresh = score_sequence(
            &ModelScorer::new(&model, &[4, 5, 6, 7], None).unwrap(),
            &h.tokens,
            h.ended(6),
        )
        .unwrap();
        assert!(
            (fresh - h.log_likelihood).abs() < 1e-5,
            "{fresh} vs {}",
            h.log_likelihood
        );
    }
    let greedy = greedy_decode(&scorer, 6).unwrap();
    let one = &beam_search(&scorer, &BeamConfig { width: 1, ..cfg }).unwrap()[0];
    assert_eq!(one.tokens, greedy.tokens);
}

fn codec() -> Codec {
    let src = ["a b c", "b c d e", "c a"];
    let tgt = ["d e f", "e f", "f d d"];
    let words = src.iter().chain(&tgt).flat_map(|l| l.split_whitespace());
    let bpe = learn_bpe(words, 10);
    let enc = |lines: &[&str]| -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| mmt_core::subword::apply_bpe(&bpe, &l.split_whitespace().collect::<Vec<_>>()))
            .collect()
    };
    Codec {
        src_vocab: build_vocab(enc(&src)),
        tgt_vocab: build_vocab(enc(&tgt)),
        bpe,
    }
}

fn codec_model(codec: &Codec, seed: u64) -> Seq2Seq<f32> {
    let cfg = ModelConfig {
        src_vocab: codec.src_vocab.len(),
        tgt_vocab: codec.tgt_vocab.len(),
        ..copy_config()
    };
    Seq2Seq::new(cfg, seed).unwrap()
}

fn lines() -> Vec<SourceLine> {
    ["a b", "c d e", "", "zzz a"]
        .iter()
        .enumerate()
        .map(|(i, t)| SourceLine {
            image_id: Some(format!("img{i}")),
            text: t.to_string(),
        })
        .collect()
}

fn store(lines: &[SourceLine]) -> FeatureStore {
    let ids: Vec<String> = lines
        .iter()
        .enumerate()
        .map(|(i, l)| example_key(i, l.image_id.as_deref().unwrap()))
        .collect();
    FeatureStore::from_records(3, 2, synthetic_records(&ids, 3, 2, 1)).unwrap()
}

#[test]
fn duplicate_model_is_a_no_op_and_output_aligns_with_input() {
    let codec = codec();
    let model = codec_model(&codec, 2);
    let lines = lines();
    let feats = store(&lines);
    let beam = BeamConfig {
        max_len: 8,
        ..BeamConfig::default()
    };
    let one = translate_corpus(&[&model], &codec, &lines, Some(&feats), &beam).unwrap();
    let two = translate_corpus(&[&model, &model], &codec, &lines, Some(&feats), &beam).unwrap();
    assert_eq!(one, two);
    assert_eq!(one.len(), lines.len());
    assert_eq!(one[2].text, "");
    let again = translate_corpus(&[&model], &codec, &lines, Some(&feats), &beam).unwrap();
    assert_eq!(one, again);

    let dir = tempfile::tempdir().unwrap();
    let (out, side) = (dir.path().join("out.txt"), dir.path().join("out.scores"));
    write_translations(&out, &side, &one).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), lines.len());
    let sidecar = std::fs::read_to_string(&side).unwrap();
    let first: Vec<&str> = sidecar.lines().next().unwrap().split('\t').collect();
    assert_eq!(first[0], "0");
    assert_eq!(first[1], "0");
    assert_eq!(first[2].parse::<f64>().unwrap(), one[0].log_likelihood);
}

#[test]
fn missing_feature_names_the_example() {
    let codec = codec();
    let model = codec_model(&codec, 2);
    let lines = lines();
    let feats =
        FeatureStore::from_records(3, 2, synthetic_records(&["0_img0".to_string()], 3, 2, 1))
            .unwrap();
    let err = translate_corpus(
        &[&model],
        &codec,
        &lines,
        Some(&feats),
        &BeamConfig::default(),
    )
    .unwrap_err();
    assert!(
        matches!(&err, Error::MissingFeature(id) if id.contains("img1")),
        "{err}"
    );
}

#[test]
fn vocabulary_mismatch_is_detected() {
    let codec = codec();
    let mut metadata = BTreeMap::new();
    metadata.insert(META_BPE.to_string(), codec.bpe.digest());
    metadata.insert(META_SRC_VOCAB.to_string(), codec.src_vocab.digest());
    metadata.insert(META_TGT_VOCAB.to_string(), codec.tgt_vocab.digest());
    let ck = Checkpoint {
        model: codec_model(&codec, 1),
        train: TrainConfig::default(),
        epoch: 1,
        valid_ppl: 2.0,
        metadata,
    };
    check_compatible(&ck, &codec.bpe, &codec.src_vocab, &codec.tgt_vocab).unwrap();
    let other_bpe = learn_bpe(["qq", "qq", "rq"], 3);
    let err = check_compatible(&ck, &other_bpe, &codec.src_vocab, &codec.tgt_vocab).unwrap_err();
    assert!(matches!(err, Error::VocabMismatch(_)));
    let err = check_compatible(&ck, &codec.bpe, &codec.tgt_vocab, &codec.src_vocab).unwrap_err();
    assert!(matches!(err, Error::VocabMismatch(_)));
}
