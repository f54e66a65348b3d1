#![allow(dead_code)]

use mmt_core::features::{example_key, synthetic_records, FeatureStore};
use mmt_core::model::ModelConfig;
use mmt_core::rng;
use mmt_core::subword::RESERVED;
use mmt_core::trainer::Example;
use rand::Rng as _;

pub const COPY_SYMBOLS: usize = 6;

pub fn copy_config() -> ModelConfig {
    ModelConfig {
        emb_size: 16,
        hidden_size: 32,
        n_layers: 1,
        src_vocab: RESERVED.len() + COPY_SYMBOLS,
        tgt_vocab: RESERVED.len() + COPY_SYMBOLS,
        visual_regions: 3,
        visual_dim: 2,
        dropout: 0.0,
    }
}

/// `n` distinct random sequences (length 2 to 5) paired with themselves.
pub fn copy_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut r = rng::stream(seed, rng::streams::FIXTURE);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = r.random_range(2..=5);
        let seq: Vec<usize> = (0..len)
            .map(|_| RESERVED.len() + r.random_range(0..COPY_SYMBOLS))
            .collect();
        if seen.insert(seq.clone()) {
            let row = out.len();
            out.push(Example {
                src: seq.clone(),
                tgt: seq,
                feature_id: Some(example_key(row, &format!("img{row}"))),
            });
        }
    }
    out
}

pub fn copy_features(examples: &[Example], cfg: &ModelConfig, seed: u64) -> FeatureStore {
    let ids: Vec<String> = examples
        .iter()
        .map(|e| e.feature_id.clone().expect("feature id"))
        .collect();
    let records = synthetic_records(&ids, cfg.visual_regions, cfg.visual_dim, seed);
    FeatureStore::from_records(cfg.visual_regions, cfg.visual_dim, records).expect("store")
}

/// Hand-built next-token distributions: the log-probabilities after a prefix
/// are a seeded function of the prefix alone.
pub struct ToyScorer {
    pub vocab: usize,
    pub seed: u64,
}

impl ToyScorer {
    pub fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let key = prefix
            .iter()
            .fold(self.seed.wrapping_mul(31).wrapping_add(17), |h, &t| {
                h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1)
            });
        let mut r = rng::seeded(key);
        let logits: Vec<f64> = (0..self.vocab).map(|_| r.random_range(-3.0..3.0)).collect();
        mmt_core::inference::log_softmax(&logits)
    }
}

impl mmt_core::inference::StepScorer for ToyScorer {
    /// `None` before the first step, then the tokens emitted so far.
    type State = Option<Vec<usize>>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn initial_state(&self) -> Self::State {
        None
    }

    fn step(&self, state: &Self::State, prev: usize) -> mmt_core::Result<(Vec<f64>, Self::State)> {
        let prefix = match state {
            None => Vec::new(),
            Some(p) => {
                let mut p = p.clone();
                p.push(prev);
                p
            }
        };
        Ok((self.log_probs(&prefix), Some(prefix)))
    }
}

/// Best sequence by exhaustive enumeration: a sequence ends at `</s>` (scored)
/// or after `max_len` tokens (no end token scored).
pub fn exhaustive_best(toy: &ToyScorer, max_len: usize) -> (Vec<usize>, f64) {
    fn walk(
        toy: &ToyScorer,
        prefix: &mut Vec<usize>,
        score: f64,
        max_len: usize,
        best: &mut (Vec<usize>, f64),
    ) {
        if prefix.len() == max_len {
            if score > best.1 {
                *best = (prefix.clone(), score);
            }
            return;
        }
        let lp = toy.log_probs(prefix);
        for (tok, &l) in lp.iter().enumerate() {
            if tok == mmt_core::subword::EOS {
                if score + l > best.1 {
                    *best = (prefix.clone(), score + l);
                }
            } else {
                prefix.push(tok);
                walk(toy, prefix, score + l, max_len, best);
                prefix.pop();
            }
        }
    }
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    walk(toy, &mut Vec::new(), 0.0, max_len, &mut best);
    best
}
