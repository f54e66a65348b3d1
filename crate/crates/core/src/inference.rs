//! Beam search, greedy decoding, and the `<unk>`-filtered best-of-models
//! selection used to produce a translation per source line.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{normalize_text, SourceLine};
use crate::error::{Error, Result};
use crate::features::{example_key, FeatureStore, VisualFeatures};
use crate::model::{DecoderState, Seq2Seq, SourceContext};
use crate::subword::{apply_bpe, decode_bpe, BpeModel, Vocabulary, BOS, EOS, UNK};
use crate::trainer::Checkpoint;

/// Metadata keys under which training records the digests of its inputs.
pub const META_BPE: &str = "bpe_digest";
pub const META_SRC_VOCAB: &str = "src_vocab_digest";
pub const META_TGT_VOCAB: &str = "tgt_vocab_digest";

/// Next-token log-probabilities given a decoder state.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn initial_state(&self) -> Self::State;

    /// Log-probabilities over the vocabulary for the token after `prev`, and
    /// the state that follows.
    fn step(&self, state: &Self::State, prev: usize) -> Result<(Vec<f64>, Self::State)>;
}

/// [`StepScorer`] over a trained model for one source sentence.
pub struct ModelScorer<'m> {
    model: &'m Seq2Seq<f32>,
    ctx: SourceContext<f32>,
}

impl<'m> ModelScorer<'m> {
    pub fn new(
        model: &'m Seq2Seq<f32>,
        src: &[usize],
        visual: Option<&VisualFeatures>,
    ) -> Result<Self> {
        Ok(ModelScorer {
            model,
            ctx: model.prepare(src, visual)?,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderState<f32>;

    fn vocab_size(&self) -> usize {
        self.model.config().tgt_vocab
    }

    fn initial_state(&self) -> Self::State {
        self.ctx.initial_state().clone()
    }

    fn step(&self, state: &Self::State, prev: usize) -> Result<(Vec<f64>, Self::State)> {
        let out = self.model.step(&self.ctx, state, prev)?;
        let logits: Vec<f64> = out.logits.iter().map(|&v| v as f64).collect();
        Ok((log_softmax(&logits), out.state))
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Target ids without `<s>` and `</s>`.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, `</s>` included when generated.
    pub log_likelihood: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn contains(&self, id: usize) -> bool {
        self.tokens.contains(&id)
    }

    /// Whether the score includes a generated `</s>`, as opposed to the
    /// hypothesis being cut at `max_len` or left unfinished.
    pub fn ended(&self, max_len: usize) -> bool {
        self.finished && self.tokens.len() < max_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    /// Exponent `a` of the optional final ranking by `ll / len^a`. Zero keeps
    /// raw log-likelihood ranking.
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: 5,
            max_len: 50,
            length_penalty: 0.0,
        }
    }
}

fn by_score_desc(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_likelihood.total_cmp(&a.log_likelihood)
}

/// Beam search. Each live hypothesis is expanded over the whole vocabulary and
/// the best `width` candidates survive; candidates ending in `</s>` move to
/// the completed pool. A hypothesis reaching `max_len` tokens is closed
/// without further scoring. The search ends early only once the best complete
/// hypothesis scores at least as well as every live one; scores never rise,
/// so no live hypothesis could overtake it. (Stopping as soon as `width`
/// hypotheses are complete is cheaper but can return a worse result for a
/// wider beam.) Results are the best `width` by score, padded with the best
/// live hypotheses if fewer completed.
pub fn beam_search<S: StepScorer>(scorer: &S, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    if cfg.width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let vocab = scorer.vocab_size();
    let mut live: Vec<(Hypothesis, S::State, usize)> = vec![(
        Hypothesis {
            tokens: Vec::new(),
            log_likelihood: 0.0,
            finished: false,
        },
        scorer.initial_state(),
        BOS,
    )];
    let mut completed: Vec<Hypothesis> = Vec::new();

    for _ in 0..cfg.max_len {
        let mut expanded = Vec::with_capacity(live.len());
        let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * vocab);
        for (parent, (hyp, state, prev)) in live.iter().enumerate() {
            let (logp, next) = scorer.step(state, *prev)?;
            if logp.len() != vocab {
                return Err(Error::shape(
                    "beam_search",
                    format!(
                        "scorer returned {} scores for vocabulary {vocab}",
                        logp.len()
                    ),
                ));
            }
            candidates.extend(
                logp.iter()
                    .enumerate()
                    .map(|(tok, &lp)| (hyp.log_likelihood + lp, parent, tok)),
            );
            expanded.push(next);
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(cfg.width);

        let mut next_live = Vec::with_capacity(candidates.len());
        for (score, parent, tok) in candidates {
            let base = &live[parent].0;
            if tok == EOS {
                completed.push(Hypothesis {
                    tokens: base.tokens.clone(),
                    log_likelihood: score,
                    finished: true,
                });
            } else {
                let mut tokens = base.tokens.clone();
                tokens.push(tok);
                next_live.push((
                    Hypothesis {
                        tokens,
                        log_likelihood: score,
                        finished: false,
                    },
                    expanded[parent].clone(),
                    tok,
                ));
            }
        }
        live = next_live;
        let best_done = completed
            .iter()
            .map(|h| h.log_likelihood)
            .fold(f64::NEG_INFINITY, f64::max);
        let best_live = live
            .iter()
            .map(|(h, _, _)| h.log_likelihood)
            .fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best_done >= best_live {
            break;
        }
    }

    if live
        .first()
        .is_some_and(|(h, _, _)| h.tokens.len() >= cfg.max_len)
    {
        completed.extend(live.drain(..).map(|(mut h, _, _)| {
            h.finished = true;
            h
        }));
    }
    completed.sort_by(by_score_desc);
    completed.truncate(cfg.width);
    if completed.len() < cfg.width {
        let mut rest: Vec<Hypothesis> = live.into_iter().map(|(h, _, _)| h).collect();
        rest.sort_by(by_score_desc);
        let missing = cfg.width - completed.len();
        completed.extend(rest.into_iter().take(missing));
        completed.sort_by(by_score_desc);
    }
    if cfg.length_penalty != 0.0 {
        let norm = |h: &Hypothesis| {
            h.log_likelihood / ((h.tokens.len() + 1) as f64).powf(cfg.length_penalty)
        };
        completed.sort_by(|a, b| norm(b).total_cmp(&norm(a)));
    }
    Ok(completed)
}

/// Argmax decoding; ties go to the lowest id.
pub fn greedy_decode<S: StepScorer>(scorer: &S, max_len: usize) -> Result<Hypothesis> {
    let mut state = scorer.initial_state();
    let mut prev = BOS;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_likelihood: 0.0,
        finished: false,
    };
    for _ in 0..max_len {
        let (logp, next) = scorer.step(&state, prev)?;
        let (tok, lp) =
            logp.iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                });
        hyp.log_likelihood += lp;
        if tok == EOS {
            hyp.finished = true;
            return Ok(hyp);
        }
        hyp.tokens.push(tok);
        state = next;
        prev = tok;
    }
    hyp.finished = true;
    Ok(hyp)
}

/// Log-likelihood of `tokens`, followed by `</s>` when `with_end` is set.
pub fn score_sequence<S: StepScorer>(scorer: &S, tokens: &[usize], with_end: bool) -> Result<f64> {
    let mut state = scorer.initial_state();
    let mut prev = BOS;
    let mut total = 0.0;
    for &tok in tokens {
        let (logp, next) = scorer.step(&state, prev)?;
        total += logp[tok];
        state = next;
        prev = tok;
    }
    if with_end {
        let (logp, _) = scorer.step(&state, prev)?;
        total += logp[EOS];
    }
    Ok(total)
}

/// Picks the best-scoring hypothesis across all models' n-best lists after
/// discarding those containing `unk`. If every hypothesis contains `unk`, the
/// overall best is returned. Ties go to the earlier list, then the earlier
/// entry. Returns the list index and the hypothesis.
pub fn select_hypothesis<'h>(
    nbests: &[&'h [Hypothesis]],
    unk: usize,
) -> Result<(usize, &'h Hypothesis)> {
    let all = || {
        nbests
            .iter()
            .enumerate()
            .flat_map(|(m, list)| list.iter().map(move |h| (m, h)))
    };
    let best = |it: &mut dyn Iterator<Item = (usize, &'h Hypothesis)>| {
        it.fold(
            None,
            |acc: Option<(usize, &'h Hypothesis)>, (m, h)| match acc {
                Some((_, b)) if b.log_likelihood >= h.log_likelihood => acc,
                _ => Some((m, h)),
            },
        )
    };
    best(&mut all().filter(|(_, h)| !h.contains(unk)))
        .or_else(|| best(&mut all()))
        .ok_or(Error::Empty("hypothesis lists"))
}

/// Fails unless the checkpoint was trained with exactly these BPE merges and
/// vocabularies.
pub fn check_compatible(
    checkpoint: &Checkpoint,
    bpe: &BpeModel,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<()> {
    let cfg = checkpoint.model.config();
    if cfg.src_vocab != src_vocab.len() || cfg.tgt_vocab != tgt_vocab.len() {
        return Err(Error::VocabMismatch(format!(
            "checkpoint expects vocabularies of {} and {} entries, got {} and {}",
            cfg.src_vocab,
            cfg.tgt_vocab,
            src_vocab.len(),
            tgt_vocab.len()
        )));
    }
    for (key, actual) in [
        (META_BPE, bpe.digest()),
        (META_SRC_VOCAB, src_vocab.digest()),
        (META_TGT_VOCAB, tgt_vocab.digest()),
    ] {
        match checkpoint.metadata.get(key) {
            Some(expected) if *expected == actual => {}
            Some(expected) => {
                return Err(Error::VocabMismatch(format!(
                    "{key}: checkpoint has {expected}, files give {actual}"
                )))
            }
            None => return Err(Error::VocabMismatch(format!("checkpoint lacks {key}"))),
        }
    }
    Ok(())
}

/// Subword segmentation and id mapping shared by every model.
#[derive(Debug, Clone)]
pub struct Codec {
    pub bpe: BpeModel,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

impl Codec {
    pub fn encode_source(&self, text: &str) -> Vec<usize> {
        let words = normalize_text(text);
        self.src_vocab.encode(&apply_bpe(&self.bpe, &words))
    }

    pub fn decode_target(&self, ids: &[usize]) -> String {
        decode_bpe(&self.tgt_vocab.decode(ids)).join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub text: String,
    /// Index of the model whose hypothesis was selected.
    pub model: usize,
    pub log_likelihood: f64,
}

/// Translates one source line with every model and keeps the selected
/// hypothesis. `row` is the line's 0-based index, used for feature lookup.
pub fn translate_line(
    models: &[&Seq2Seq<f32>],
    codec: &Codec,
    row: usize,
    line: &SourceLine,
    features: Option<&FeatureStore>,
    beam: &BeamConfig,
) -> Result<Translation> {
    let src = codec.encode_source(&line.text);
    if src.is_empty() {
        return Ok(Translation {
            text: String::new(),
            model: 0,
            log_likelihood: 0.0,
        });
    }
    let visual = match (features, &line.image_id) {
        (Some(store), Some(image_id)) => Some(store.get(&example_key(row, image_id))?),
        (Some(_), None) => {
            return Err(Error::MissingFeature(format!(
                "line {} has no image id",
                row + 1
            )));
        }
        (None, _) => None,
    };
    let nbests = models
        .iter()
        .map(|m| beam_search(&ModelScorer::new(m, &src, visual.as_ref())?, beam))
        .collect::<Result<Vec<_>>>()?;
    let lists: Vec<&[Hypothesis]> = nbests.iter().map(Vec::as_slice).collect();
    let (model, hyp) = select_hypothesis(&lists, UNK)?;
    Ok(Translation {
        text: codec.decode_target(&hyp.tokens),
        model,
        log_likelihood: hyp.log_likelihood,
    })
}

/// Translates every line in parallel; the result keeps input order.
pub fn translate_corpus(
    models: &[&Seq2Seq<f32>],
    codec: &Codec,
    lines: &[SourceLine],
    features: Option<&FeatureStore>,
    beam: &BeamConfig,
) -> Result<Vec<Translation>> {
    if models.is_empty() {
        return Err(Error::Empty("model list"));
    }
    lines
        .par_iter()
        .enumerate()
        .map(|(row, line)| translate_line(models, codec, row, line, features, beam))
        .collect()
}

/// Writes one translation per line and the `line<TAB>model<TAB>score` sidecar.
pub fn write_translations(out: &Path, sidecar: &Path, translations: &[Translation]) -> Result<()> {
    let create = |p: &Path| {
        File::create(p)
            .map(BufWriter::new)
            .map_err(|e| Error::io(p, e))
    };
    let mut text = create(out)?;
    let mut scores = create(sidecar)?;
    for (i, t) in translations.iter().enumerate() {
        writeln!(text, "{}", t.text).map_err(|e| Error::io(out, e))?;
        writeln!(scores, "{i}\t{}\t{}", t.model, t.log_likelihood)
            .map_err(|e| Error::io(sidecar, e))?;
    }
    text.flush().map_err(|e| Error::io(out, e))?;
    scores.flush().map_err(|e| Error::io(sidecar, e))
}
