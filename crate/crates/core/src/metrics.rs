//! Corpus BLEU and RIBES.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

pub const BLEU_ORDER: usize = 4;
pub const RIBES_ALPHA: f64 = 0.25;
pub const RIBES_BETA: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BleuOptions {
    /// Add-one smoothing of the 2- to 4-gram precisions. Meant for
    /// sentence-level diagnostics; corpus scores are reported unsmoothed.
    pub smooth: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// 0 to 100.
    pub bleu: f64,
    /// Clipped precision per order; 0 when the hypotheses have no n-grams of
    /// that order.
    pub precisions: [f64; BLEU_ORDER],
    pub matches: [usize; BLEU_ORDER],
    pub totals: [usize; BLEU_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn ratio(&self) -> f64 {
        if self.ref_len == 0 {
            0.0
        } else {
            self.hyp_len as f64 / self.ref_len as f64
        }
    }

    pub fn to_key_values(&self) -> String {
        let mut out = format!("bleu={:.4}\n", self.bleu);
        for (n, p) in self.precisions.iter().enumerate() {
            out.push_str(&format!("p{}={:.6}\n", n + 1, p));
        }
        out.push_str(&format!(
            "bp={:.6}\nratio={:.6}\nhyp_len={}\nref_len={}\n",
            self.brevity_penalty,
            self.ratio(),
            self.hyp_len,
            self.ref_len
        ));
        out
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p: Vec<String> = self
            .precisions
            .iter()
            .map(|p| format!("{:.1}", 100.0 * p))
            .collect();
        write!(
            f,
            "BLEU = {:.2} (p1/p2/p3/p4 = {}, BP = {:.3}, ratio = {:.3}, hyp_len = {}, ref_len = {})",
            self.bleu,
            p.join("/"),
            self.brevity_penalty,
            self.ratio(),
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(AsRef::as_ref).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with clipped n-gram counts for n = 1..4 and the brevity
/// penalty `min(1, exp(1 - ref_len / hyp_len))`. The score is zero when any
/// order has hypothesis n-grams but no matches. Orders for which no
/// hypothesis is long enough are left out of the geometric mean.
pub fn corpus_bleu<S: AsRef<str>, R: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<R>],
    opts: BleuOptions,
) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::shape(
            "corpus_bleu",
            format!("{} hypotheses, {} references", hyps.len(), refs.len()),
        ));
    }
    if hyps.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=BLEU_ORDER {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(&gram).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let mut precisions = [0.0; BLEU_ORDER];
    let mut log_sum = 0.0;
    let mut orders = 0;
    let mut zero = false;
    for n in 0..BLEU_ORDER {
        let (m, t) = if opts.smooth && n > 0 {
            (matches[n] + 1, totals[n] + 1)
        } else {
            (matches[n], totals[n])
        };
        if t == 0 {
            continue;
        }
        precisions[n] = m as f64 / t as f64;
        if m == 0 {
            zero = true;
        } else {
            log_sum += precisions[n].ln();
            orders += 1;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if zero || orders == 0 {
        0.0
    } else {
        100.0 * brevity_penalty * (log_sum / orders as f64).exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

fn occurrences<S: AsRef<str>>(haystack: &[S], needle: &[S]) -> (usize, Option<usize>) {
    if needle.is_empty() || needle.len() > haystack.len() {
        return (0, None);
    }
    let mut count = 0;
    let mut first = None;
    for (i, w) in haystack.windows(needle.len()).enumerate() {
        if w.iter().zip(needle).all(|(a, b)| a.as_ref() == b.as_ref()) {
            count += 1;
            first.get_or_insert(i);
        }
    }
    (count, first)
}

/// Reference positions of the hypothesis words that can be aligned
/// unambiguously, in hypothesis order. A word occurring once on both sides
/// aligns directly; otherwise growing left and right contexts are tried until
/// one occurs exactly once on both sides.
pub fn ribes_alignment<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], reference: &[R]) -> Vec<usize> {
    let hyp: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
    let reference: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let mut aligned = Vec::new();
    for (i, w) in hyp.iter().enumerate() {
        let (in_ref, ref_pos) = occurrences(&reference, std::slice::from_ref(w));
        if in_ref == 0 {
            continue;
        }
        let (in_hyp, _) = occurrences(&hyp, std::slice::from_ref(w));
        if in_ref == 1 && in_hyp == 1 {
            aligned.push(ref_pos.expect("counted"));
            continue;
        }
        for window in 1..(i + 1).max(hyp.len() - i + 1) {
            if window <= i {
                let gram = &hyp[i - window..=i];
                let (h, _) = occurrences(&hyp, gram);
                let (r, pos) = occurrences(&reference, gram);
                if h == 1 && r == 1 {
                    aligned.push(pos.expect("counted") + window);
                    break;
                }
            }
            if i + window < hyp.len() {
                let gram = &hyp[i..=i + window];
                let (h, _) = occurrences(&hyp, gram);
                let (r, pos) = occurrences(&reference, gram);
                if h == 1 && r == 1 {
                    aligned.push(pos.expect("counted"));
                    break;
                }
            }
        }
    }
    aligned
}

/// Sentence RIBES: normalized Kendall's tau of the aligned positions times
/// `precision^0.25 * BP^0.10`.
pub fn ribes<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], reference: &[R]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let aligned = ribes_alignment(hyp, reference);
    let n = aligned.len();
    let nkt = if n == 1 && reference.len() == 1 && hyp.len() == 1 {
        1.0
    } else if n < 2 {
        return 0.0;
    } else {
        let mut ascending = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                if aligned[i] < aligned[j] {
                    ascending += 1;
                }
            }
        }
        ascending as f64 / (n * (n - 1) / 2) as f64
    };
    let precision = n as f64 / hyp.len() as f64;
    let bp = (1.0 - reference.len() as f64 / hyp.len() as f64)
        .exp()
        .min(1.0);
    nkt * precision.powf(RIBES_ALPHA) * bp.powf(RIBES_BETA)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RibesReport {
    pub ribes: f64,
    pub sentences: Vec<f64>,
}

/// Mean of the sentence scores.
pub fn corpus_ribes<S: AsRef<str>, R: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<R>],
) -> Result<RibesReport> {
    if hyps.len() != refs.len() {
        return Err(Error::shape(
            "corpus_ribes",
            format!("{} hypotheses, {} references", hyps.len(), refs.len()),
        ));
    }
    if hyps.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let sentences: Vec<f64> = hyps.iter().zip(refs).map(|(h, r)| ribes(h, r)).collect();
    let ribes = sentences.iter().sum::<f64>() / sentences.len() as f64;
    Ok(RibesReport { ribes, sentences })
}
