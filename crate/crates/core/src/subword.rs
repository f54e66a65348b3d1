//! Joint byte-pair encoding and per-side vocabularies.
//!
//! Words start as character sequences whose last character carries an
//! internal end-of-word tag (`</w>`), so word-final and word-internal
//! occurrences of a symbol are counted separately. The tag never leaves this
//! module: segmented output marks every non-final unit with the `@@`
//! continuation suffix instead.
//!
//! Merges are learned greedily: the most frequent adjacent pair (weighted by
//! word frequency) is merged, ties broken by the lexicographically smallest
//! `(left, right)`. Learning stops after `n_merges` merges or once the best
//! pair occurs fewer than twice.

use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONTINUATION: &str = "@@";
pub(crate) const END_OF_WORD: &str = "</w>";
pub const MODEL_HEADER: &str = "#mmt-bpe v1";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MergeRule {
    pub left: String,
    pub right: String,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<MergeRule>,
    n_merges: usize,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    fn from_pairs(pairs: Vec<(String, String)>, n_merges: usize) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(pairs.len());
        let mut merges = Vec::with_capacity(pairs.len());
        for (rank, (left, right)) in pairs.into_iter().enumerate() {
            if ranks.insert((left.clone(), right.clone()), rank).is_some() {
                return Err(Error::BpeModel(format!(
                    "duplicate merge {left:?} {right:?}"
                )));
            }
            merges.push(MergeRule { left, right, rank });
        }
        Ok(BpeModel {
            merges,
            n_merges: n_merges.max(ranks.len()),
            ranks,
        })
    }

    pub fn merges(&self) -> &[MergeRule] {
        &self.merges
    }

    /// Requested merge budget; `merges().len()` may be smaller.
    pub fn n_merges(&self) -> usize {
        self.n_merges
    }

    /// The model consisting of the first `k` merges.
    pub fn truncated(&self, k: usize) -> BpeModel {
        let pairs = self
            .merges
            .iter()
            .take(k)
            .map(|m| (m.left.clone(), m.right.clone()))
            .collect();
        BpeModel::from_pairs(pairs, k).expect("prefix of a valid model is valid")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(16 * self.merges.len() + 16);
        out.push_str(MODEL_HEADER);
        out.push('\n');
        for m in &self.merges {
            let _ = writeln!(out, "{} {}", m.left, m.right);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == MODEL_HEADER => {}
            other => {
                return Err(Error::BpeModel(format!(
                    "missing header {MODEL_HEADER:?}, found {other:?}"
                )))
            }
        }
        let mut pairs = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    pairs.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(Error::Parse {
                        line: i + 2,
                        message: format!("malformed merge line {line:?}"),
                    })
                }
            }
        }
        let n = pairs.len();
        BpeModel::from_pairs(pairs, n)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        BpeModel::from_text(&text)
    }

    /// Hex SHA-256 of the serialized model.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Segments one word into its final symbol sequence (with the internal
    /// end-of-word tag still attached to the last symbol).
    fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols = initial_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let rule = &self.merges[rank];
            symbols = merge_pair(&symbols, &rule.left, &rule.right);
        }
        symbols
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(END_OF_WORD);
    }
    symbols
}

/// Replaces every non-overlapping occurrence of `(left, right)`, scanning
/// left to right.
fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

type Pair = (usize, usize);

struct PairTable {
    counts: HashMap<Pair, i64>,
    locations: HashMap<Pair, HashSet<usize>>,
    ordered: BTreeSet<(Reverse<i64>, String, String)>,
}

impl PairTable {
    fn key(&self, pair: Pair, count: i64, names: &[String]) -> (Reverse<i64>, String, String) {
        (Reverse(count), names[pair.0].clone(), names[pair.1].clone())
    }

    fn adjust(&mut self, pair: Pair, delta: i64, word: Option<usize>, names: &[String]) {
        let old = self.counts.get(&pair).copied().unwrap_or(0);
        let new = old + delta;
        if old > 0 {
            let key = self.key(pair, old, names);
            self.ordered.remove(&key);
        }
        if new > 0 {
            let key = self.key(pair, new, names);
            self.ordered.insert(key);
            self.counts.insert(pair, new);
        } else {
            self.counts.remove(&pair);
        }
        if let Some(w) = word {
            self.locations.entry(pair).or_default().insert(w);
        }
    }
}

struct Interner {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Interner {
    fn intern(&mut self, s: &str) -> usize {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.names.len();
        self.names.push(s.to_string());
        self.ids.insert(s.to_string(), id);
        id
    }
}

/// Learns up to `n_merges` joint merges from a token stream (source and target
/// words together).
pub fn learn_bpe<I, S>(tokens: I, n_merges: usize) -> BpeModel
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut freqs: HashMap<String, i64> = HashMap::new();
    for t in tokens {
        let t = t.as_ref();
        if !t.is_empty() {
            *freqs.entry(t.to_string()).or_insert(0) += 1;
        }
    }
    let mut vocab: Vec<(String, i64)> = freqs.into_iter().collect();
    vocab.sort();

    let mut interner = Interner {
        names: Vec::new(),
        ids: HashMap::new(),
    };
    let mut words: Vec<(Vec<usize>, i64)> = vocab
        .iter()
        .map(|(w, f)| {
            let syms = initial_symbols(w)
                .iter()
                .map(|s| interner.intern(s))
                .collect();
            (syms, *f)
        })
        .collect();

    let mut table = PairTable {
        counts: HashMap::new(),
        locations: HashMap::new(),
        ordered: BTreeSet::new(),
    };
    for (idx, (syms, freq)) in words.iter().enumerate() {
        for w in syms.windows(2) {
            table.adjust((w[0], w[1]), *freq, Some(idx), &interner.names);
        }
    }

    let mut learned = Vec::new();
    while learned.len() < n_merges {
        let Some((Reverse(count), left, right)) = table.ordered.first().cloned() else {
            break;
        };
        if count < 2 {
            break;
        }
        let (l, r) = (interner.ids[&left], interner.ids[&right]);
        let merged = interner.intern(&format!("{left}{right}"));
        let mut affected: Vec<usize> = table
            .locations
            .remove(&(l, r))
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        for idx in affected {
            let (syms, freq) = &words[idx];
            if !syms.windows(2).any(|w| w[0] == l && w[1] == r) {
                continue;
            }
            let freq = *freq;
            for w in syms.windows(2) {
                table.adjust((w[0], w[1]), -freq, None, &interner.names);
            }
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            for w in next.windows(2) {
                table.adjust((w[0], w[1]), freq, Some(idx), &interner.names);
            }
            words[idx].0 = next;
        }
        learned.push((left, right));
    }
    BpeModel::from_pairs(learned, n_merges).expect("greedy learning never repeats a pair")
}

/// Segments normalized tokens into subword units, marking non-final units of
/// each word with `@@`.
pub fn apply_bpe<S: AsRef<str>>(model: &BpeModel, tokens: &[S]) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len() * 2);
    for token in tokens {
        let token = token.as_ref();
        if token.is_empty() {
            out.push(String::new());
            continue;
        }
        let symbols = model.segment_word(token);
        let last = symbols.len() - 1;
        for (i, mut sym) in symbols.into_iter().enumerate() {
            if i == last {
                sym.truncate(sym.len() - END_OF_WORD.len());
            } else {
                sym.push_str(CONTINUATION);
            }
            out.push(sym);
        }
    }
    out
}

/// Joins `a@@ b@@ c` runs back into words.
pub fn decode_bpe<S: AsRef<str>>(subwords: &[S]) -> Vec<String> {
    let mut out = Vec::new();
    let mut pending = String::new();
    let mut open = false;
    for sw in subwords {
        let sw = sw.as_ref();
        if let Some(stem) = sw.strip_suffix(CONTINUATION) {
            pending.push_str(stem);
            open = true;
        } else {
            pending.push_str(sw);
            out.push(std::mem::take(&mut pending));
            open = false;
        }
    }
    if open {
        out.push(pending);
    }
    out
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token/id mapping with the four reserved ids fixed at 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let ids = tokens.iter().cloned().zip(0..).collect();
        Vocabulary { tokens, ids }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids, unknown ones to `UNK`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    /// Maps ids back to tokens, dropping padding and sentence delimiters.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, tok) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{tok}\t{id}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| bad(format!("expected token<TAB>id, found {line:?}")))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad id {id:?}")))?;
            if id != tokens.len() {
                return Err(bad(format!(
                    "ids must be contiguous, expected {}",
                    tokens.len()
                )));
            }
            tokens.push(tok.to_string());
        }
        for (id, name) in RESERVED.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*name) {
                return Err(Error::Parse {
                    line: id + 1,
                    message: format!("reserved id {id} must be {name}"),
                });
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if ids.insert(tok.clone(), id).is_some() {
                return Err(Error::Parse {
                    line: id + 1,
                    message: format!("duplicate token {tok:?}"),
                });
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_text(&text)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Builds one side's vocabulary from BPE-encoded sentences. Ids after the
/// reserved block go by descending frequency, then ascending token.
pub fn build_vocab<I, S>(sentences: I) -> Vocabulary
where
    I: IntoIterator,
    I::Item: AsRef<[S]>,
    S: AsRef<str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for sentence in sentences {
        for tok in sentence.as_ref() {
            let tok = tok.as_ref();
            if !RESERVED.contains(&tok) {
                *counts.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut vocab = Vocabulary::default();
    for (tok, _) in ranked {
        vocab.ids.insert(tok.clone(), vocab.tokens.len());
        vocab.tokens.push(tok);
    }
    vocab
}
