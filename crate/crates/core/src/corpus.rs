//! Corpus ingestion: multimodal and text-only parallel TSV files, text
//! normalization, image-region handling, length filtering and split statistics.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

/// Rectangular image region in pixel coordinates (top-left origin).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegionBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl RegionBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidRegion(format!(
                "non-positive size {w}x{h} at ({x},{y})"
            )));
        }
        Ok(RegionBox { x, y, w, h })
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }
}

/// One row of the multimodal corpus. Texts are stored normalized, tokens
/// joined by single spaces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawExample {
    pub image_id: String,
    pub region: RegionBox,
    pub src_text: String,
    pub tgt_text: String,
}

/// One text-only sentence pair, normalized like [`RawExample`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelExample {
    pub src_text: String,
    pub tgt_text: String,
}

/// Anything carrying a normalized source/target sentence pair.
pub trait TextPair {
    fn src(&self) -> &str;
    fn tgt(&self) -> &str;
}

impl TextPair for RawExample {
    fn src(&self) -> &str {
        &self.src_text
    }
    fn tgt(&self) -> &str {
        &self.tgt_text
    }
}

impl TextPair for ParallelExample {
    fn src(&self) -> &str {
        &self.src_text
    }
    fn tgt(&self) -> &str {
        &self.tgt_text
    }
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Lowercases `s`, splits every Unicode punctuation character (categories
/// `P*`) into its own token and splits on whitespace.
pub fn normalize_text(s: &str) -> Vec<String> {
    let lowered = s.to_lowercase();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in lowered.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if is_punctuation(c) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// [`normalize_text`] re-joined with single spaces.
pub fn normalize_line(s: &str) -> String {
    normalize_text(s).join(" ")
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn parse_coord(field: &str, name: &str, line: usize) -> Result<u32> {
    field.trim().parse::<u32>().map_err(|_| Error::Parse {
        line,
        message: format!("{name} is not a non-negative integer: {field:?}"),
    })
}

fn parse_multimodal_line(raw: &str, line: usize) -> Result<RawExample> {
    let fields: Vec<&str> = raw.split('\t').collect();
    if fields.len() != 7 {
        return Err(Error::Parse {
            line,
            message: format!("expected 7 tab-separated fields, found {}", fields.len()),
        });
    }
    let image_id = fields[0].trim();
    if image_id.is_empty() {
        return Err(Error::Parse {
            line,
            message: "empty image id".into(),
        });
    }
    let x = parse_coord(fields[1], "x", line)?;
    let y = parse_coord(fields[2], "y", line)?;
    let w = parse_coord(fields[3], "w", line)?;
    let h = parse_coord(fields[4], "h", line)?;
    let region = RegionBox::new(x, y, w, h).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let src_text = normalize_line(fields[5]);
    let tgt_text = normalize_line(fields[6]);
    if src_text.is_empty() || tgt_text.is_empty() {
        return Err(Error::Parse {
            line,
            message: "source or target text is empty after normalization".into(),
        });
    }
    Ok(RawExample {
        image_id: image_id.to_string(),
        region,
        src_text,
        tgt_text,
    })
}

/// Reads `image_id, x, y, w, h, english, hindi` rows. Line numbers in errors
/// are 1-based.
pub fn read_multimodal_tsv<R: BufRead>(reader: R) -> Result<Vec<RawExample>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        out.push(parse_multimodal_line(line, line_no)?);
    }
    Ok(out)
}

pub fn load_multimodal_tsv(path: impl AsRef<Path>) -> Result<Vec<RawExample>> {
    let path = path.as_ref();
    read_multimodal_tsv(open(path)?).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn write_multimodal_tsv<W: Write>(mut writer: W, examples: &[RawExample]) -> Result<()> {
    for ex in examples {
        let r = ex.region;
        writeln!(
            writer,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            ex.image_id, r.x, r.y, r.w, r.h, ex.src_text, ex.tgt_text
        )
        .map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

/// A source line for translation: the image id is present only when the input
/// is a multimodal TSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceLine {
    pub image_id: Option<String>,
    pub text: String,
}

/// Reads translation input. Multimodal rows (6 or 7 columns, the target column
/// optional) keep their image id; otherwise each line is plain source text.
pub fn load_source_lines(path: impl AsRef<Path>, multimodal: bool) -> Result<Vec<SourceLine>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (idx, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if multimodal {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 && fields.len() != 7 {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!(
                        "{}: expected 6 or 7 tab-separated fields, found {}",
                        path.display(),
                        fields.len()
                    ),
                });
            }
            out.push(SourceLine {
                image_id: Some(fields[0].trim().to_string()),
                text: normalize_line(fields[5]),
            });
        } else {
            out.push(SourceLine {
                image_id: None,
                text: normalize_line(line),
            });
        }
    }
    Ok(out)
}

/// Result of reading a text-only parallel corpus. Pairs normalizing to an
/// empty side are dropped and counted rather than failing the load.
#[derive(Debug, Clone, Default)]
pub struct ParallelCorpus {
    pub examples: Vec<ParallelExample>,
    pub dropped: usize,
}

impl ParallelCorpus {
    fn push(&mut self, src: &str, tgt: &str) {
        let src_text = normalize_line(src);
        let tgt_text = normalize_line(tgt);
        if src_text.is_empty() || tgt_text.is_empty() {
            self.dropped += 1;
        } else {
            self.examples.push(ParallelExample { src_text, tgt_text });
        }
    }
}

/// Two-column `source<TAB>target` file. Lines without exactly one tab are
/// dropped with the empty ones.
pub fn load_parallel_tsv(path: impl AsRef<Path>) -> Result<ParallelCorpus> {
    let path = path.as_ref();
    let mut corpus = ParallelCorpus::default();
    for line in open(path)?.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        match line.split_once('\t') {
            Some((src, tgt)) if !tgt.contains('\t') => corpus.push(src, tgt),
            _ => corpus.dropped += 1,
        }
    }
    Ok(corpus)
}

/// Line-aligned source and target files.
pub fn load_parallel_files(src: impl AsRef<Path>, tgt: impl AsRef<Path>) -> Result<ParallelCorpus> {
    let (src, tgt) = (src.as_ref(), tgt.as_ref());
    let src_lines: Vec<String> = open(src)?
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(src, e))?;
    let tgt_lines: Vec<String> = open(tgt)?
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(tgt, e))?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Parse {
            line: src_lines.len().min(tgt_lines.len()) + 1,
            message: format!(
                "{} has {} lines but {} has {}",
                src.display(),
                src_lines.len(),
                tgt.display(),
                tgt_lines.len()
            ),
        });
    }
    let mut corpus = ParallelCorpus::default();
    for (s, t) in src_lines.iter().zip(&tgt_lines) {
        corpus.push(s, t);
    }
    Ok(corpus)
}

/// Intersects `region` with a `img_w`×`img_h` image. Boxes overflowing the
/// image are cut back; a box with no overlap is an error.
pub fn clamp_region(region: RegionBox, img_w: u32, img_h: u32) -> Result<RegionBox> {
    if img_w == 0 || img_h == 0 {
        return Err(Error::InvalidRegion(format!(
            "image size {img_w}x{img_h} is empty"
        )));
    }
    if region.x >= img_w || region.y >= img_h {
        return Err(Error::InvalidRegion(format!(
            "{region:?} does not overlap a {img_w}x{img_h} image"
        )));
    }
    let right = region.right().min(img_w as u64);
    let bottom = region.bottom().min(img_h as u64);
    RegionBox::new(
        region.x,
        region.y,
        (right - region.x as u64) as u32,
        (bottom - region.y as u64) as u32,
    )
}

/// Keeps the examples whose source and target lengths are both `<= max_len`.
/// `lengths` supplies the tokenized view (e.g. post-BPE counts).
pub fn length_filter<T, F>(examples: Vec<T>, max_len: usize, lengths: F) -> Vec<T>
where
    F: Fn(&T) -> (usize, usize),
{
    examples
        .into_iter()
        .filter(|ex| {
            let (s, t) = lengths(ex);
            s <= max_len && t <= max_len
        })
        .collect()
}

/// Whitespace token counts of a normalized pair.
pub fn whitespace_lengths<P: TextPair>(pair: &P) -> (usize, usize) {
    (
        pair.src().split_whitespace().count(),
        pair.tgt().split_whitespace().count(),
    )
}

/// Sentence count and average whitespace-token lengths of a split.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplitStats {
    pub n_sentences: usize,
    pub src_tokens: usize,
    pub tgt_tokens: usize,
    pub avg_src_len: f64,
    pub avg_tgt_len: f64,
}

impl SplitStats {
    fn from_totals(n_sentences: usize, src_tokens: usize, tgt_tokens: usize) -> Self {
        let avg = |total: usize| {
            if n_sentences == 0 {
                0.0
            } else {
                total as f64 / n_sentences as f64
            }
        };
        SplitStats {
            n_sentences,
            src_tokens,
            tgt_tokens,
            avg_src_len: avg(src_tokens),
            avg_tgt_len: avg(tgt_tokens),
        }
    }

    /// Statistics of the union of two splits.
    pub fn combine(&self, other: &SplitStats) -> SplitStats {
        SplitStats::from_totals(
            self.n_sentences + other.n_sentences,
            self.src_tokens + other.src_tokens,
            self.tgt_tokens + other.tgt_tokens,
        )
    }

    /// `key=value` lines for scripts.
    pub fn to_key_values(&self) -> String {
        format!(
            "n_sentences={}\navg_src_len={:.4}\navg_tgt_len={:.4}\nsrc_tokens={}\ntgt_tokens={}\n",
            self.n_sentences, self.avg_src_len, self.avg_tgt_len, self.src_tokens, self.tgt_tokens
        )
    }
}

impl fmt::Display for SplitStats {
    /// Table row in the layout of the dataset description table.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>18} {:>18}",
            "Sentences", "Avg length source", "Avg length target"
        )?;
        write!(
            f,
            "{:<12} {:>18.2} {:>18.2}",
            self.n_sentences, self.avg_src_len, self.avg_tgt_len
        )
    }
}

pub fn compute_stats<P: TextPair>(examples: &[P]) -> SplitStats {
    let (src, tgt) = examples
        .iter()
        .map(whitespace_lengths)
        .fold((0, 0), |(a, b), (s, t)| (a + s, b + t));
    SplitStats::from_totals(examples.len(), src, tgt)
}
