use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use mmt_core::config::RunConfig;
use mmt_core::corpus::{
    compute_stats, load_multimodal_tsv, load_parallel_tsv, load_source_lines, normalize_text,
};
use mmt_core::features::{example_key, synthetic_records, write_feature_file, FeatureStore};
use mmt_core::inference::{
    check_compatible, translate_corpus, write_translations, BeamConfig, Codec, META_BPE,
    META_SRC_VOCAB, META_TGT_VOCAB,
};
use mmt_core::metrics::{corpus_bleu, corpus_ribes, BleuOptions};
use mmt_core::model::Seq2Seq;
use mmt_core::subword::{apply_bpe, build_vocab, decode_bpe, learn_bpe, BpeModel, Vocabulary};
use mmt_core::trainer::{self, Checkpoint, Example, FeatureSplits, Mode};

use crate::{
    BpeApplyArgs, BpeLearnArgs, CorpusFormat, EvaluateArgs, FixtureArgs, SourceFormat, StatsArgs,
    TrainArgs, TranslateArgs,
};

pub enum Failure {
    /// Missing or contradictory flags; reported like a parse error (exit 2).
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<mmt_core::Error> for Failure {
    fn from(e: mmt_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let file = File::open(path).with_context(|| format!("{}", path.display()))?;
    BufReader::new(file)
        .lines()
        .map(|l| l.map(|s| s.trim_end_matches('\r').to_string()))
        .collect::<Result<_, _>>()
        .with_context(|| format!("{}", path.display()))
}

fn write_lines(path: &Path, lines: &[String]) -> anyhow::Result<()> {
    let ctx = || format!("{}", path.display());
    let mut w = BufWriter::new(File::create(path).with_context(ctx)?);
    for line in lines {
        writeln!(w, "{line}").with_context(ctx)?;
    }
    w.flush().with_context(ctx)
}

fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

pub fn stats(args: StatsArgs) -> CmdResult {
    match args.format {
        CorpusFormat::Multimodal => {
            let stats = compute_stats(&load_multimodal_tsv(&args.tsv)?);
            println!("{stats}\n");
            print!("{}", stats.to_key_values());
        }
        CorpusFormat::Parallel => {
            let corpus = load_parallel_tsv(&args.tsv)?;
            let stats = compute_stats(&corpus.examples);
            println!("{stats}\n");
            print!("{}", stats.to_key_values());
            println!("dropped={}", corpus.dropped);
        }
    }
    Ok(())
}

pub fn bpe_learn(args: BpeLearnArgs) -> CmdResult {
    if args.tsv.is_empty() && args.parallel_tsv.is_empty() {
        return Err(usage(
            "bpe-learn needs at least one --tsv or --parallel-tsv",
        ));
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    for path in &args.tsv {
        pairs.extend(
            load_multimodal_tsv(path)?
                .into_iter()
                .map(|e| (e.src_text, e.tgt_text)),
        );
    }
    for path in &args.parallel_tsv {
        let corpus = load_parallel_tsv(path)?;
        if corpus.dropped > 0 {
            eprintln!(
                "warning: {}: dropped {} lines",
                path.display(),
                corpus.dropped
            );
        }
        pairs.extend(
            corpus
                .examples
                .into_iter()
                .map(|e| (e.src_text, e.tgt_text)),
        );
    }
    let words = pairs
        .iter()
        .flat_map(|(s, t)| tokens(s).into_iter().chain(tokens(t)));
    let model = learn_bpe(words, args.merges);
    let src_vocab = build_vocab(pairs.iter().map(|(s, _)| apply_bpe(&model, &tokens(s))));
    let tgt_vocab = build_vocab(pairs.iter().map(|(_, t)| apply_bpe(&model, &tokens(t))));
    model.save(&args.out_model)?;
    src_vocab.save(&args.out_src_vocab)?;
    tgt_vocab.save(&args.out_tgt_vocab)?;
    println!(
        "merges={}\nsrc_vocab={}\ntgt_vocab={}",
        model.n_merges(),
        src_vocab.len(),
        tgt_vocab.len()
    );
    Ok(())
}

pub fn bpe_apply(args: BpeApplyArgs) -> CmdResult {
    let model = BpeModel::load(&args.bpe_model)?;
    let out: Vec<String> = read_lines(&args.input)?
        .iter()
        .map(|line| {
            if args.decode {
                decode_bpe(&tokens(line)).join(" ")
            } else {
                apply_bpe(&model, &normalize_text(line)).join(" ")
            }
        })
        .collect();
    write_lines(&args.output, &out)?;
    Ok(())
}

fn load_codec(bpe: &Path, src: &Path, tgt: &Path) -> mmt_core::Result<Codec> {
    Ok(Codec {
        bpe: BpeModel::load(bpe)?,
        src_vocab: Vocabulary::load(src)?,
        tgt_vocab: Vocabulary::load(tgt)?,
    })
}

/// Encoded examples of one split. Multimodal rows carry their feature key.
fn load_examples(path: &Path, mode: Mode, codec: &Codec) -> anyhow::Result<Vec<Example>> {
    let encode_tgt = |t: &str| codec.tgt_vocab.encode(&apply_bpe(&codec.bpe, &tokens(t)));
    if mode.is_multimodal() {
        Ok(load_multimodal_tsv(path)?
            .iter()
            .enumerate()
            .map(|(row, e)| Example {
                src: codec.encode_source(&e.src_text),
                tgt: encode_tgt(&e.tgt_text),
                feature_id: Some(example_key(row, &e.image_id)),
            })
            .collect())
    } else {
        let corpus = load_parallel_tsv(path)?;
        if corpus.dropped > 0 {
            eprintln!(
                "warning: {}: dropped {} lines",
                path.display(),
                corpus.dropped
            );
        }
        Ok(corpus
            .examples
            .iter()
            .map(|e| Example {
                src: codec.encode_source(&e.src_text),
                tgt: encode_tgt(&e.tgt_text),
                feature_id: None,
            })
            .collect())
    }
}

pub fn train(args: TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(&args.config)?;
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(mode) = &args.mode {
        cfg.set("mode", mode).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let mode = cfg.train.mode;
    if mode == Mode::Finetune && args.init.is_none() {
        return Err(usage("finetune mode requires --init <checkpoint>"));
    }
    match (mode.is_multimodal(), &args.features, &args.valid_features) {
        (true, Some(_), Some(_)) | (false, None, None) => {}
        (true, _, _) => {
            return Err(usage(format!(
                "{mode} mode requires --features and --valid-features"
            )))
        }
        (false, _, _) => return Err(usage("pretrain mode takes no feature files")),
    }

    let codec = load_codec(&args.bpe_model, &args.src_vocab, &args.tgt_vocab)?;
    let train_set = load_examples(&args.train_tsv, mode, &codec)?;
    let valid_set = load_examples(&args.valid_tsv, mode, &codec)?;
    let open = |p: &Option<PathBuf>| p.as_ref().map(FeatureStore::open).transpose();
    let features = open(&args.features)?;
    let valid_features = open(&args.valid_features)?;
    let splits = match (&features, &valid_features) {
        (Some(train), Some(valid)) => {
            if (train.regions(), train.dim()) != (valid.regions(), valid.dim()) {
                return Err(anyhow!(
                    "training features are {}x{}, validation features {}x{}",
                    train.regions(),
                    train.dim(),
                    valid.regions(),
                    valid.dim()
                )
                .into());
            }
            Some(FeatureSplits { train, valid })
        }
        _ => None,
    };

    let model = match &args.init {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            check_compatible(&ckpt, &codec.bpe, &codec.src_vocab, &codec.tgt_vocab)?;
            ckpt.model
        }
        None => {
            cfg.model.src_vocab = codec.src_vocab.len();
            cfg.model.tgt_vocab = codec.tgt_vocab.len();
            if let Some(s) = &splits {
                let s = s.train;
                cfg.model.visual_regions = s.regions();
                cfg.model.visual_dim = s.dim();
            }
            Seq2Seq::new(cfg.model.clone(), cfg.train.seed)?
        }
    };

    let metadata: BTreeMap<String, String> = [
        (META_BPE, codec.bpe.digest()),
        (META_SRC_VOCAB, codec.src_vocab.digest()),
        (META_TGT_VOCAB, codec.tgt_vocab.digest()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();

    fs::create_dir_all(&args.out_dir).with_context(|| format!("{}", args.out_dir.display()))?;
    let log_path = args.out_dir.join("train.log");
    let mut log =
        BufWriter::new(File::create(&log_path).with_context(|| format!("{}", log_path.display()))?);
    let mut log_err = None;
    let outcome = trainer::train(
        &cfg.train,
        model,
        &train_set,
        &valid_set,
        splits,
        metadata.clone(),
        |entry| {
            println!("{entry}");
            if let Err(e) = writeln!(log, "{entry}").and_then(|_| log.flush()) {
                log_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = log_err {
        return Err(anyhow!(e).context(log_path.display().to_string()).into());
    }
    if outcome.dropped > 0 {
        eprintln!(
            "warning: dropped {} training pairs longer than {} tokens",
            outcome.dropped, cfg.train.max_len
        );
    }
    outcome.best.save(args.out_dir.join("best.mmck"))?;
    let last_entry = outcome.log.last();
    Checkpoint {
        model: outcome.last,
        train: cfg.train.clone(),
        epoch: last_entry.map_or(0, |e| e.epoch),
        valid_ppl: last_entry.map_or(outcome.best.valid_ppl, |e| e.valid_ppl),
        metadata,
    }
    .save(args.out_dir.join("last.mmck"))?;
    println!(
        "best_epoch={} best_valid_ppl={:.6}",
        outcome.best.epoch, outcome.best.valid_ppl
    );
    Ok(())
}

pub fn translate(args: TranslateArgs) -> CmdResult {
    if args.models.len() > 2 {
        return Err(usage("at most two --model flags are supported"));
    }
    let codec = load_codec(&args.bpe_model, &args.src_vocab, &args.tgt_vocab)?;
    let mut models = Vec::with_capacity(args.models.len());
    for path in &args.models {
        let ckpt = Checkpoint::load(path)?;
        check_compatible(&ckpt, &codec.bpe, &codec.src_vocab, &codec.tgt_vocab)
            .with_context(|| format!("{}", path.display()))?;
        models.push(ckpt.model);
    }
    let multimodal = match args.src_format {
        SourceFormat::Auto => args.features.is_some(),
        SourceFormat::Multimodal => true,
        SourceFormat::Text => {
            if args.features.is_some() {
                return Err(usage(
                    "--features needs multimodal input, not --src-format text",
                ));
            }
            false
        }
    };
    let lines = load_source_lines(&args.src, multimodal)?;
    let features = args.features.as_ref().map(FeatureStore::open).transpose()?;
    let beam = BeamConfig {
        width: args.beam,
        max_len: args.max_len,
        length_penalty: args.length_penalty,
    };
    let refs: Vec<&Seq2Seq<f32>> = models.iter().collect();
    let translations = translate_corpus(&refs, &codec, &lines, features.as_ref(), &beam)?;
    let scores = args.scores.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".scores");
        PathBuf::from(p)
    });
    write_translations(&args.out, &scores, &translations)?;
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> CmdResult {
    let hyps: Vec<Vec<String>> = read_lines(&args.hyp)?
        .iter()
        .map(|l| normalize_text(l))
        .collect();
    let refs: Vec<Vec<String>> = match (&args.reference, &args.ref_tsv) {
        (Some(path), _) => read_lines(path)?
            .iter()
            .map(|l| normalize_text(l))
            .collect(),
        (None, Some(path)) => load_multimodal_tsv(path)?
            .iter()
            .map(|e| tokens(&e.tgt_text).into_iter().map(String::from).collect())
            .collect(),
        (None, None) => return Err(usage("one of --ref or --ref-tsv is required")),
    };
    let bleu = corpus_bleu(
        &hyps,
        &refs,
        BleuOptions {
            smooth: args.smooth,
        },
    )?;
    let ribes = corpus_ribes(&hyps, &refs)?;
    println!("{bleu}");
    println!("RIBES = {:.6}\n", ribes.ribes);
    print!("{}", bleu.to_key_values());
    println!("ribes={:.6}", ribes.ribes);
    Ok(())
}

pub fn gen_features_fixture(args: FixtureArgs) -> CmdResult {
    let ids: Vec<String> = load_source_lines(&args.tsv, true)?
        .iter()
        .enumerate()
        .map(|(row, line)| example_key(row, line.image_id.as_deref().unwrap_or_default()))
        .collect();
    let records = synthetic_records(&ids, args.regions, args.dim, args.seed);
    write_feature_file(&args.out, args.regions, args.dim, &records)?;
    println!(
        "count={}\nregions={}\ndim={}",
        ids.len(),
        args.regions,
        args.dim
    );
    Ok(())
}
