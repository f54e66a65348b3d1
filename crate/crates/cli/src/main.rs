//! `mmt`: command-line front end for the multimodal translation toolkit.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "mmt",
    version,
    about = "Multimodal English-Hindi translation toolkit"
)]
struct Cli {
    /// Worker threads for parallel decoding (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sentence count and average source/target lengths of a corpus.
    Stats(StatsArgs),
    /// Learn joint BPE merges and per-side vocabularies.
    BpeLearn(BpeLearnArgs),
    /// Segment (or, with --decode, join) text with a BPE model.
    BpeApply(BpeApplyArgs),
    /// Train a model and write best.mmck, last.mmck and train.log.
    Train(TrainArgs),
    /// Beam-search translation with one or two models.
    Translate(TranslateArgs),
    /// Corpus BLEU and RIBES of hypotheses against references.
    Evaluate(EvaluateArgs),
    /// Write a seeded synthetic feature file for a multimodal TSV.
    GenFeaturesFixture(FixtureArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum CorpusFormat {
    /// 7-column multimodal TSV.
    Multimodal,
    /// 2-column source/target TSV.
    Parallel,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Corpus file.
    #[arg(long)]
    tsv: PathBuf,
    #[arg(long, value_enum, default_value_t = CorpusFormat::Multimodal)]
    /// Column layout of --tsv.
    format: CorpusFormat,
}

#[derive(Args, Debug)]
struct BpeLearnArgs {
    /// Multimodal TSV contributing both sides (repeatable).
    #[arg(long)]
    tsv: Vec<PathBuf>,
    /// Parallel TSV contributing both sides (repeatable).
    #[arg(long)]
    parallel_tsv: Vec<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    /// Number of merge operations.
    merges: usize,
    /// Where to write the merge table.
    #[arg(long)]
    out_model: PathBuf,
    /// Where to write the English vocabulary.
    #[arg(long)]
    out_src_vocab: PathBuf,
    /// Where to write the Hindi vocabulary.
    #[arg(long)]
    out_tgt_vocab: PathBuf,
}

#[derive(Args, Debug)]
struct BpeApplyArgs {
    /// BPE merge table from bpe-learn.
    #[arg(long)]
    bpe_model: PathBuf,
    /// Plain text, one sentence per line.
    #[arg(long)]
    input: PathBuf,
    /// Output text, one line per input line.
    #[arg(long)]
    output: PathBuf,
    /// Join `@@` units back into words instead of segmenting.
    #[arg(long, default_value_t = false)]
    decode: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key = value` config file; any model or training field.
    #[arg(long)]
    config: PathBuf,
    /// Multimodal TSV, or a parallel TSV in pretrain mode.
    #[arg(long)]
    train_tsv: PathBuf,
    /// Validation split in the same format as --train-tsv.
    #[arg(long)]
    valid_tsv: PathBuf,
    /// BPE merge table from bpe-learn.
    #[arg(long)]
    bpe_model: PathBuf,
    /// Source vocabulary from bpe-learn.
    #[arg(long)]
    src_vocab: PathBuf,
    /// Target vocabulary from bpe-learn.
    #[arg(long)]
    tgt_vocab: PathBuf,
    /// Feature file for the training split (finetune and scratch modes).
    #[arg(long)]
    features: Option<PathBuf>,
    /// Feature file for the validation split (finetune and scratch modes).
    #[arg(long)]
    valid_features: Option<PathBuf>,
    /// Directory for checkpoints and the epoch log.
    #[arg(long)]
    out_dir: PathBuf,
    /// Checkpoint to start from; required in finetune mode.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Overrides the config file's mode (pretrain, finetune, scratch).
    #[arg(long)]
    mode: Option<String>,
    /// Overrides the config file's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides applied after the config file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SourceFormat {
    /// Multimodal when --features is given, plain text otherwise.
    Auto,
    /// Multimodal TSV; the target column may be absent.
    Multimodal,
    /// One source sentence per line.
    Text,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    /// Checkpoint; give twice to select per sentence between two models.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    /// Feature file for --src rows.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Sentences to translate.
    #[arg(long)]
    src: PathBuf,
    #[arg(long, value_enum, default_value_t = SourceFormat::Auto)]
    /// How to read --src.
    src_format: SourceFormat,
    /// Translations, one per line.
    #[arg(long)]
    out: PathBuf,
    /// Score sidecar path [default: <out>.scores].
    #[arg(long)]
    scores: Option<PathBuf>,
    /// BPE merge table from bpe-learn.
    #[arg(long)]
    bpe_model: PathBuf,
    /// Source vocabulary from bpe-learn.
    #[arg(long)]
    src_vocab: PathBuf,
    /// Target vocabulary from bpe-learn.
    #[arg(long)]
    tgt_vocab: PathBuf,
    /// Beam width.
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Maximum target length in subword tokens.
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    /// Exponent of the length normalization used for final ranking.
    #[arg(long, default_value_t = 0.0)]
    length_penalty: f64,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("references").required(true).args(["reference", "ref_tsv"]))]
struct EvaluateArgs {
    /// Hypotheses, one per line.
    #[arg(long)]
    hyp: PathBuf,
    /// References, one per line.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Multimodal TSV whose target column holds the references.
    #[arg(long)]
    ref_tsv: Option<PathBuf>,
    /// Add-one smoothing for 2- to 4-gram precisions.
    #[arg(long, default_value_t = false)]
    smooth: bool,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    /// Multimodal TSV (6 or 7 columns).
    #[arg(long)]
    tsv: PathBuf,
    /// Feature file to write.
    #[arg(long)]
    out: PathBuf,
    /// Regions per example.
    #[arg(long, default_value_t = 49)]
    regions: usize,
    /// Feature dimension per region.
    #[arg(long, default_value_t = 512)]
    dim: usize,
    /// Seed of the synthetic values.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        eprintln!("error: thread pool: {e}");
        return ExitCode::FAILURE;
    }
    let result = match cli.command {
        Command::Stats(a) => commands::stats(a),
        Command::BpeLearn(a) => commands::bpe_learn(a),
        Command::BpeApply(a) => commands::bpe_apply(a),
        Command::Train(a) => commands::train(a),
        Command::Translate(a) => commands::translate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::GenFeaturesFixture(a) => commands::gen_features_fixture(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => Cli::command()
            .error(clap::error::ErrorKind::ArgumentConflict, msg)
            .exit(),
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain on one line, skipping causes their parent already quotes.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg.replace('\n', " ")
}
