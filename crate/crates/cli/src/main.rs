mod commands;
mod config;

use std::error::Error;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mamr::lang::Language;

/// Multilingual AMR-to-text generation pipeline.
///
/// Exit status: 0 on success, 1 on usage errors, 2 on data errors.
#[derive(Debug, Parser)]
#[command(name = "mamr", version)]
struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Run-config file of `key=value` lines (e.g. `train.base_lr=0.001`).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides one config key; repeatable and applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn language(s: &str) -> Result<Language, String> {
    Language::new(s).map_err(|e| e.to_string())
}

fn keyed_path(s: &str) -> Result<(Language, PathBuf), String> {
    let (l, p) = s.split_once('=').ok_or_else(|| format!("expected LANG=PATH, got `{s}`"))?;
    Ok((language(l)?, PathBuf::from(p)))
}

fn keyed_score(s: &str) -> Result<(Language, f64), String> {
    let (l, v) = s.split_once('=').ok_or_else(|| format!("expected LANG=SCORE, got `{s}`"))?;
    let v = v.parse().map_err(|_| format!("bad score `{v}`"))?;
    Ok((language(l)?, v))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse PENMAN records (blank-line separated, possibly multi-line) and
    /// write them one graph per line to `<out-dir>/graphs.amr`.
    ParseAmr {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Linearize one-per-line graphs into a token file and a companion
    /// `<out>.feat` file of `depth:subgraph` pairs.
    Linearize {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Prepend this language token to every line.
        #[arg(long, value_parser = language)]
        lang: Option<Language>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Learn a BPE model from text files (one sentence per line).
    TrainBpe {
        #[arg(long = "in", value_name = "FILE", required = true)]
        input: Vec<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Number of merges (overrides `bpe.merges`).
        #[arg(long)]
        merges: Option<usize>,
        /// Keep AMR role tokens whole (sets `bpe.protect_roles`).
        #[arg(long)]
        protect_roles: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Ingest a dataset manifest, split it, and write
    /// `train/valid/test.examples` under the output directory.
    BuildCorpus {
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        #[arg(long, value_name = "FILE")]
        src_bpe: PathBuf,
        #[arg(long, value_name = "FILE")]
        tgt_bpe: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Denoising pretraining of the encoder on linearized graphs; writes
    /// `encoder.ckpt`.
    PretrainEncoder {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Prepend this language token to every line.
        #[arg(long, value_parser = language)]
        lang: Option<Language>,
        #[arg(long, value_name = "FILE")]
        src_bpe: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Language-model pretraining of the decoder on monolingual text;
    /// writes `decoder.ckpt` and `perplexity.tsv`.
    PretrainDecoder {
        /// Monolingual text for one language; repeatable.
        #[arg(long, value_name = "LANG=FILE", value_parser = keyed_path, required = true)]
        text: Vec<(Language, PathBuf)>,
        #[arg(long, value_name = "FILE")]
        tgt_bpe: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train (or fine-tune) the model; writes `best.ckpt`, `last.ckpt` and
    /// `train_log.tsv`.
    Train {
        #[arg(long, value_name = "FILE")]
        train_data: PathBuf,
        #[arg(long, value_name = "FILE")]
        valid_data: PathBuf,
        #[arg(long, value_name = "FILE")]
        src_bpe: PathBuf,
        #[arg(long, value_name = "FILE")]
        tgt_bpe: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Pretrained encoder checkpoint.
        #[arg(long, value_name = "FILE")]
        encoder: Option<PathBuf>,
        /// Pretrained decoder checkpoint.
        #[arg(long, value_name = "FILE")]
        decoder: Option<PathBuf>,
        /// Decoder embedding rows as `piece v1 … vd` lines.
        #[arg(long, value_name = "FILE")]
        embeddings: Option<PathBuf>,
        /// Continue from `last.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Decode linearized graphs, one sentence per output line.
    Generate {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Linearized token file; its `.feat` companion must exist.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Target language token to prepend.
        #[arg(long, value_parser = language)]
        lang: Option<Language>,
        #[arg(long, value_name = "FILE")]
        src_bpe: PathBuf,
        #[arg(long, value_name = "FILE")]
        tgt_bpe: PathBuf,
        /// Beam size (overrides `beam.size`).
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        hyp: PathBuf,
        #[arg(long = "ref", value_name = "FILE")]
        reference: PathBuf,
        /// Also write `bleu.txt` and per-sentence scores here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Word and subword overlap between graphs and target text per language,
    /// with its correlation to BLEU.
    OverlapStats {
        /// Linearized graph file.
        #[arg(long, value_name = "FILE")]
        amr: PathBuf,
        #[arg(long, value_name = "LANG=FILE", value_parser = keyed_path, required = true)]
        target: Vec<(Language, PathBuf)>,
        /// BPE model per language.
        #[arg(long, value_name = "LANG=FILE", value_parser = keyed_path, required = true)]
        bpe: Vec<(Language, PathBuf)>,
        #[arg(long, value_name = "LANG=SCORE", value_parser = keyed_score, required = true)]
        bleu: Vec<(Language, f64)>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Sample the best and worst sentences by sentence BLEU into a shuffled
    /// annotation sheet.
    HumanEvalSheet {
        #[arg(long, value_name = "FILE")]
        hyp: PathBuf,
        #[arg(long = "ref", value_name = "FILE")]
        reference: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Decode one input line and write its cross-attention grid.
    AttentionDump {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// 1-based line of the input file.
        #[arg(long, default_value_t = 1)]
        line: usize,
        #[arg(long, value_parser = language)]
        lang: Option<Language>,
        #[arg(long, value_name = "FILE")]
        src_bpe: PathBuf,
        #[arg(long, value_name = "FILE")]
        tgt_bpe: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// A mistake in how the program was invoked rather than in its data.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Error for Usage {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
