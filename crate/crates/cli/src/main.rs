//! Command-line front end: data preparation, model training, decoding,
//! scoring and the bundled experiment recipes.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lmfusion::experiment::Recipe;
use lmfusion::fusion::Strategy;

#[derive(Parser, Debug)]
#[command(name = "lmfusion", version, about = "Translation models trained with a fixed language model")]
pub struct Cli {
    /// Worker threads (experiments default to one per seed).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Random seed; overrides the config's seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment config (`key = value` with `[section]` headers).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Normalize and tokenize raw text, one sentence per line.
    Preprocess(PreprocessArgs),
    /// Learn BPE merges from tokenized text.
    BpeTrain(BpeTrainArgs),
    /// Segment tokenized text with learned merges.
    BpeApply(BpeApplyArgs),
    /// Train a target-side language model.
    TrainLm(TrainLmArgs),
    /// Train a translation model, optionally fused with fixed LMs.
    TrainTm(TrainTmArgs),
    /// Translate segmented source text.
    Translate(TranslateArgs),
    /// Corpus BLEU of candidates against references.
    Evaluate(EvaluateArgs),
    /// Translate target-side monolingual text with a reverse model.
    Backtranslate(BacktranslateArgs),
    /// Write the synthetic language pair as text files.
    SynthData(SynthDataArgs),
    /// Run an experiment recipe into an output directory.
    Experiment(ExperimentArgs),
    /// Rebuild the curve tables of a finished experiment directory.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Keep letter case.
    #[arg(long)]
    pub keep_case: bool,
    /// Fold common Latin diacritics to their base letters.
    #[arg(long)]
    pub fold_diacritics: bool,
}

#[derive(Args, Debug)]
pub struct BpeTrainArgs {
    /// Tokenized text; repeat for joint codes.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// Number of merges (default from the config).
    #[arg(long)]
    pub merges: Option<usize>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct BpeApplyArgs {
    #[arg(long)]
    pub codes: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainLmArgs {
    /// Segmented target-language text.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Architecture, e.g. "recurrent layers=1 embed=64 hidden=128".
    #[arg(long)]
    pub arch: Option<String>,
    /// Existing target vocabulary; built from `--train` when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Training log (default: `<output>.log.tsv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainTmArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, requires = "dev_target")]
    pub dev_source: Option<PathBuf>,
    #[arg(long, requires = "dev_source")]
    pub dev_target: Option<PathBuf>,
    /// Fixed LM checkpoints; their vocabulary becomes the target vocabulary.
    #[arg(long)]
    pub lm: Vec<PathBuf>,
    #[arg(long, default_value = "baseline")]
    pub strategy: Strategy,
    /// Shallow-fusion LM weight stored for decoding.
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// LM checkpoints for fused decoding.
    #[arg(long)]
    pub lm: Vec<PathBuf>,
    /// Override the stored shallow-fusion weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Also write `line<TAB>rank<TAB>score<TAB>hypothesis` for every beam entry.
    #[arg(long)]
    pub nbest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub references: PathBuf,
}

#[derive(Args, Debug)]
pub struct BacktranslateArgs {
    /// Reverse (target to source) model.
    #[arg(long)]
    pub model: PathBuf,
    /// Segmented target-language text.
    #[arg(long)]
    pub input: PathBuf,
    /// Segmented synthetic source, one line per input line.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub beam: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthDataArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub parallel: Option<usize>,
    #[arg(long)]
    pub mono: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Recipe (default from the config, else fusion-comparison).
    #[arg(long)]
    pub recipe: Option<Recipe>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Experiment output directory.
    #[arg(long)]
    pub dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
