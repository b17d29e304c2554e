//! Experiment configuration: `key = value` lines under `[section]` headers.
//!
//! Every key has a default, so an empty file is a valid full-scale config.
//! [`ExperimentConfig`]'s `Display` writes every key explicitly; that text is
//! the snapshot stored next to an experiment's outputs and parses back to an
//! equal config.

use std::fmt;
use std::str::FromStr;

use ini::Ini;

use crate::corpus::GrammarConfig;
use crate::decoding::DecodeOptions;
use crate::fusion::Strategy;
use crate::lm::LmArch;
use crate::training::{lambda_grid, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    FusionComparison,
    BacktranslationSweep,
    Convergence,
    TrainSize,
    EntropyAnalysis,
    PrecisionBreakdown,
}

impl Recipe {
    pub const ALL: [Recipe; 6] = [
        Recipe::FusionComparison,
        Recipe::BacktranslationSweep,
        Recipe::Convergence,
        Recipe::TrainSize,
        Recipe::EntropyAnalysis,
        Recipe::PrecisionBreakdown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::FusionComparison => "fusion-comparison",
            Recipe::BacktranslationSweep => "backtranslation-sweep",
            Recipe::Convergence => "convergence",
            Recipe::TrainSize => "train-size",
            Recipe::EntropyAnalysis => "entropy-analysis",
            Recipe::PrecisionBreakdown => "precision-breakdown",
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown recipe {s:?}")))
    }
}

/// How synthetic source sentences are produced for the monolingual data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BacktranslationMode {
    /// A reverse-direction TM translates the target sentences.
    Model,
    /// The target sentence is copied as its own source.
    Copy,
}

impl fmt::Display for BacktranslationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BacktranslationMode::Model => "model",
            BacktranslationMode::Copy => "copy",
        })
    }
}

impl FromStr for BacktranslationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(BacktranslationMode::Model),
            "copy" => Ok(BacktranslationMode::Copy),
            _ => Err(Error::invalid(format!("unknown backtranslation mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSection {
    pub seed: u64,
    pub parallel: usize,
    pub mono: usize,
    pub grammar: GrammarConfig,
    pub bpe_merges: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmSection {
    /// Every configured LM; multi-LM systems use all of them.
    pub archs: Vec<LmArch>,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TmSection {
    pub embed: usize,
    pub hidden: usize,
    pub cold_width: usize,
    pub postnorm_renormalize: bool,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeSection {
    pub options: DecodeOptions,
    pub lambda_grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSection {
    pub ratios: Vec<i64>,
    pub sizes: Vec<usize>,
    pub backtranslation: BacktranslationMode,
    pub with_replacement: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    /// Systems trained by `fusion-comparison`; the other recipes always
    /// compare the baseline with PostNorm.
    pub systems: Vec<Strategy>,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 means one per seed.
    pub threads: usize,
    pub task: TaskSection,
    pub lm: LmSection,
    pub tm: TmSection,
    pub decode: DecodeSection,
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    pub fn new(recipe: Recipe) -> Self {
        ExperimentConfig {
            recipe,
            systems: Strategy::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            threads: 0,
            task: TaskSection {
                seed: 1,
                parallel: 2000,
                mono: 100_000,
                grammar: GrammarConfig::default(),
                bpe_merges: 200,
            },
            lm: LmSection {
                archs: vec![
                    LmArch::Recurrent {
                        layers: 1,
                        embed: 64,
                        hidden: 128,
                    },
                    LmArch::FeedForward {
                        order: 4,
                        embed: 64,
                        hidden: [128, 128],
                    },
                ],
                train: TrainConfig {
                    max_epochs: 3,
                    average_last: 1,
                    ..TrainConfig::default()
                },
            },
            tm: TmSection {
                embed: 64,
                hidden: 128,
                cold_width: 64,
                postnorm_renormalize: true,
                train: TrainConfig {
                    max_epochs: 90,
                    patience: 3,
                    ..TrainConfig::default()
                },
            },
            decode: DecodeSection {
                options: DecodeOptions::default(),
                lambda_grid: lambda_grid(),
            },
            sweep: SweepSection {
                ratios: vec![0, 1, 2, 4, 8, 16],
                sizes: vec![500, 1000, 2000, 4000],
                backtranslation: BacktranslationMode::Model,
                with_replacement: false,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.systems.is_empty() {
            return Err(Error::invalid("at least one system is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.lm.archs.is_empty() {
            return Err(Error::invalid("at least one LM architecture is required"));
        }
        if self.decode.lambda_grid.is_empty() || self.decode.options.beam == 0 {
            return Err(Error::invalid("lambda grid must be non-empty and beam >= 1"));
        }
        if self.sweep.ratios.iter().any(|&r| r < 0) {
            return Err(Error::invalid("backtranslation ratios must be >= 0"));
        }
        self.lm.train.validate()?;
        self.tm.train.validate()
    }

    /// Parses a config file's text, starting from the defaults for
    /// `fusion-comparison`.
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::format("experiment config", e.to_string()))?;
        let mut cfg = ExperimentConfig::new(Recipe::FusionComparison);
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("experiment");
            for (key, value) in props.iter() {
                cfg.set(section, key, value.trim())?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one `[section] key = value` entry.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::invalid(format!("unknown config key [{section}] {key}"));
        match section {
            "experiment" => match key {
                "recipe" => self.recipe = value.parse()?,
                "systems" => self.systems = parse_list(key, value)?,
                "seeds" => self.seeds = parse_list(key, value)?,
                "threads" => self.threads = parse(key, value)?,
                _ => return Err(unknown()),
            },
            "task" => {
                let g = &mut self.task.grammar;
                match key {
                    "seed" => self.task.seed = parse(key, value)?,
                    "parallel" => self.task.parallel = parse(key, value)?,
                    "mono" => self.task.mono = parse(key, value)?,
                    "bpe_merges" => self.task.bpe_merges = parse(key, value)?,
                    "dev" => g.dev_size = parse(key, value)?,
                    "test" => g.test_size = parse(key, value)?,
                    "words" => g.target_words = parse(key, value)?,
                    "successors" => g.successors = parse(key, value)?,
                    "noise" => g.noise = parse(key, value)?,
                    "zipf" => g.zipf = parse(key, value)?,
                    "min_len" => g.min_len = parse(key, value)?,
                    "max_len" => g.max_len = parse(key, value)?,
                    "homophones" => g.homophone_pairs = parse(key, value)?,
                    "reorder_fraction" => g.reorder_class_fraction = parse(key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "lm" => match key {
                "archs" => {
                    self.lm.archs = value
                        .split(';')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(str::parse)
                        .collect::<Result<_>>()?
                }
                _ if set_train(&mut self.lm.train, key, value)? => {}
                _ => return Err(unknown()),
            },
            "tm" => match key {
                "embed" => self.tm.embed = parse(key, value)?,
                "hidden" => self.tm.hidden = parse(key, value)?,
                "cold_width" => self.tm.cold_width = parse(key, value)?,
                "postnorm_renormalize" => self.tm.postnorm_renormalize = parse(key, value)?,
                _ if set_train(&mut self.tm.train, key, value)? => {}
                _ => return Err(unknown()),
            },
            "decode" => match key {
                "beam" => self.decode.options.beam = parse(key, value)?,
                "max_len" => {
                    let n: usize = parse(key, value)?;
                    self.decode.options.max_len = (n > 0).then_some(n);
                }
                "length_penalty" => self.decode.options.length_penalty = parse(key, value)?,
                "lambda_grid" => self.decode.lambda_grid = parse_list(key, value)?,
                _ => return Err(unknown()),
            },
            "sweep" => match key {
                "ratios" => self.sweep.ratios = parse_list(key, value)?,
                "sizes" => self.sweep.sizes = parse_list(key, value)?,
                "backtranslation" => self.sweep.backtranslation = value.parse()?,
                "with_replacement" => self.sweep.with_replacement = parse(key, value)?,
                _ => return Err(unknown()),
            },
            _ => return Err(Error::invalid(format!("unknown config section [{section}]"))),
        }
        Ok(())
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn set_train(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "epochs" => cfg.max_epochs = parse(key, value)?,
        "learning_rate" => cfg.learning_rate = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "label_smoothing" => cfg.label_smoothing = parse(key, value)?,
        "decay" => cfg.decay = parse(key, value)?,
        "patience" => cfg.patience = parse(key, value)?,
        "min_learning_rate" => cfg.min_learning_rate = parse(key, value)?,
        "clip_norm" => cfg.clip_norm = parse(key, value)?,
        "average_last" => cfg.average_last = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn write_train(f: &mut fmt::Formatter<'_>, c: &TrainConfig) -> fmt::Result {
    writeln!(f, "epochs = {}", c.max_epochs)?;
    writeln!(f, "learning_rate = {}", c.learning_rate)?;
    writeln!(f, "batch_size = {}", c.batch_size)?;
    writeln!(f, "label_smoothing = {}", c.label_smoothing)?;
    writeln!(f, "decay = {}", c.decay)?;
    writeln!(f, "patience = {}", c.patience)?;
    writeln!(f, "min_learning_rate = {}", c.min_learning_rate)?;
    writeln!(f, "clip_norm = {}", c.clip_norm)?;
    writeln!(f, "average_last = {}", c.average_last)
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = &self.task.grammar;
        writeln!(f, "[experiment]")?;
        writeln!(f, "recipe = {}", self.recipe)?;
        let systems: Vec<&str> = self.systems.iter().map(|s| s.name()).collect();
        writeln!(f, "systems = {}", systems.join(","))?;
        writeln!(f, "seeds = {}", join(&self.seeds))?;
        writeln!(f, "threads = {}", self.threads)?;
        writeln!(f, "\n[task]")?;
        writeln!(f, "seed = {}", self.task.seed)?;
        writeln!(f, "parallel = {}", self.task.parallel)?;
        writeln!(f, "mono = {}", self.task.mono)?;
        writeln!(f, "dev = {}", g.dev_size)?;
        writeln!(f, "test = {}", g.test_size)?;
        writeln!(f, "words = {}", g.target_words)?;
        writeln!(f, "successors = {}", g.successors)?;
        writeln!(f, "noise = {}", g.noise)?;
        writeln!(f, "zipf = {}", g.zipf)?;
        writeln!(f, "min_len = {}", g.min_len)?;
        writeln!(f, "max_len = {}", g.max_len)?;
        writeln!(f, "homophones = {}", g.homophone_pairs)?;
        writeln!(f, "reorder_fraction = {}", g.reorder_class_fraction)?;
        writeln!(f, "bpe_merges = {}", self.task.bpe_merges)?;
        writeln!(f, "\n[lm]")?;
        let archs: Vec<String> = self.lm.archs.iter().map(ToString::to_string).collect();
        writeln!(f, "archs = {}", archs.join("; "))?;
        write_train(f, &self.lm.train)?;
        writeln!(f, "\n[tm]")?;
        writeln!(f, "embed = {}", self.tm.embed)?;
        writeln!(f, "hidden = {}", self.tm.hidden)?;
        writeln!(f, "cold_width = {}", self.tm.cold_width)?;
        writeln!(f, "postnorm_renormalize = {}", self.tm.postnorm_renormalize)?;
        write_train(f, &self.tm.train)?;
        writeln!(f, "\n[decode]")?;
        writeln!(f, "beam = {}", self.decode.options.beam)?;
        writeln!(f, "max_len = {}", self.decode.options.max_len.unwrap_or(0))?;
        writeln!(f, "length_penalty = {}", self.decode.options.length_penalty)?;
        writeln!(f, "lambda_grid = {}", join(&self.decode.lambda_grid))?;
        writeln!(f, "\n[sweep]")?;
        writeln!(f, "ratios = {}", join(&self.sweep.ratios))?;
        writeln!(f, "sizes = {}", join(&self.sweep.sizes))?;
        writeln!(f, "backtranslation = {}", self.sweep.backtranslation)?;
        writeln!(f, "with_replacement = {}", self.sweep.with_replacement)
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}
