use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lmfusion::corpus::io::{read_lines, write_lines_atomic};
use lmfusion::corpus::{
    normalize, strip_bpe, synth_task_generate, tokenize, BpeCodes, FoldMap, NormalizeConfig, ParallelDataset,
    Provenance, SentencePair, Vocabulary,
};
use lmfusion::decoding::{best_outputs, nbest_tsv, translate, DecodeOptions, FusionScorer};
use lmfusion::evaluation::bleu_lines;
use lmfusion::experiment::{emit_curves, run_to_dir, train_tm, ExperimentConfig, Recipe, TaskData};
use lmfusion::fusion::{FusionConfig, Strategy};
use lmfusion::lm::{LmArch, LmModel};
use lmfusion::par;
use lmfusion::training::{lm_checkpoint, tm_checkpoint, train, Hooks};

use crate::artifacts::{load_lms, load_tm_file, vocab_to_meta, FUSION, SOURCE_VOCAB, TARGET_VOCAB};
use crate::{Cli, Command};

pub fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    if let Command::Experiment(a) = &cli.command {
        let mut config = config;
        if let Some(r) = a.recipe {
            config.recipe = r;
        }
        if let Some(t) = cli.threads {
            config.threads = t;
        }
        config.validate()?;
        return experiment(&config, &a.output);
    }
    let seed = cli.seed.unwrap_or(config.seeds[0]);
    par::with_threads(cli.threads.unwrap_or(1), || dispatch(cli, &config, seed))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::new(Recipe::FusionComparison),
    };
    if let Some(s) = cli.seed {
        config.seeds = vec![s];
        config.task.seed = s;
    }
    Ok(config)
}

fn dispatch(cli: &Cli, config: &ExperimentConfig, seed: u64) -> Result<()> {
    match &cli.command {
        Command::Preprocess(a) => {
            let cfg = NormalizeConfig {
                lowercase: !a.keep_case,
                fold: if a.fold_diacritics { FoldMap::latin_diacritics() } else { FoldMap::none() },
            };
            let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
            let text = std::str::from_utf8(&bytes).with_context(|| format!("{} is not UTF-8", a.input.display()))?;
            let lines: Vec<String> = text.lines().map(|l| normalize(l, &cfg)).collect();
            write_lines_atomic(&a.output, &lines)?;
        }
        Command::BpeTrain(a) => {
            let mut text = Vec::new();
            for p in &a.input {
                text.extend(read_lines(p)?);
            }
            let merges = a.merges.unwrap_or(config.task.bpe_merges);
            let codes = BpeCodes::train(text.iter().map(String::as_str), merges)?;
            codes.save(&a.output)?;
            eprintln!("learned {} merges", codes.len());
        }
        Command::BpeApply(a) => {
            let codes = BpeCodes::load(&a.codes)?;
            let lines = read_lines(&a.input)?;
            let out: Vec<String> = codes
                .apply_all(lines.iter().map(String::as_str))
                .iter()
                .map(|t| t.join(" "))
                .collect();
            write_lines_atomic(&a.output, &out)?;
        }
        Command::TrainLm(a) => train_lm_cmd(a, config, seed)?,
        Command::TrainTm(a) => train_tm_cmd(a, config, seed)?,
        Command::Translate(a) => {
            let tm = load_tm_file(&a.model)?;
            let mut fusion = tm.fusion.clone();
            if let Some(l) = a.lambda {
                fusion.lambda = l;
            }
            let lms = load_lms(&a.lm)?;
            check_lm_vocab(&lms, &tm.target_vocab)?;
            let models: Vec<&LmModel> = lms.iter().map(|l| &l.model).collect();
            let scorer = if fusion.strategy == Strategy::Baseline {
                FusionScorer::baseline(&tm.model)
            } else {
                FusionScorer::new(&tm.model, models, fusion)?
            };
            let opts = DecodeOptions {
                beam: a.beam.unwrap_or(config.decode.options.beam),
                ..config.decode.options
            };
            let inputs = read_lines(&a.input)?;
            let render = |ids: &[u32]| strip_bpe(&tm.target_vocab.decode(ids));
            let (outputs, nbest) = decode_lines(&scorer, &tm.source_vocab, &inputs, &opts, render)?;
            write_lines_atomic(&a.output, &outputs)?;
            if let Some(p) = &a.nbest {
                write_lines_atomic(p, &nbest)?;
            }
        }
        Command::Evaluate(a) => {
            let cands = read_lines(&a.candidates)?;
            let refs = read_lines(&a.references)?;
            let report = bleu_lines(&cands, &refs)?;
            println!("bleu {:.2}", report.bleu);
            println!("{report}");
        }
        Command::Backtranslate(a) => {
            let tm = load_tm_file(&a.model)?;
            let scorer = FusionScorer::baseline(&tm.model);
            let opts = DecodeOptions {
                beam: a.beam.unwrap_or(config.decode.options.beam),
                ..config.decode.options
            };
            let inputs = read_lines(&a.input)?;
            let render = |ids: &[u32]| tm.target_vocab.decode(ids).join(" ");
            let (outputs, _) = decode_lines(&scorer, &tm.source_vocab, &inputs, &opts, render)?;
            write_lines_atomic(&a.output, &outputs)?;
        }
        Command::SynthData(a) => {
            let task = synth_task_generate(
                seed,
                a.parallel.unwrap_or(config.task.parallel),
                a.mono.unwrap_or(config.task.mono),
                &config.task.grammar,
            )?;
            fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
            for (name, pairs) in [("train", &task.train), ("dev", &task.dev), ("test", &task.test)] {
                let src: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
                let tgt: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
                write_lines_atomic(&a.output.join(format!("{name}.src")), &src)?;
                write_lines_atomic(&a.output.join(format!("{name}.tgt")), &tgt)?;
            }
            write_lines_atomic(&a.output.join("mono.tgt"), &task.mono)?;
        }
        Command::Analyze(a) => {
            for p in emit_curves(&a.dir)? {
                println!("{}", p.display());
            }
        }
        Command::Experiment(_) => unreachable!("handled before dispatch"),
    }
    Ok(())
}

fn experiment(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        bail!("output directory {} is not empty", dir.display());
    }
    let out = run_to_dir(config, dir)?;
    println!("{} runs written to {}", out.runs.len(), dir.display());
    Ok(())
}

fn sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?.iter().map(|l| tokenize(l)).collect())
}

fn log_path(output: &Path, log: &Option<PathBuf>) -> PathBuf {
    log.clone().unwrap_or_else(|| {
        let mut p = output.as_os_str().to_owned();
        p.push(".log.tsv");
        PathBuf::from(p)
    })
}

fn train_lm_cmd(a: &crate::TrainLmArgs, config: &ExperimentConfig, seed: u64) -> Result<()> {
    let arch: LmArch = match &a.arch {
        Some(s) => s.parse()?,
        None => config.lm.archs[0].clone(),
    };
    let train_text = sentences(&a.train)?;
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::build(train_text.iter().map(Vec::as_slice), None),
    };
    let encode = |text: &[Vec<String>]| -> Vec<Vec<u32>> {
        text.iter().filter(|s| !s.is_empty()).map(|s| vocab.encode(s)).collect()
    };
    let train_ids = encode(&train_text);
    let dev_ids = match &a.dev {
        Some(p) => encode(&sentences(p)?),
        None => Vec::new(),
    };
    let mut lm = LmModel::new(arch, vocab.len(), seed)?;
    let report = train(&mut lm, &train_ids, &dev_ids, &config.lm.train, seed, Hooks::default())?;
    write_lines_atomic(&log_path(&a.output, &a.log), &report.tsv())?;
    lm_checkpoint(&lm)
        .with(TARGET_VOCAB, vocab_to_meta(&vocab))
        .with("seed", seed)
        .save(&a.output)?;
    if !dev_ids.is_empty() {
        eprintln!("dev perplexity {:.3}", lm.perplexity(&dev_ids)?);
    }
    Ok(())
}

fn check_lm_vocab(lms: &[crate::artifacts::LoadedLm], target: &Vocabulary) -> Result<()> {
    if lms.iter().any(|l| &l.vocab != target) {
        bail!("language model vocabulary differs from the translation model's target vocabulary");
    }
    Ok(())
}

fn train_tm_cmd(a: &crate::TrainTmArgs, config: &ExperimentConfig, seed: u64) -> Result<()> {
    let src = sentences(&a.source)?;
    let tgt = sentences(&a.target)?;
    if src.len() != tgt.len() {
        bail!("source has {} lines, target has {}", src.len(), tgt.len());
    }
    let lms = load_lms(&a.lm)?;
    let source_vocab = Vocabulary::build(src.iter().map(Vec::as_slice), None);
    let target_vocab = match lms.first() {
        Some(l) => l.vocab.clone(),
        None => Vocabulary::build(tgt.iter().map(Vec::as_slice), None),
    };
    let encode = |s: Vec<Vec<String>>, t: Vec<Vec<String>>| -> Result<Vec<SentencePair>> {
        let pairs: Vec<(Vec<String>, Vec<String>)> = s.into_iter().zip(t).collect();
        Ok(ParallelDataset::encode(&pairs, &source_vocab, &target_vocab, Provenance::Real)?
            .pairs()
            .to_vec())
    };
    let (dev, dev_refs) = match (&a.dev_source, &a.dev_target) {
        (Some(ds), Some(dt)) => {
            let (ds, dt) = (sentences(ds)?, sentences(dt)?);
            if ds.len() != dt.len() {
                bail!("dev source has {} lines, dev target has {}", ds.len(), dt.len());
            }
            let keep: Vec<bool> = ds.iter().zip(&dt).map(|(s, t)| !s.is_empty() && !t.is_empty()).collect();
            let refs = dt
                .iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|(t, _)| tokenize(&strip_bpe(t)))
                .collect();
            (encode(ds, dt)?, refs)
        }
        _ => (Vec::new(), Vec::new()),
    };
    let data = TaskData {
        bpe: BpeCodes::from_merges(Vec::new()),
        train: encode(src, tgt)?,
        dev,
        test: Vec::new(),
        mono: Vec::new(),
        dev_refs,
        test_refs: Vec::new(),
        source_vocab,
        target_vocab,
    };
    let mut fusion = FusionConfig::new(a.strategy);
    fusion.lambda = a.lambda;
    fusion.postnorm_renormalize = config.tm.postnorm_renormalize;
    let mut tm_cfg = data.tm_config(config.tm.embed, config.tm.hidden);
    if a.strategy == Strategy::Cold {
        tm_cfg.cold_fusion = Some(config.tm.cold_width);
    }
    let models: Vec<&LmModel> = lms.iter().map(|l| &l.model).collect();
    let track_bleu = !data.dev.is_empty();
    let run = train_tm(&data, &data.train, &models, &fusion, tm_cfg, &config.tm.train, seed, track_bleu)?;
    write_lines_atomic(&log_path(&a.output, &a.log), &run.report.tsv())?;
    tm_checkpoint(&run.objective.model)
        .with(SOURCE_VOCAB, vocab_to_meta(&data.source_vocab))
        .with(TARGET_VOCAB, vocab_to_meta(&data.target_vocab))
        .with(FUSION, &fusion)
        .with("seed", seed)
        .save(&a.output)?;
    Ok(())
}

/// Decodes every line; empty lines stay empty so outputs align with inputs.
fn decode_lines<S: lmfusion::decoding::Scorer>(
    scorer: &S,
    source_vocab: &Vocabulary,
    inputs: &[String],
    opts: &DecodeOptions,
    render: impl Fn(&[u32]) -> String,
) -> Result<(Vec<String>, Vec<String>)> {
    let encoded: Vec<Vec<u32>> = inputs.iter().map(|l| source_vocab.encode(&tokenize(l))).collect();
    let (idx, sources): (Vec<usize>, Vec<Vec<u32>>) = encoded
        .into_iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .unzip();
    let nbest = translate(scorer, &sources, opts)?;
    let mut outputs = vec![String::new(); inputs.len()];
    for (i, o) in idx.iter().zip(best_outputs(&nbest)) {
        outputs[*i] = render(&o);
    }
    let nbest_lines = nbest_tsv(&nbest, &render)
        .into_iter()
        .map(|l| match l.split_once('\t') {
            Some((k, rest)) => match k.parse::<usize>() {
                Ok(k) => format!("{}\t{rest}", idx[k]),
                Err(_) => l,
            },
            None => l,
        })
        .collect();
    Ok((outputs, nbest_lines))
}
