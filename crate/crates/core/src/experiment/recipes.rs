//! The experiment recipes and their TSV outputs.
//!
//! Every recipe trains TMs for each configured seed and records one
//! [`RunRecord`] per system and seed plus every training log. Recipe-specific
//! tables (mixing counts, entropies, precision breakdowns, summaries) are
//! added on top. [`ExperimentOutput::write`] lays these out in a directory
//! together with the config snapshot, then [`emit_curves`] derives the
//! per-figure TSVs from what was written.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{BacktranslationMode, ExperimentConfig, Recipe};
use super::pipeline::*;
use crate::corpus::io::{read_lines, write_lines_atomic};
use crate::corpus::{copy_target_pairs, mix_backtranslation, synth_task_generate, MixOptions, ParallelDataset, SentencePair};
use crate::decoding::{best_outputs, translate, DecodeOptions, EnsembleScorer, FusionScorer};
use crate::evaluation::{bleu, precision_breakdown_compare, BleuReport, EntropyReport, PrecisionComparison};
use crate::fusion::{FusionConfig, Strategy};
use crate::lm::{LmArch, LmModel};
use crate::training::{select_models, tune_lambda, TrainReport, LOG_HEADER};
use crate::{par, Error, Result};

pub const RUNS_HEADER: &str = "system\tlm\tsetting\tseed\tdev_bleu\ttest_bleu\tlambda";
pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const RUNS_FILE: &str = "runs.tsv";
pub const LOG_DIR: &str = "logs";
pub const CONVERGENCE_FILE: &str = "convergence.tsv";
pub const CONVERGENCE_SUMMARY_FILE: &str = "convergence_summary.tsv";
pub const TRAIN_SIZE_FILE: &str = "train_size.tsv";
pub const BACKTRANSLATION_FILE: &str = "backtranslation.tsv";

/// One system trained (or tuned) with one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub system: String,
    /// LM set label; `-` for systems without an LM.
    pub lm: String,
    /// Sweep point such as `size=500` or `ratio=4`; `-` outside sweeps.
    pub setting: String,
    pub seed: u64,
    pub dev: BleuReport,
    pub test: BleuReport,
    pub lambda: Option<f64>,
}

impl RunRecord {
    pub fn key(&self) -> String {
        if self.lm == "-" {
            self.system.clone()
        } else {
            format!("{}/{}", self.system, self.lm)
        }
    }

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{}",
            self.system,
            self.lm,
            self.setting,
            self.seed,
            self.dev.bleu,
            self.test.bleu,
            self.lambda.map_or("-".to_string(), |l| format!("{l}"))
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedLog {
    pub system: String,
    pub lm: String,
    pub setting: String,
    pub seed: u64,
    pub report: TrainReport,
}

impl NamedLog {
    /// File stem under `logs/`.
    pub fn stem(&self) -> String {
        let mut s = self.system.clone();
        if self.lm != "-" {
            s.push('.');
            s.push_str(&self.lm);
        }
        if self.setting != "-" {
            s.push('.');
            s.push_str(&self.setting.replace('=', "-"));
        }
        format!("{s}.seed{}", self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub file: String,
    pub header: String,
    pub rows: Vec<String>,
}

impl Table {
    pub fn lines(&self) -> Vec<String> {
        std::iter::once(self.header.clone()).chain(self.rows.iter().cloned()).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentOutput {
    pub runs: Vec<RunRecord>,
    pub logs: Vec<NamedLog>,
    pub tables: Vec<Table>,
    pub entropies: Vec<EntropyReport>,
}

impl ExperimentOutput {
    fn extend(&mut self, other: ExperimentOutput) {
        self.runs.extend(other.runs);
        self.logs.extend(other.logs);
        self.tables.extend(other.tables);
        self.entropies.extend(other.entropies);
    }

    pub fn runs_table(&self) -> Table {
        Table {
            file: RUNS_FILE.into(),
            header: RUNS_HEADER.into(),
            rows: self.runs.iter().map(RunRecord::tsv_row).collect(),
        }
    }

    /// Writes the snapshot, runs, logs and tables into `dir`, then the
    /// derived curves. Returns every file written.
    pub fn write(&self, config: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
        let logs = dir.join(LOG_DIR);
        fs::create_dir_all(&logs).map_err(|e| Error::io(&logs, e))?;
        let mut written = Vec::new();
        let snapshot = dir.join(CONFIG_SNAPSHOT);
        crate::corpus::io::write_atomic(&snapshot, config.to_string().as_bytes())?;
        written.push(snapshot);
        for t in std::iter::once(self.runs_table()).chain(self.tables.iter().cloned()) {
            let p = dir.join(&t.file);
            write_lines_atomic(&p, &t.lines())?;
            written.push(p);
        }
        for l in &self.logs {
            let p = logs.join(format!("{}.tsv", l.stem()));
            write_lines_atomic(&p, &l.report.tsv())?;
            written.push(p);
        }
        written.extend(emit_curves(dir)?);
        Ok(written)
    }
}

fn lm_label(arch: &LmArch) -> &'static str {
    match arch {
        LmArch::Recurrent { .. } => "rnn",
        LmArch::FeedForward { .. } => "ffn",
        LmArch::Uniform => "uniform",
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Everything shared by the seeds of one experiment.
pub struct Context {
    pub config: ExperimentConfig,
    pub data: TaskData,
    pub lms: Vec<LmModel>,
    pub lm_reports: Vec<TrainReport>,
    /// `(label, indices into lms)`: every LM alone, then all together.
    pub lm_sets: Vec<(String, Vec<usize>)>,
}

impl Context {
    /// Generates the task and trains the LMs.
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut task_cfg = config.task.grammar.clone();
        let mut parallel = config.task.parallel;
        if config.recipe == Recipe::TrainSize {
            parallel = parallel.max(config.sweep.sizes.iter().copied().max().unwrap_or(0));
        }
        task_cfg.dev_size = task_cfg.dev_size.max(1);
        let task = synth_task_generate(config.task.seed, parallel, config.task.mono, &task_cfg)?;
        let data = TaskData::build(&task, config.task.bpe_merges)?;
        // only fusion-comparison crosses systems with every LM set
        let archs = match config.recipe {
            Recipe::FusionComparison => &config.lm.archs[..],
            _ => &config.lm.archs[..1],
        };
        let trained = par::try_map(archs, |arch| train_lm(&data, arch, &config.lm.train, config.task.seed))?;
        let (lms, lm_reports): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
        let mut lm_sets: Vec<(String, Vec<usize>)> = archs
            .iter()
            .enumerate()
            .map(|(i, a)| (lm_label(a).to_string(), vec![i]))
            .collect();
        if lms.len() > 1 {
            let label = lm_sets.iter().map(|s| s.0.as_str()).collect::<Vec<_>>().join("+");
            lm_sets.push((label, (0..lms.len()).collect()));
        }
        Ok(Context {
            config: config.clone(),
            data,
            lms,
            lm_reports,
            lm_sets,
        })
    }

    fn lm_refs(&self, set: &[usize]) -> Vec<&LmModel> {
        set.iter().map(|&i| &self.lms[i]).collect()
    }

    fn fusion(&self, strategy: Strategy) -> FusionConfig {
        let mut f = FusionConfig::new(strategy);
        f.postnorm_renormalize = self.config.tm.postnorm_renormalize;
        f
    }

    fn evaluate(&self, run: &TmRun, lms: &[&LmModel], fusion: &FusionConfig) -> Result<(BleuReport, BleuReport)> {
        let opts = &self.config.decode.options;
        let d = &self.data;
        let (dev, _) = decode_bleu(d, &run.objective.model, lms, fusion, &d.dev, &d.dev_refs, opts)?;
        let (test, _) = decode_bleu(d, &run.objective.model, lms, fusion, &d.test, &d.test_refs, opts)?;
        Ok((dev, test))
    }
}

/// Systems a recipe trains for one seed at one sweep point.
struct SeedRuns {
    output: ExperimentOutput,
    /// Trained systems keyed like [`RunRecord::key`], for ensembling.
    models: Vec<(String, TmRun)>,
}

fn run_seed(ctx: &Context, strategies: &[Strategy], train_pairs: &[SentencePair], setting: &str, seed: u64) -> Result<SeedRuns> {
    let cfg = &ctx.config;
    let d = &ctx.data;
    let mut out = ExperimentOutput::default();
    let mut models = Vec::new();
    let base_cfg = d.tm_config(cfg.tm.embed, cfg.tm.hidden);
    let mut record = |system: &str, lm: &str, run: Option<&TmRun>, dev: BleuReport, test: BleuReport, lambda: Option<f64>| {
        if let Some(run) = run {
            out.logs.push(NamedLog {
                system: system.into(),
                lm: lm.into(),
                setting: setting.into(),
                seed,
                report: run.report.clone(),
            });
        }
        out.runs.push(RunRecord {
            system: system.into(),
            lm: lm.into(),
            setting: setting.into(),
            seed,
            dev,
            test,
            lambda,
        });
    };
    let needs_baseline = strategies.iter().any(|s| matches!(s, Strategy::Baseline | Strategy::Shallow));
    let baseline = if needs_baseline {
        let f = FusionConfig::baseline();
        let run = train_tm(d, train_pairs, &[], &f, base_cfg.clone(), &cfg.tm.train, seed, true)?;
        let (dev, test) = ctx.evaluate(&run, &[], &f)?;
        if strategies.contains(&Strategy::Baseline) {
            record("baseline", "-", Some(&run), dev, test, None);
            out.entropies.push(tm_entropy(&format!("baseline.seed{seed}"), &run.objective.model, &d.dev)?);
        }
        Some(run)
    } else {
        None
    };
    if let Some(b) = &baseline {
        models.push(("baseline".to_string(), b.clone()));
    }
    for (label, set) in &ctx.lm_sets {
        let lms = ctx.lm_refs(set);
        for &strategy in strategies {
            if set.len() > 1 && !matches!(strategy, Strategy::PreNorm | Strategy::PostNorm) {
                continue;
            }
            match strategy {
                Strategy::Baseline => {}
                Strategy::Shallow => {
                    let tm = &baseline.as_ref().expect("baseline trained").objective.model;
                    let opts = &cfg.decode.options;
                    let mut reports = Vec::new();
                    let search = tune_lambda(&cfg.decode.lambda_grid, |l| {
                        let (r, _) = decode_bleu(d, tm, &lms, &FusionConfig::shallow(l), &d.dev, &d.dev_refs, opts)?;
                        let bleu = r.bleu;
                        reports.push((l, r));
                        Ok(bleu)
                    })?;
                    let f = FusionConfig::shallow(search.lambda);
                    let dev = reports
                        .into_iter()
                        .find(|(l, _)| *l == search.lambda)
                        .map(|(_, r)| r)
                        .expect("tuned lambda was decoded");
                    let (test, _) = decode_bleu(d, tm, &lms, &f, &d.test, &d.test_refs, opts)?;
                    record("shallow", label, None, dev, test, Some(search.lambda));
                }
                Strategy::Cold | Strategy::PreNorm | Strategy::PostNorm => {
                    let f = ctx.fusion(strategy);
                    let mut tm_cfg = base_cfg.clone();
                    if strategy == Strategy::Cold {
                        tm_cfg.cold_fusion = Some(cfg.tm.cold_width);
                    }
                    let run = train_tm(d, train_pairs, &lms, &f, tm_cfg, &cfg.tm.train, seed, true)?;
                    let (dev, test) = ctx.evaluate(&run, &lms, &f)?;
                    let name = strategy.name();
                    record(name, label, Some(&run), dev, test, None);
                    out.entropies
                        .push(tm_entropy(&format!("{name}.{label}.seed{seed}"), &run.objective.model, &d.dev)?);
                    models.push((format!("{name}/{label}"), run));
                }
            }
        }
    }
    Ok(SeedRuns { output: out, models })
}

/// Runs `f` for every seed in parallel worker slots; results keep seed order.
fn per_seed<R: Send>(ctx: &Context, f: impl Fn(u64) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    par::try_map(&ctx.config.seeds, |&s| f(s))
}

fn lm_entropy_rows(ctx: &Context) -> Result<Vec<EntropyReport>> {
    let dev: Vec<Vec<u32>> = ctx.data.dev.iter().map(|p| p.target.clone()).collect();
    ctx.config
        .lm
        .archs
        .iter()
        .zip(&ctx.lms)
        .map(|(a, lm)| lm_entropy(&format!("lm.{}", lm_label(a)), lm, &dev))
        .collect()
}

fn entropy_table(rows: &[EntropyReport]) -> Table {
    Table {
        file: "entropy.tsv".into(),
        header: EntropyReport::TSV_HEADER.into(),
        rows: rows.iter().map(EntropyReport::tsv_row).collect(),
    }
}

fn summary_table(runs: &[RunRecord], ensembles: &BTreeMap<String, f64>) -> Table {
    let mut groups: BTreeMap<(String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.key(), r.setting.clone())).or_default().push(r);
    }
    let rows = groups
        .into_iter()
        .map(|((key, setting), rs)| {
            let devs: Vec<f64> = rs.iter().map(|r| r.dev.bleu).collect();
            let single = select_models(&devs, None).map(|s| rs[s.single].test.bleu).unwrap_or(f64::NAN);
            let ens = ensembles.get(&key).map_or("-".to_string(), |b| format!("{b:.4}"));
            format!(
                "{key}\t{setting}\t{}\t{:.4}\t{:.4}\t{single:.4}\t{ens}",
                rs.len(),
                median(devs),
                median(rs.iter().map(|r| r.test.bleu).collect())
            )
        })
        .collect();
    Table {
        file: "summary.tsv".into(),
        header: "system\tsetting\truns\tmedian_dev_bleu\tmedian_test_bleu\tsingle_test_bleu\tensemble_test_bleu".into(),
        rows,
    }
}

/// Test BLEU of the top-4-by-dev ensemble for every trained system with at
/// least four seeds.
fn ensembles(ctx: &Context, seeds: &[SeedRuns], runs: &[RunRecord]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    let mut keys: Vec<String> = seeds.iter().flat_map(|s| s.models.iter().map(|m| m.0.clone())).collect();
    keys.sort();
    keys.dedup();
    for key in keys {
        let members: Vec<&TmRun> = seeds
            .iter()
            .filter_map(|s| s.models.iter().find(|m| m.0 == key).map(|m| &m.1))
            .collect();
        if members.len() < 4 {
            continue;
        }
        let devs: Vec<f64> = ctx
            .config
            .seeds
            .iter()
            .filter_map(|&seed| runs.iter().find(|r| r.key() == key && r.seed == seed).map(|r| r.dev.bleu))
            .collect();
        let chosen = select_models(&devs, Some(4))?.ensemble.unwrap_or_default();
        let set = ctx.lm_sets.iter().find(|s| key.ends_with(&format!("/{}", s.0)));
        let lms = set.map(|s| ctx.lm_refs(&s.1)).unwrap_or_default();
        let scorers = chosen
            .iter()
            .map(|&i| {
                let o = &members[i].objective;
                if o.fusion.strategy == Strategy::Baseline {
                    Ok(FusionScorer::baseline(&o.model))
                } else {
                    FusionScorer::new(&o.model, lms.clone(), o.fusion.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let ens = EnsembleScorer::new(scorers)?;
        let sources: Vec<Vec<u32>> = ctx.data.test.iter().map(|p| p.source.clone()).collect();
        let outputs = best_outputs(&translate(&ens, &sources, &ctx.config.decode.options)?);
        let cands: Vec<Vec<String>> = outputs
            .iter()
            .map(|o| ctx.data.render_target(o).split_whitespace().map(str::to_string).collect())
            .collect();
        out.insert(key, bleu(&cands, &ctx.data.test_refs)?.bleu);
    }
    Ok(out)
}

fn fusion_comparison(ctx: &Context, strategies: &[Strategy]) -> Result<ExperimentOutput> {
    let seeds = per_seed(ctx, |s| run_seed(ctx, strategies, &ctx.data.train, "-", s))?;
    let mut out = ExperimentOutput::default();
    out.entropies.extend(lm_entropy_rows(ctx)?);
    for s in &seeds {
        out.extend(s.output.clone());
    }
    let ens = ensembles(ctx, &seeds, &out.runs)?;
    out.tables.push(summary_table(&out.runs, &ens));
    out.tables.push(entropy_table(&out.entropies));
    Ok(out)
}

fn precision_rows(ctx: &Context, out: &ExperimentOutput) -> Table {
    let fmt_report = |r: &BleuReport| {
        let p = &r.precisions;
        format!("{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.3}", p[0], p[1], p[2], p[3], r.bleu, r.bp)
    };
    let mut rows = Vec::new();
    for &seed in &ctx.config.seeds {
        let find = |sys: &str| out.runs.iter().find(|r| r.system == sys && r.seed == seed);
        if let (Some(b), Some(p)) = (find("baseline"), find("postnorm")) {
            rows.push(format!("baseline\t{seed}\t{}", fmt_report(&b.test)));
            rows.push(format!("postnorm\t{seed}\t{}", fmt_report(&p.test)));
            // relative change in percent; undefined when a base precision is 0
            let change = precision_breakdown_compare(&b.test, &p.test)
                .map_or("-\t-\t-\t-\t-".to_string(), |c: PrecisionComparison| c.tsv_row());
            rows.push(format!("difference\t{seed}\t{change}\t-"));
        }
    }
    Table {
        file: "precision.tsv".into(),
        header: "system\tseed\tp1\tp2\tp3\tp4\tbleu\tbp".into(),
        rows,
    }
}

fn synthetic_pairs(ctx: &Context) -> Result<Vec<SentencePair>> {
    let d = &ctx.data;
    match ctx.config.sweep.backtranslation {
        BacktranslationMode::Copy => {
            let mono: Vec<String> = d.mono.iter().map(|m| d.target_vocab.decode(m).join(" ")).collect();
            let text = copy_target_pairs(&mono);
            let pairs: Vec<(Vec<&str>, Vec<&str>)> = text
                .iter()
                .map(|(s, t)| (s.split(' ').collect(), t.split(' ').collect()))
                .collect();
            Ok(ParallelDataset::encode(&pairs, &d.source_vocab, &d.target_vocab, crate::corpus::Provenance::Synthetic)?
                .pairs()
                .to_vec())
        }
        BacktranslationMode::Model => {
            let seed = ctx.config.seeds[0];
            let reversed = TaskData::reversed_pairs(&d.train);
            let mut rev_data = d.clone();
            rev_data.dev = TaskData::reversed_pairs(&d.dev);
            let config = crate::seq2seq::TmConfig::new(d.target_vocab.len(), d.source_vocab.len(), ctx.config.tm.embed, ctx.config.tm.hidden);
            let run = train_tm(&rev_data, &reversed, &[], &FusionConfig::baseline(), config, &ctx.config.tm.train, seed, false)?;
            backtranslate(&run.objective.model, &d.mono, &DecodeOptions::greedy())
        }
    }
}

fn backtranslation_sweep(ctx: &Context) -> Result<ExperimentOutput> {
    let d = &ctx.data;
    let real = ParallelDataset::new(d.train.clone(), d.source_vocab.len(), d.target_vocab.len())?;
    let synthetic = ParallelDataset::new(synthetic_pairs(ctx)?, d.source_vocab.len(), d.target_vocab.len())?;
    let mut out = ExperimentOutput::default();
    let mut counts = Vec::new();
    for &n in &ctx.config.sweep.ratios {
        let opts = MixOptions {
            with_replacement: ctx.config.sweep.with_replacement,
            seed: ctx.config.task.seed,
        };
        let mixed = mix_backtranslation(&real, &synthetic, n, opts)?;
        counts.push(format!(
            "{n}\t{}\t{}\t{}",
            mixed.count(crate::corpus::Provenance::Real),
            mixed.count(crate::corpus::Provenance::Synthetic),
            mixed.len()
        ));
        let setting = format!("ratio={n}");
        let seeds = per_seed(ctx, |s| {
            run_seed(ctx, &[Strategy::Baseline, Strategy::PostNorm], mixed.pairs(), &setting, s)
        })?;
        for s in seeds {
            out.extend(s.output);
        }
    }
    out.entropies.clear();
    out.tables.push(Table {
        file: "mixing.tsv".into(),
        header: "ratio\treal\tsynthetic\ttotal".into(),
        rows: counts,
    });
    Ok(out)
}

fn train_size(ctx: &Context) -> Result<ExperimentOutput> {
    let mut out = ExperimentOutput::default();
    for &size in &ctx.config.sweep.sizes {
        let pairs = &ctx.data.train[..size.min(ctx.data.train.len())];
        let setting = format!("size={size}");
        let seeds = per_seed(ctx, |s| run_seed(ctx, &[Strategy::Baseline, Strategy::PostNorm], pairs, &setting, s))?;
        for s in seeds {
            out.extend(s.output);
        }
    }
    out.entropies.clear();
    Ok(out)
}

/// Runs the configured recipe in a pool of `config.threads` workers, one
/// per seed when that is 0.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let threads = match config.threads {
        0 => config.seeds.len(),
        n => n,
    };
    par::with_threads(threads, || {
        let ctx = Context::prepare(config)?;
        run_recipe(&ctx)
    })
}

pub fn run_recipe(ctx: &Context) -> Result<ExperimentOutput> {
    let pair = [Strategy::Baseline, Strategy::PostNorm];
    match ctx.config.recipe {
        Recipe::FusionComparison => fusion_comparison(ctx, &ctx.config.systems),
        Recipe::Convergence => {
            let mut out = fusion_comparison(ctx, &pair)?;
            out.tables.retain(|t| t.file == "summary.tsv");
            Ok(out)
        }
        Recipe::EntropyAnalysis => fusion_comparison(ctx, &pair),
        Recipe::PrecisionBreakdown => {
            let mut out = fusion_comparison(ctx, &pair)?;
            let table = precision_rows(ctx, &out);
            out.tables.push(table);
            Ok(out)
        }
        Recipe::BacktranslationSweep => backtranslation_sweep(ctx),
        Recipe::TrainSize => train_size(ctx),
    }
}

/// Runs the recipe and writes everything into `dir`.
pub fn run_to_dir(config: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutput> {
    let out = run_experiment(config)?;
    out.write(config, dir)?;
    Ok(out)
}

fn parse_runs(lines: &[String]) -> Result<Vec<(String, String, u64, f64, f64)>> {
    let mut out = Vec::new();
    for line in lines.iter().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::format(RUNS_FILE, format!("bad row {line:?}")));
        }
        let key = if f[1] == "-" { f[0].to_string() } else { format!("{}/{}", f[0], f[1]) };
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(RUNS_FILE, format!("bad number {s:?}")));
        let seed = f[3].parse().map_err(|_| Error::format(RUNS_FILE, "bad seed"))?;
        out.push((key, f[2].to_string(), seed, num(f[4])?, num(f[5])?));
    }
    Ok(out)
}

/// Per-epoch dev BLEU of one log file, by epoch.
fn read_curve(path: &Path) -> Result<Vec<(usize, Option<f64>)>> {
    let lines = read_lines(path)?;
    if lines.first().map(String::as_str) != Some(LOG_HEADER) {
        return Err(Error::format("training log", format!("{} lacks the log header", path.display())));
    }
    lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let epoch = f.first().and_then(|e| e.parse().ok());
            match (epoch, f.get(3)) {
                (Some(e), Some(b)) => Ok((e, b.parse().ok())),
                _ => Err(Error::format("training log", format!("bad row {l:?} in {}", path.display()))),
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |b| format!("{b:.4}"))
}

fn sweep_table(runs: &[(String, String, u64, f64, f64)], prefix: &str, column: &str, use_test: bool) -> Option<Vec<String>> {
    let mut cells: BTreeMap<(i64, String), Vec<f64>> = BTreeMap::new();
    let mut systems: Vec<String> = Vec::new();
    for (key, setting, _, dev, test) in runs {
        let Some(v) = setting.strip_prefix(prefix).and_then(|v| v.parse::<i64>().ok()) else {
            continue;
        };
        if !systems.contains(key) {
            systems.push(key.clone());
        }
        cells.entry((v, key.clone())).or_default().push(if use_test { *test } else { *dev });
    }
    if cells.is_empty() {
        return None;
    }
    systems.sort();
    let mut points: Vec<i64> = cells.keys().map(|k| k.0).collect();
    points.dedup();
    let mut lines = vec![std::iter::once(column.to_string()).chain(systems.iter().cloned()).collect::<Vec<_>>().join("\t")];
    for p in points {
        let row: Vec<String> = systems
            .iter()
            .map(|s| fmt_opt(cells.get(&(p, s.clone())).map(|v| median(v.clone()))))
            .collect();
        lines.push(format!("{p}\t{}", row.join("\t")));
    }
    Some(lines)
}

/// Derives the per-figure TSVs from an experiment directory:
/// `convergence.tsv` (epoch vs dev BLEU for every log),
/// `convergence_summary.tsv` (per seed, the epoch at which PostNorm first
/// reaches the baseline's final dev BLEU), and, when the runs contain sweep
/// points, `train_size.tsv` (size vs median test BLEU) and
/// `backtranslation.tsv` (ratio vs median dev BLEU).
pub fn emit_curves(dir: &Path) -> Result<Vec<PathBuf>> {
    let log_dir = dir.join(LOG_DIR);
    let mut stems: Vec<PathBuf> = match fs::read_dir(&log_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
            .collect(),
        Err(e) => return Err(Error::io(&log_dir, e)),
    };
    if stems.is_empty() {
        return Err(Error::Empty("training logs"));
    }
    stems.sort();
    let mut curves: Vec<(String, Vec<(usize, Option<f64>)>)> = Vec::new();
    for p in &stems {
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        curves.push((name, read_curve(p)?));
    }
    let mut written = Vec::new();

    let epochs = curves.iter().flat_map(|c| c.1.iter().map(|e| e.0)).max().unwrap_or(0);
    let mut lines = vec![std::iter::once("epoch".to_string()).chain(curves.iter().map(|c| c.0.clone())).collect::<Vec<_>>().join("\t")];
    for epoch in 1..=epochs {
        let row: Vec<String> = curves
            .iter()
            .map(|(_, c)| fmt_opt(c.iter().find(|e| e.0 == epoch).and_then(|e| e.1)))
            .collect();
        lines.push(format!("{epoch}\t{}", row.join("\t")));
    }
    let p = dir.join(CONVERGENCE_FILE);
    write_lines_atomic(&p, &lines)?;
    written.push(p);

    let mut summary = vec!["baseline_log\tpostnorm_log\tbaseline_final_dev_bleu\tpostnorm_final_dev_bleu\tpostnorm_epoch_reaching_baseline".to_string()];
    for (name, curve) in &curves {
        let Some(rest) = name.strip_prefix("baseline.") else {
            continue;
        };
        let (setting_seed, seed_part) = match rest.rsplit_once('.') {
            Some((s, seed)) => (format!(".{s}"), seed.to_string()),
            None => (String::new(), rest.to_string()),
        };
        let post = curves.iter().find(|(n, _)| {
            n.starts_with("postnorm.") && n.ends_with(&format!("{setting_seed}.{seed_part}")) && n.matches('.').count() == name.matches('.').count() + 1
        });
        let Some((post_name, post_curve)) = post else {
            continue;
        };
        let final_base = curve.last().and_then(|e| e.1);
        let final_post = post_curve.last().and_then(|e| e.1);
        let reach = final_base.and_then(|t| post_curve.iter().find(|e| e.1.is_some_and(|b| b >= t)).map(|e| e.0));
        summary.push(format!(
            "{name}\t{post_name}\t{}\t{}\t{}",
            fmt_opt(final_base),
            fmt_opt(final_post),
            reach.map_or("-".to_string(), |e| e.to_string())
        ));
    }
    let p = dir.join(CONVERGENCE_SUMMARY_FILE);
    write_lines_atomic(&p, &summary)?;
    written.push(p);

    let runs_path = dir.join(RUNS_FILE);
    if runs_path.exists() {
        let runs = parse_runs(&read_lines(&runs_path)?)?;
        for (prefix, column, file, test) in [("size=", "size", TRAIN_SIZE_FILE, true), ("ratio=", "ratio", BACKTRANSLATION_FILE, false)] {
            if let Some(lines) = sweep_table(&runs, prefix, column, test) {
                let p = dir.join(file);
                write_lines_atomic(&p, &lines)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

/// Baseline-final-BLEU crossing epoch for every seed, from in-memory logs.
pub fn convergence_epochs(out: &ExperimentOutput) -> Vec<(u64, Option<usize>)> {
    let mut res = Vec::new();
    for b in out.logs.iter().filter(|l| l.system == "baseline" && l.setting == "-") {
        let post = out
            .logs
            .iter()
            .find(|l| l.system == "postnorm" && l.seed == b.seed && l.setting == "-");
        let target = b.report.log.last().and_then(|e| e.dev_bleu);
        let epoch = match (post, target) {
            (Some(p), Some(t)) => first_epoch_reaching(&p.report.log, t),
            _ => None,
        };
        res.push((b.seed, epoch));
    }
    res
}

/// Median dev BLEU per system key over the runs without a sweep setting.
pub fn median_dev_bleu(out: &ExperimentOutput) -> BTreeMap<String, f64> {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in out.runs.iter().filter(|r| r.setting == "-") {
        by.entry(r.key()).or_default().push(r.dev.bleu);
    }
    by.into_iter().map(|(k, v)| (k, median(v))).collect()
}
