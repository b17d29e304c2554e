use std::fs;
use std::path::Path;

use lmfusion::experiment::{emit_curves, run_to_dir, ExperimentConfig, Recipe, CONVERGENCE_FILE, RUNS_HEADER};

fn tiny(recipe: Recipe) -> ExperimentConfig {
    let text = format!(
        "[experiment]\nrecipe = {recipe}\nseeds = 1,2\n\
         [task]\nparallel = 48\nmono = 150\ndev = 12\ntest = 12\nwords = 12\nhomophones = 3\nmax_len = 6\nbpe_merges = 30\n\
         [lm]\narchs = recurrent layers=1 embed=6 hidden=8; feedforward order=3 embed=4 hidden=8,8\nepochs = 1\n\
         [tm]\nembed = 6\nhidden = 8\ncold_width = 4\nepochs = 3\naverage_last = 2\n\
         [decode]\nbeam = 2\nlambda_grid = 0,0.25\n\
         [sweep]\nratios = 0,1,2\nsizes = 16,32\nbacktranslation = copy\n"
    );
    ExperimentConfig::parse(&text).unwrap()
}

fn read(dir: &Path, file: &str) -> Vec<String> {
    fs::read_to_string(dir.join(file))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

fn all_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn fusion_comparison_covers_every_system_and_lm_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Recipe::FusionComparison);
    let out = run_to_dir(&cfg, dir.path()).unwrap();
    // baseline, 4 strategies x {rnn, ffn}, PreNorm and PostNorm with both LMs
    assert_eq!(out.runs.len(), 2 * (1 + 4 * 2 + 2));
    let runs = read(dir.path(), "runs.tsv");
    assert_eq!(runs[0], RUNS_HEADER);
    assert_eq!(runs.len(), 1 + out.runs.len());
    assert!(runs.iter().any(|r| r.starts_with("postnorm\trnn+ffn\t-\t2\t")));
    assert!(!runs.iter().any(|r| r.starts_with("cold\trnn+ffn")));
    assert!(out.runs.iter().filter(|r| r.system == "shallow").all(|r| r.lambda.is_some()));
    // every trained system logs one row per epoch
    assert_eq!(out.logs.len(), 2 * (1 + 3 * 2 + 2));
    for l in &out.logs {
        assert_eq!(l.report.log.len(), 3);
        assert!(l.report.log.iter().all(|e| e.dev_bleu.is_some()));
    }
    let conv = read(dir.path(), CONVERGENCE_FILE);
    assert_eq!(conv.len(), 1 + 3);
    assert_eq!(conv[0].split('\t').count(), 1 + out.logs.len());
    let entropy = read(dir.path(), "entropy.tsv");
    assert!(entropy.iter().any(|r| r.starts_with("lm.rnn\t")));
    assert!(entropy.iter().any(|r| r.starts_with("postnorm.rnn.seed1\t")));
    let snapshot = fs::read_to_string(dir.path().join("config.snapshot")).unwrap();
    assert_eq!(ExperimentConfig::parse(&snapshot).unwrap(), cfg);
}

#[test]
fn rerunning_from_the_snapshot_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Recipe::Convergence);
    cfg.threads = 2;
    run_to_dir(&cfg, a.path()).unwrap();
    let snapshot = fs::read_to_string(a.path().join("config.snapshot")).unwrap();
    run_to_dir(&ExperimentConfig::parse(&snapshot).unwrap(), b.path()).unwrap();
    let fa = all_files(a.path());
    assert!(fa.len() >= 6);
    assert_eq!(fa, all_files(b.path()));
}

#[test]
fn convergence_rows_match_the_epoch_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Recipe::Convergence);
    cfg.seeds = vec![3];
    let out = run_to_dir(&cfg, dir.path()).unwrap();
    assert_eq!(out.logs.len(), 2);
    let conv = read(dir.path(), CONVERGENCE_FILE);
    assert_eq!(conv[0], "epoch\tbaseline.seed3\tpostnorm.rnn.seed3");
    assert_eq!(conv.len(), 1 + cfg.tm.train.max_epochs);
    let summary = read(dir.path(), "convergence_summary.tsv");
    assert_eq!(summary.len(), 2);
    assert!(summary[1].starts_with("baseline.seed3\tpostnorm.rnn.seed3\t"));
}

#[test]
fn train_size_sweep_has_one_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Recipe::TrainSize);
    cfg.seeds = vec![1];
    cfg.sweep.sizes = vec![8, 16, 24, 32];
    run_to_dir(&cfg, dir.path()).unwrap();
    let table = read(dir.path(), "train_size.tsv");
    assert_eq!(table[0], "size\tbaseline\tpostnorm/rnn");
    let sizes: Vec<&str> = table[1..].iter().map(|r| r.split('\t').next().unwrap()).collect();
    assert_eq!(sizes, ["8", "16", "24", "32"]);
}

#[test]
fn backtranslation_sweep_mixes_exact_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Recipe::BacktranslationSweep);
    cfg.seeds = vec![1];
    cfg.task.mono = 800;
    cfg.sweep.ratios = vec![0, 1, 2, 4, 8, 16];
    cfg.sweep.with_replacement = true;
    cfg.tm.train.max_epochs = 1;
    cfg.tm.train.average_last = 1;
    run_to_dir(&cfg, dir.path()).unwrap();
    let mixing = read(dir.path(), "mixing.tsv");
    assert_eq!(mixing[0], "ratio\treal\tsynthetic\ttotal");
    for (row, n) in mixing[1..].iter().zip([0usize, 1, 2, 4, 8, 16]) {
        let f: Vec<usize> = row.split('\t').map(|v| v.parse().unwrap()).collect();
        assert_eq!(f, vec![n, 48, 48 * n, 48 * (1 + n)]);
    }
    let table = read(dir.path(), "backtranslation.tsv");
    assert_eq!(table[0], "ratio\tbaseline\tpostnorm/rnn");
    assert_eq!(table.len(), 7);
}

#[test]
fn backtranslation_with_a_reverse_model_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Recipe::BacktranslationSweep);
    cfg.seeds = vec![1];
    cfg.sweep.ratios = vec![1];
    cfg.sweep.backtranslation = lmfusion::experiment::BacktranslationMode::Model;
    let out = run_to_dir(&cfg, dir.path()).unwrap();
    assert_eq!(out.runs.len(), 2);
}

#[test]
fn precision_breakdown_reports_differences() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Recipe::PrecisionBreakdown);
    cfg.seeds = vec![1];
    run_to_dir(&cfg, dir.path()).unwrap();
    let t = read(dir.path(), "precision.tsv");
    assert_eq!(t.len(), 4);
    assert!(t[3].starts_with("difference\t1\t"));
}

#[test]
fn emit_curves_needs_logs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_curves(dir.path()).is_err());
    fs::create_dir(dir.path().join("logs")).unwrap();
    assert!(emit_curves(dir.path()).is_err());
}
