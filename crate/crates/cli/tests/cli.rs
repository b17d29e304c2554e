use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "[experiment]\nseeds = 1\n\
[task]\nparallel = 40\nmono = 120\ndev = 10\ntest = 10\nwords = 12\nhomophones = 3\nmax_len = 6\nbpe_merges = 20\n\
[lm]\narchs = recurrent layers=1 embed=6 hidden=8\nepochs = 1\n\
[tm]\nembed = 6\nhidden = 8\ncold_width = 4\nepochs = 2\naverage_last = 2\n\
[decode]\nbeam = 2\nlambda_grid = 0,0.25\n\
[sweep]\nratios = 0,1,2,4,8,16\nsizes = 16,32\nbacktranslation = copy\nwith_replacement = true\n";

fn lmfusion(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmfusion"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lmfusion(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmfusion(dir.path(), &["evaluate", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(lmfusion(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(lmfusion(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmfusion(dir.path(), &["evaluate", "--candidates", "missing", "--references", "missing"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("bad.cfg"), "[tm]\nwidth = 3\n").unwrap();
    let out = lmfusion(dir.path(), &["--config", "bad.cfg", "synth-data", "--output", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_identical_files_scores_100() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.txt"), "the cat sat on the mat\nhello there world again\n").unwrap();
    let out = ok(dir.path(), &["evaluate", "--candidates", "a.txt", "--references", "a.txt"]);
    assert_eq!(out.lines().next(), Some("bleu 100.00"));
}

#[test]
fn preprocess_normalizes_without_touching_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let raw = "Hello, World!\nÇa va?\n";
    fs::write(dir.path().join("raw.txt"), raw).unwrap();
    ok(dir.path(), &["preprocess", "--input", "raw.txt", "--output", "tok.txt", "--fold-diacritics"]);
    assert_eq!(lines(&dir.path().join("tok.txt")), ["hello , world !", "ca va ?"]);
    assert_eq!(fs::read_to_string(dir.path().join("raw.txt")).unwrap(), raw);
}

#[test]
fn file_pipeline_trains_translates_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "tiny.cfg"];
        all.extend_from_slice(args);
        ok(d, &all)
    };
    run(&["synth-data", "--output", "data"]);
    assert_eq!(lines(&d.join("data/train.src")).len(), 40);
    assert_eq!(lines(&d.join("data/mono.tgt")).len(), 120);
    run(&["bpe-train", "--input", "data/train.src", "--input", "data/mono.tgt", "--output", "codes"]);
    for f in ["train.src", "train.tgt", "dev.src", "dev.tgt", "mono.tgt"] {
        run(&["bpe-apply", "--codes", "codes", "--input", &format!("data/{f}"), "--output", &format!("{f}.bpe")]);
    }
    run(&["train-lm", "--train", "mono.tgt.bpe", "--dev", "dev.tgt.bpe", "--output", "lm.ckpt"]);
    assert_eq!(lines(&d.join("lm.ckpt.log.tsv")).len(), 2);
    run(&[
        "train-tm", "--source", "train.src.bpe", "--target", "train.tgt.bpe", "--dev-source", "dev.src.bpe",
        "--dev-target", "dev.tgt.bpe", "--lm", "lm.ckpt", "--strategy", "postnorm", "--output", "tm.ckpt",
    ]);
    let log = lines(&d.join("tm.ckpt.log.tsv"));
    assert_eq!(log.len(), 3);
    assert!(log[1].split('\t').nth(3).unwrap().parse::<f64>().is_ok());
    run(&["translate", "--model", "tm.ckpt", "--lm", "lm.ckpt", "--input", "dev.src.bpe", "--output", "hyp.txt", "--nbest", "nbest.tsv"]);
    assert_eq!(lines(&d.join("hyp.txt")).len(), lines(&d.join("dev.src.bpe")).len());
    let mut nbest_lines: Vec<usize> = lines(&d.join("nbest.tsv"))
        .iter()
        .map(|l| l.split('\t').next().unwrap().parse().unwrap())
        .collect();
    nbest_lines.dedup();
    assert_eq!(nbest_lines, (0..10).collect::<Vec<_>>());
    let out = run(&["evaluate", "--candidates", "hyp.txt", "--references", "data/dev.tgt"]);
    assert!(out.starts_with("bleu "));
    // fused decoding needs the LM
    let missing = lmfusion(d, &["translate", "--model", "tm.ckpt", "--input", "dev.src.bpe", "--output", "x"]);
    assert_eq!(missing.status.code(), Some(2));

    run(&["train-tm", "--source", "train.tgt.bpe", "--target", "train.src.bpe", "--output", "rev.ckpt"]);
    run(&["backtranslate", "--model", "rev.ckpt", "--input", "mono.tgt.bpe", "--output", "synth.src.bpe", "--beam", "1"]);
    assert_eq!(lines(&d.join("synth.src.bpe")).len(), 120);
}

#[test]
fn backtranslation_sweep_writes_one_row_per_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    ok(d, &["--config", "tiny.cfg", "experiment", "--recipe", "backtranslation-sweep", "--output", "bt"]);
    let table = lines(&d.join("bt/backtranslation.tsv"));
    assert_eq!(table[0], "ratio\tbaseline\tpostnorm/rnn");
    let ratios: Vec<&str> = table[1..].iter().map(|r| r.split('\t').next().unwrap()).collect();
    assert_eq!(ratios, ["0", "1", "2", "4", "8", "16"]);
    let before = fs::read(d.join("bt/backtranslation.tsv")).unwrap();
    ok(d, &["analyze", "--dir", "bt"]);
    assert_eq!(fs::read(d.join("bt/backtranslation.tsv")).unwrap(), before);
    // refuses to overwrite a finished run
    let again = lmfusion(d, &["--config", "tiny.cfg", "experiment", "--output", "bt"]);
    assert_eq!(again.status.code(), Some(2));
}
