use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lmfusion::corpus::{Provenance, SentencePair};
use lmfusion::fusion::FusionConfig;
use lmfusion::seq2seq::{TmConfig, TmModel};
use lmfusion::training::{prepare_examples, train, Hooks, TmObjective, TrainConfig};

/// 32 pairs over 8 content words; the target is a fixed word map of the
/// source.
fn toy_pairs() -> Vec<SentencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let map = [9, 7, 11, 4, 10, 5, 8, 6];
    (0..32)
        .map(|_| {
            let len = rng.gen_range(3..=5);
            let words: Vec<usize> = (0..len).map(|_| rng.gen_range(0..8)).collect();
            SentencePair {
                source: words.iter().map(|&w| 4 + w as u32).collect(),
                target: words.iter().map(|&w| map[w]).collect(),
                provenance: Provenance::Real,
            }
        })
        .collect()
}

#[test]
fn baseline_overfits_a_tiny_dataset() {
    let examples = prepare_examples(&toy_pairs(), &[]).unwrap();
    let mut obj = TmObjective {
        model: TmModel::new(TmConfig::new(12, 12, 64, 128), 5).unwrap(),
        fusion: FusionConfig::baseline(),
    };
    let cfg = TrainConfig {
        label_smoothing: 0.0,
        max_epochs: 200,
        batch_size: 4,
        average_last: 1,
        ..TrainConfig::default()
    };
    let report = train(&mut obj, &examples, &[], &cfg, 1, Hooks::default()).unwrap();
    let best = report.log.iter().map(|e| e.train_loss).fold(f64::INFINITY, f64::min);
    let reached = report.log.iter().position(|e| e.train_loss <= 0.05);
    assert!(reached.is_some(), "best per-token training loss {best}");
}
