use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{Provenance, SentencePair};
use crate::fusion::{FusionConfig, Strategy};
use crate::lm::{LmArch, LmModel};
use crate::numerics::{Graph, Tensor};
use crate::seq2seq::{TmConfig, TmModel};

fn tiny_lm() -> LmModel {
    LmModel::new(
        LmArch::Recurrent {
            layers: 1,
            embed: 4,
            hidden: 5,
        },
        10,
        9,
    )
    .unwrap()
}

fn tiny_pairs() -> Vec<SentencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    use rand::Rng;
    (0..12)
        .map(|i| {
            let n = 2 + i % 3;
            let source: Vec<u32> = (0..n).map(|_| rng.gen_range(4..12)).collect();
            let target: Vec<u32> = source.iter().map(|&s| 4 + (s % 6)).collect();
            SentencePair {
                source,
                target,
                provenance: Provenance::Real,
            }
        })
        .collect()
}

fn objective(strategy: FusionConfig) -> TmObjective {
    TmObjective {
        model: TmModel::new(TmConfig::new(12, 10, 4, 5), 3).unwrap(),
        fusion: strategy,
    }
}

#[test]
fn label_smoothing_examples() {
    let lp = [0.7f64.ln(), 0.3f64.ln()];
    assert!((label_smoothed_loss(&lp, 0, 0.1).unwrap() - 0.3991).abs() < 1e-4);
    assert!((label_smoothed_loss(&lp, 0, 0.0).unwrap() + 0.7f64.ln()).abs() < 1e-12);
    let u = vec![-(5f64).ln(); 5];
    for eps in [0.0, 0.1, 0.5] {
        assert!((label_smoothed_loss(&u, 3, eps).unwrap() - 5f64.ln()).abs() < 1e-12);
    }
    assert!(label_smoothed_loss(&lp, 2, 0.1).is_err());
}

#[test]
fn graph_loss_matches_scalar_definition() {
    let mut g = Graph::detached();
    let lp = [0.7f64.ln(), 0.3f64.ln(), 0.2f64.ln(), 0.8f64.ln()];
    let x = g.input(Tensor::matrix(2, 2, lp.to_vec()).unwrap()).unwrap();
    let l = g.smoothed_nll(x, &[0, 1], &[1.0, 1.0], 0.1).unwrap();
    let want = label_smoothed_loss(&lp[..2], 0, 0.1).unwrap() + label_smoothed_loss(&lp[2..], 1, 0.1).unwrap();
    assert!((g.value(l).data()[0] - want).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let tm = TmModel::new(TmConfig::new(12, 10, 4, 5), 11).unwrap();
    let path = dir.path().join("tm.ckpt");
    tm_checkpoint(&tm).with("epoch", 3).save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.get("epoch"), Some("3"));
    let back = load_tm(&ck).unwrap();
    let a = tm.teacher_forced_logits(&[4, 5, 6], &[7, 8]).unwrap();
    let b = back.teacher_forced_logits(&[4, 5, 6], &[7, 8]).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let lm = tiny_lm();
    let back = load_lm(&Checkpoint::from_bytes(&lm_checkpoint(&lm).to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back.params().fingerprint(), lm.params().fingerprint());
    assert!(load_tm(&lm_checkpoint(&lm)).is_err());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = lm_checkpoint(&tiny_lm()).to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}

fn random_checkpoint(seed: u64) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = crate::numerics::ParamStore::new();
    store.add("a", Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng)).unwrap();
    store.add("b", Tensor::uniform(&[5], -1.0, 1.0, &mut rng)).unwrap();
    Checkpoint::new(store).with("epoch", seed)
}

#[test]
fn averaging_matches_elementwise_mean() {
    let cks: Vec<Checkpoint> = (0..10).map(random_checkpoint).collect();
    let avg = average_checkpoints(&cks).unwrap();
    assert_eq!(avg.get("source_epochs"), Some("0,1,2,3,4,5,6,7,8,9"));
    for name in ["a", "b"] {
        let got = avg.params.by_name(name).unwrap().data();
        for (j, &v) in got.iter().enumerate() {
            let mut want = 0.0;
            for c in &cks {
                want += c.params.by_name(name).unwrap().data()[j];
            }
            assert!((v - want / 10.0).abs() < 1e-12);
        }
    }
    let same = average_checkpoints(&[random_checkpoint(3), random_checkpoint(3)]).unwrap();
    assert_eq!(same.params, random_checkpoint(3).params);
    let p = random_checkpoint(4);
    let mut neg = p.clone();
    for id in neg.params.ids().collect::<Vec<_>>() {
        neg.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = -*v);
    }
    let zero = average_checkpoints(&[p, neg]).unwrap();
    assert!(zero.params.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    let mut odd = random_checkpoint(1);
    odd.params = {
        let mut s = crate::numerics::ParamStore::new();
        s.add("a", Tensor::zeros(&[2, 2])).unwrap();
        s.add("b", Tensor::zeros(&[5])).unwrap();
        s
    };
    assert!(average_checkpoints(&[random_checkpoint(1), odd]).is_err());
    assert!(average_checkpoints(&[]).is_err());
}

#[test]
fn literal_postnorm_follows_the_baseline_trajectory() {
    let lm = tiny_lm();
    let pairs = tiny_pairs();
    let examples = prepare_examples(&pairs, &[&lm]).unwrap();
    let mut literal = FusionConfig::new(Strategy::PostNorm);
    literal.postnorm_renormalize = false;
    let mut base = objective(FusionConfig::baseline());
    let mut post = objective(literal);
    let cfg = TrainConfig::default();
    let batches = make_batches(&base, &examples, 4, None);
    for b in batches.iter().take(5) {
        let refs: Vec<&TmExample> = b.iter().map(|&i| &examples[i]).collect();
        sgd_step(&mut base, &refs, &cfg, 0.5).unwrap();
        sgd_step(&mut post, &refs, &cfg, 0.5).unwrap();
        for ((_, a), (_, b)) in base.model.params().iter().zip(post.model.params().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn fusion_training_leaves_the_lm_untouched_and_is_deterministic() {
    let lm = tiny_lm();
    let before = lm.params().fingerprint();
    let pairs = tiny_pairs();
    let examples = prepare_examples(&pairs, &[&lm]).unwrap();
    let cfg = TrainConfig {
        max_epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut cold_cfg = TmConfig::new(12, 10, 4, 5);
    cold_cfg.cold_fusion = Some(3);
    let run = |fusion: FusionConfig, tm_cfg: TmConfig| {
        let mut obj = TmObjective {
            model: TmModel::new(tm_cfg, 1).unwrap(),
            fusion,
        };
        let report = train(&mut obj, &examples, &examples[..4], &cfg, 7, Hooks::default()).unwrap();
        (report, obj.model.params().fingerprint())
    };
    for (fusion, tm_cfg) in [
        (FusionConfig::new(Strategy::PreNorm), TmConfig::new(12, 10, 4, 5)),
        (FusionConfig::new(Strategy::PostNorm), TmConfig::new(12, 10, 4, 5)),
        (FusionConfig::new(Strategy::Cold), cold_cfg.clone()),
    ] {
        let (a, fa) = run(fusion.clone(), tm_cfg.clone());
        let (b, fb) = run(fusion, tm_cfg);
        assert_eq!(a, b);
        assert_eq!(fa, fb);
        assert_eq!(a.log.len(), 3);
        assert!(a.averaged_epochs == vec![1, 2, 3] || a.averaged_epochs.len() == 1);
        assert!(a.log.iter().all(|e| e.train_loss.is_finite() && e.train_loss >= 0.0));
    }
    assert_eq!(lm.params().fingerprint(), before);
}

#[test]
fn fusion_training_without_lm_scores_fails() {
    let pairs = tiny_pairs();
    let examples = prepare_examples(&pairs, &[]).unwrap();
    let mut obj = objective(FusionConfig::new(Strategy::PreNorm));
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    assert!(train(&mut obj, &examples, &[], &cfg, 1, Hooks::default()).is_err());
}

#[test]
fn learning_rate_decays_on_plateau() {
    let pairs = tiny_pairs();
    let examples = prepare_examples(&pairs, &[]).unwrap();
    let mut obj = objective(FusionConfig::baseline());
    // an absurd learning rate makes the dev loss worsen quickly
    let cfg = TrainConfig {
        learning_rate: 50.0,
        max_epochs: 6,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let report = train(&mut obj, &examples, &examples, &cfg, 1, Hooks::default()).unwrap();
    let lrs: Vec<f64> = report.log.iter().map(|e| e.lr).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!(lrs.last().unwrap() < &50.0);
    assert_eq!(report.tsv()[0], LOG_HEADER);
}

#[test]
fn best_dev_epoch_replaces_a_worse_average() {
    use std::sync::atomic::{AtomicUsize, Ordering};
    let pairs = tiny_pairs();
    let examples = prepare_examples(&pairs, &[]).unwrap();
    let cfg = TrainConfig {
        max_epochs: 4,
        batch_size: 4,
        average_last: 3,
        ..TrainConfig::default()
    };
    let run = |bleus: &'static [f64]| {
        let calls = AtomicUsize::new(0);
        let hook = |_: &TmObjective| Ok(bleus[calls.fetch_add(1, Ordering::SeqCst)]);
        let mut obj = objective(FusionConfig::baseline());
        let hooks = Hooks {
            dev_bleu: Some(&hook),
            on_epoch: None,
        };
        let report = train(&mut obj, &examples, &examples, &cfg, 1, hooks).unwrap();
        (report.averaged_epochs, obj.model.params().fingerprint())
    };
    // the fifth value is the averaged model's score
    let (kept, _) = run(&[1.0, 9.0, 3.0, 4.0, 5.0]);
    assert_eq!(kept, vec![2]);
    let (kept, _) = run(&[1.0, 9.0, 3.0, 4.0, 9.0]);
    assert_eq!(kept, vec![2, 3, 4]);
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            label_smoothing: 1.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(cfg.validate().is_err());
    }
}
