//! Building blocks shared by the recipes: segmented data, LM and TM
//! training, decoding and scoring.

use crate::corpus::{
    strip_bpe, BpeCodes, ParallelDataset, Provenance, SentencePair, SynthTask, Vocabulary,
};
use crate::decoding::{best_outputs, translate, DecodeOptions, FusionScorer};
use crate::evaluation::{average_entropy, bleu, BleuReport, EntropyReport};
use crate::fusion::{fused_log_probs, FusionConfig, Strategy};
use crate::lm::{LmArch, LmModel};
use crate::numerics::{Graph, Tensor};
use crate::seq2seq::{TmConfig, TmModel};
use crate::training::{prepare_examples, train, EpochLog, Hooks, TmObjective, TrainConfig, TrainReport};
use crate::{par, Error, Result};

/// A segmented, id-encoded translation task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub bpe: BpeCodes,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
    /// Target-side monolingual sentences.
    pub mono: Vec<Vec<u32>>,
    pub dev_refs: Vec<Vec<String>>,
    pub test_refs: Vec<Vec<String>>,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl TaskData {
    /// Learns joint BPE over the parallel and monolingual text, builds the
    /// vocabularies and encodes every split.
    pub fn build(task: &SynthTask, merges: usize) -> Result<Self> {
        let joint = task
            .train
            .iter()
            .flat_map(|(s, t)| [s.as_str(), t.as_str()])
            .chain(task.mono.iter().map(String::as_str));
        let bpe = BpeCodes::train(joint, merges)?;
        let seg = |pairs: &[(String, String)]| -> Vec<(Vec<String>, Vec<String>)> {
            let src = bpe.apply_all(pairs.iter().map(|p| p.0.as_str()));
            let tgt = bpe.apply_all(pairs.iter().map(|p| p.1.as_str()));
            src.into_iter().zip(tgt).collect()
        };
        let train_seg = seg(&task.train);
        let mono_seg = bpe.apply_all(task.mono.iter().map(String::as_str));
        let source_vocab = Vocabulary::build(train_seg.iter().map(|p| p.0.as_slice()), None);
        let target_vocab = Vocabulary::build(
            train_seg
                .iter()
                .map(|p| p.1.as_slice())
                .chain(mono_seg.iter().map(Vec::as_slice)),
            None,
        );
        let encode = |pairs: &[(Vec<String>, Vec<String>)]| {
            ParallelDataset::encode(pairs, &source_vocab, &target_vocab, Provenance::Real).map(|d| d.pairs().to_vec())
        };
        Ok(TaskData {
            train: encode(&train_seg)?,
            dev: encode(&seg(&task.dev))?,
            test: encode(&seg(&task.test))?,
            mono: mono_seg
                .iter()
                .filter(|s| !s.is_empty())
                .map(|s| target_vocab.encode(s))
                .collect(),
            dev_refs: task.dev.iter().map(|p| words(&p.1)).collect(),
            test_refs: task.test.iter().map(|p| words(&p.1)).collect(),
            bpe,
            source_vocab,
            target_vocab,
        })
    }

    /// Target ids back to words.
    pub fn render_target(&self, ids: &[u32]) -> String {
        strip_bpe(&self.target_vocab.decode(ids))
    }

    pub fn render_source(&self, ids: &[u32]) -> String {
        strip_bpe(&self.source_vocab.decode(ids))
    }

    pub fn tm_config(&self, embed: usize, hidden: usize) -> TmConfig {
        TmConfig::new(self.source_vocab.len(), self.target_vocab.len(), embed, hidden)
    }

    /// The same task with source and target exchanged, for training the
    /// backtranslation model.
    pub fn reversed_pairs(pairs: &[SentencePair]) -> Vec<SentencePair> {
        pairs
            .iter()
            .map(|p| SentencePair {
                source: p.target.clone(),
                target: p.source.clone(),
                provenance: p.provenance,
            })
            .collect()
    }
}

/// Trains an LM on the monolingual data with `dev` targets for validation.
pub fn train_lm(data: &TaskData, arch: &LmArch, cfg: &TrainConfig, seed: u64) -> Result<(LmModel, TrainReport)> {
    let mut lm = LmModel::new(arch.clone(), data.target_vocab.len(), seed)?;
    if matches!(arch, LmArch::Uniform) {
        return Ok((lm, TrainReport { log: Vec::new(), averaged_epochs: Vec::new() }));
    }
    let dev: Vec<Vec<u32>> = data.dev.iter().map(|p| p.target.clone()).collect();
    let report = train(&mut lm, &data.mono, &dev, cfg, seed, Hooks::default())?;
    Ok((lm, report))
}

/// Decodes `pairs` and scores the result against `refs` (word tokens).
pub fn decode_bleu(
    data: &TaskData,
    tm: &TmModel,
    lms: &[&LmModel],
    fusion: &FusionConfig,
    pairs: &[SentencePair],
    refs: &[Vec<String>],
    opts: &DecodeOptions,
) -> Result<(BleuReport, Vec<String>)> {
    let scorer = if fusion.strategy == Strategy::Baseline {
        FusionScorer::baseline(tm)
    } else {
        FusionScorer::new(tm, lms.to_vec(), fusion.clone())?
    };
    let sources: Vec<Vec<u32>> = pairs.iter().map(|p| p.source.clone()).collect();
    let outputs: Vec<String> = best_outputs(&translate(&scorer, &sources, opts)?)
        .iter()
        .map(|o| data.render_target(o))
        .collect();
    let cands: Vec<Vec<String>> = outputs.iter().map(|o| words(o)).collect();
    Ok((bleu(&cands, refs)?, outputs))
}

/// A trained translation system.
#[derive(Clone, Debug)]
pub struct TmRun {
    pub objective: TmObjective,
    pub report: TrainReport,
}

/// Trains one TM under `fusion`, logging greedy dev BLEU every epoch when
/// `track_bleu` is set.
#[allow(clippy::too_many_arguments)]
pub fn train_tm(
    data: &TaskData,
    train_pairs: &[SentencePair],
    lms: &[&LmModel],
    fusion: &FusionConfig,
    config: TmConfig,
    cfg: &TrainConfig,
    seed: u64,
    track_bleu: bool,
) -> Result<TmRun> {
    let trains_with_lm = fusion.strategy.trains_with_lm();
    if trains_with_lm && lms.is_empty() {
        return Err(Error::invalid(format!("{} training needs a language model", fusion.strategy.name())));
    }
    let used: &[&LmModel] = if trains_with_lm { lms } else { &[] };
    let examples = prepare_examples(train_pairs, used)?;
    let dev = prepare_examples(&data.dev, used)?;
    let mut objective = TmObjective {
        model: TmModel::new(config, seed)?,
        fusion: fusion.clone(),
    };
    let decode_fusion = fusion.clone();
    let bleu_hook = move |o: &TmObjective| -> Result<f64> {
        let (report, _) = decode_bleu(
            data,
            &o.model,
            lms,
            &decode_fusion,
            &data.dev,
            &data.dev_refs,
            &DecodeOptions::greedy(),
        )?;
        Ok(report.bleu)
    };
    let hooks = Hooks {
        dev_bleu: if track_bleu { Some(&bleu_hook) } else { None },
        on_epoch: None,
    };
    let report = train(&mut objective, &examples, &dev, cfg, seed, hooks)?;
    Ok(TmRun { objective, report })
}

/// Average entropy and perplexity of the TM's own distribution
/// `softmax(S)` on `pairs` under teacher forcing.
pub fn tm_entropy(label: &str, tm: &TmModel, pairs: &[SentencePair]) -> Result<EntropyReport> {
    let rows = par::try_map(pairs, |p| {
        let logits = tm.teacher_forced_logits(&p.source, &p.target)?;
        log_softmax_rows(&logits)
    })?;
    let targets: Vec<Vec<u32>> = pairs.iter().map(with_eos).collect();
    average_entropy(label, rows.iter().zip(&targets).map(|(r, t)| (r.as_slice(), t.as_slice())))
}

/// The same statistics for the fused distribution a fusion-trained TM was
/// optimised for.
pub fn fused_entropy(label: &str, tm: &TmModel, lms: &[&LmModel], fusion: &FusionConfig, pairs: &[SentencePair]) -> Result<EntropyReport> {
    let examples = prepare_examples(pairs, lms)?;
    let rows = par::try_map(&examples, |e| {
        let logits = tm.teacher_forced_logits(&e.source, &e.target)?;
        let mut g = Graph::detached();
        let s = g.input(logits)?;
        let lm = match &e.lm {
            Some(t) => Some(g.input(t.clone())?),
            None => None,
        };
        let out = fused_log_probs(&mut g, fusion, s, lm)?;
        split_rows(g.value(out))
    })?;
    let targets: Vec<Vec<u32>> = examples.iter().map(|e| with_eos_ids(&e.target)).collect();
    average_entropy(label, rows.iter().zip(&targets).map(|(r, t)| (r.as_slice(), t.as_slice())))
}

pub fn lm_entropy(label: &str, lm: &LmModel, sentences: &[Vec<u32>]) -> Result<EntropyReport> {
    let rows = lm.score(sentences)?;
    let rows = rows.iter().map(split_rows).collect::<Result<Vec<_>>>()?;
    let targets: Vec<Vec<u32>> = sentences.iter().map(|s| with_eos_ids(s)).collect();
    average_entropy(label, rows.iter().zip(&targets).map(|(r, t)| (r.as_slice(), t.as_slice())))
}

fn with_eos(p: &SentencePair) -> Vec<u32> {
    with_eos_ids(&p.target)
}

fn with_eos_ids(t: &[u32]) -> Vec<u32> {
    let mut v = t.to_vec();
    v.push(crate::corpus::EOS);
    v
}

fn split_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(Error::shape("split_rows", format!("expected a matrix, got {shape:?}")));
    }
    Ok(t.data().chunks(shape[1]).map(<[f64]>::to_vec).collect())
}

fn log_softmax_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(split_rows(t)?
        .into_iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter().map(|v| v - lse).collect()
        })
        .collect())
}

/// Per-epoch dev BLEU column of a training log.
pub fn bleu_curve(log: &[EpochLog]) -> Vec<Option<f64>> {
    log.iter().map(|e| e.dev_bleu).collect()
}

/// First epoch whose dev BLEU reaches `threshold`.
pub fn first_epoch_reaching(log: &[EpochLog], threshold: f64) -> Option<usize> {
    log.iter()
        .find(|e| e.dev_bleu.is_some_and(|b| b >= threshold))
        .map(|e| e.epoch)
}

/// Backtranslates monolingual target sentences with a reverse model.
pub fn backtranslate(reverse: &TmModel, mono: &[Vec<u32>], opts: &DecodeOptions) -> Result<Vec<SentencePair>> {
    let scorer = FusionScorer::baseline(reverse);
    let outputs = best_outputs(&translate(&scorer, mono, opts)?);
    Ok(mono
        .iter()
        .zip(outputs)
        .filter(|(_, src)| !src.is_empty())
        .map(|(t, src)| SentencePair {
            source: src,
            target: t.clone(),
            provenance: Provenance::Synthetic,
        })
        .collect())
}
