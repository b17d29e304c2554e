//! Plain SGD with clipping, plateau decay and checkpoint averaging.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::average_stores;
use crate::corpus::SentencePair;
use crate::fusion::{fused_log_probs, FusionConfig, Strategy};
use crate::lm::LmModel;
use crate::numerics::{Graph, NodeId, ParamStore, Tensor};
use crate::seq2seq::TmModel;
use crate::{par, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Sentences per batch.
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub max_epochs: usize,
    /// Learning-rate multiplier applied on a dev-loss plateau.
    pub decay: f64,
    /// Epochs without dev-loss improvement before decaying.
    pub patience: usize,
    pub min_learning_rate: f64,
    /// Global gradient-norm threshold.
    pub clip_norm: f64,
    /// Number of final epoch checkpoints averaged into the result.
    pub average_last: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            batch_size: 32,
            label_smoothing: 0.1,
            max_epochs: 20,
            decay: 0.5,
            patience: 1,
            min_learning_rate: 1e-4,
            clip_norm: 5.0,
            average_last: 10,
            seeds: vec![1, 2, 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.average_last == 0 {
            return Err(Error::invalid("batch size and averaging window must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label smoothing must lie in [0, 1)"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) || !(self.clip_norm > 0.0) {
            return Err(Error::invalid("decay must lie in (0, 1] and clip norm be positive"));
        }
        Ok(())
    }
}

/// `-Σ_y q(y) log_dist[y]`, `q = (1 - ε) onehot(target) + ε / V`.
pub fn label_smoothed_loss(log_dist: &[f64], target: u32, eps: f64) -> Result<f64> {
    let v = log_dist.len();
    let t = *log_dist
        .get(target as usize)
        .ok_or(Error::TokenOutOfRange { id: target, vocab: v })?;
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid(format!("label smoothing {eps} outside [0, 1)")));
    }
    let mean: f64 = log_dist.iter().sum::<f64>() / v as f64;
    Ok(-((1.0 - eps) * t + eps * mean))
}

/// A model the trainer can optimise.
pub trait Trainable: Sync {
    type Example: Sync;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Examples with equal keys may share a batch.
    fn bucket(&self, example: &Self::Example) -> usize;

    /// Summed loss over `batch` and the number of predicted tokens.
    fn loss(&self, g: &mut Graph<'_>, batch: &[&Self::Example], smoothing: f64) -> Result<(NodeId, usize)>;
}

impl Trainable for LmModel {
    type Example = Vec<u32>;

    fn params(&self) -> &ParamStore {
        LmModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        LmModel::params_mut(self)
    }

    fn bucket(&self, example: &Vec<u32>) -> usize {
        example.len()
    }

    fn loss(&self, g: &mut Graph<'_>, batch: &[&Vec<u32>], smoothing: f64) -> Result<(NodeId, usize)> {
        let refs: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
        LmModel::loss(self, g, &refs, smoothing)
    }
}

/// A training pair plus the fixed LMs' summed log-probabilities for its
/// target, `(len + 1) x vocab`, when the objective needs them.
#[derive(Clone, Debug, PartialEq)]
pub struct TmExample {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub lm: Option<Tensor>,
}

/// Scores every target with the fixed LMs once, up front.
pub fn prepare_examples(pairs: &[SentencePair], lms: &[&LmModel]) -> Result<Vec<TmExample>> {
    let targets: Vec<Vec<u32>> = pairs.iter().map(|p| p.target.clone()).collect();
    let mut summed: Option<Vec<Tensor>> = None;
    for lm in lms {
        let rows = lm.score(&targets)?;
        summed = Some(match summed {
            None => rows,
            Some(acc) => acc
                .into_iter()
                .zip(rows)
                .map(|(a, b)| {
                    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                    Tensor::new(a.shape().to_vec(), data)
                })
                .collect::<Result<Vec<_>>>()?,
        });
    }
    let mut lm_rows = summed.map(|v| v.into_iter().map(Some).collect::<Vec<_>>());
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(i, p)| TmExample {
            source: p.source.clone(),
            target: p.target.clone(),
            lm: lm_rows.as_mut().and_then(|v| v[i].take()),
        })
        .collect())
}

/// A translation model with the objective it is trained under.
#[derive(Clone, Debug)]
pub struct TmObjective {
    pub model: TmModel,
    pub fusion: FusionConfig,
}

impl TmObjective {
    /// Fused log-score rows, targets and mask for a batch of equal-length
    /// sources.
    pub fn fused(&self, g: &mut Graph<'_>, batch: &[&TmExample]) -> Result<(NodeId, Vec<u32>, Vec<f64>)> {
        let sources: Vec<&[u32]> = batch.iter().map(|e| e.source.as_slice()).collect();
        let targets: Vec<&[u32]> = batch.iter().map(|e| e.target.as_slice()).collect();
        let out = self.model.forward(g, &sources, &targets)?;
        let strategy = self.fusion.strategy;
        let lm = if strategy.trains_with_lm() {
            let v = self.model.config().target_vocab;
            let b = batch.len();
            let mut data = vec![0.0; out.steps * b * v];
            for (i, e) in batch.iter().enumerate() {
                let rows = e
                    .lm
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("{strategy} training needs LM scores")))?;
                if rows.cols() != v || rows.rows() != e.target.len() + 1 {
                    return Err(Error::shape("lm scores", format!("{:?} for target of {}", rows.shape(), e.target.len())));
                }
                for t in 0..rows.rows() {
                    let at = (t * b + i) * v;
                    data[at..at + v].copy_from_slice(rows.row(t));
                }
            }
            Some(g.input(Tensor::matrix(out.steps * b, v, data)?)?)
        } else {
            None
        };
        let logits = match (strategy, lm) {
            (Strategy::Cold, Some(lm)) => self.model.cold_logits(g, &out, lm)?,
            _ => out.logits,
        };
        let logp = fused_log_probs(g, &self.fusion, logits, lm)?;
        Ok((logp, out.targets, out.mask))
    }
}

impl Trainable for TmObjective {
    type Example = TmExample;

    fn params(&self) -> &ParamStore {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.model.params_mut()
    }

    fn bucket(&self, example: &TmExample) -> usize {
        example.source.len()
    }

    fn loss(&self, g: &mut Graph<'_>, batch: &[&TmExample], smoothing: f64) -> Result<(NodeId, usize)> {
        let (logp, targets, mask) = self.fused(g, batch)?;
        let tokens = mask.iter().filter(|&&m| m > 0.0).count();
        Ok((g.smoothed_nll(logp, &targets, &mask, smoothing)?, tokens))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Per-token training loss (label-smoothed).
    pub train_loss: f64,
    /// Per-token dev loss without smoothing.
    pub dev_loss: Option<f64>,
    pub dev_bleu: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Mean pre-clipping gradient norm.
    pub grad_norm: f64,
}

pub const LOG_HEADER: &str = "epoch\ttrain_loss\tdev_loss\tdev_bleu\tlr";

impl EpochLog {
    pub fn tsv_row(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        format!(
            "{}\t{:.6}\t{}\t{}\t{}",
            self.epoch,
            self.train_loss,
            opt(self.dev_loss, 6),
            opt(self.dev_bleu, 4),
            self.lr
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    /// Epochs whose parameters were averaged into the final model; a single
    /// entry when the best epoch checkpoint was kept.
    pub averaged_epochs: Vec<usize>,
}

impl TrainReport {
    pub fn tsv(&self) -> Vec<String> {
        std::iter::once(LOG_HEADER.to_string())
            .chain(self.log.iter().map(EpochLog::tsv_row))
            .collect()
    }
}

/// Optional per-epoch callbacks.
pub struct Hooks<'h, M> {
    /// Dev BLEU of the current parameters (before averaging).
    pub dev_bleu: Option<&'h (dyn Fn(&M) -> Result<f64> + Sync)>,
    pub on_epoch: Option<&'h mut dyn FnMut(&EpochLog)>,
}

impl<M> Default for Hooks<'_, M> {
    fn default() -> Self {
        Hooks {
            dev_bleu: None,
            on_epoch: None,
        }
    }
}

/// Batches of indices grouped by bucket key. With an rng, members are
/// shuffled within buckets and the batch order is shuffled too.
pub fn make_batches<M: Trainable>(model: &M, data: &[M::Example], size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in data.iter().enumerate() {
        buckets.entry(model.bucket(e)).or_default().push(i);
    }
    let mut batches = Vec::new();
    match rng {
        Some(rng) => {
            for mut members in buckets.into_values() {
                members.shuffle(rng);
                batches.extend(members.chunks(size).map(<[usize]>::to_vec));
            }
            batches.shuffle(rng);
        }
        None => {
            for members in buckets.into_values() {
                batches.extend(members.chunks(size).map(<[usize]>::to_vec));
            }
        }
    }
    batches
}

/// Per-token loss over `data` with the current parameters.
pub fn evaluate_loss<M: Trainable>(model: &M, data: &[M::Example], batch_size: usize, smoothing: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let batches = make_batches(model, data, batch_size, None);
    let parts = par::try_map(&batches, |b| {
        let refs: Vec<&M::Example> = b.iter().map(|&i| &data[i]).collect();
        let mut g = Graph::new(model.params(), false);
        let (loss, tokens) = model.loss(&mut g, &refs, smoothing)?;
        Ok::<_, Error>((g.value(loss).data()[0], tokens))
    })?;
    let (sum, tokens) = parts.iter().fold((0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(sum / tokens.max(1) as f64)
}

/// One SGD update on `batch`; returns the per-token loss and the
/// pre-clipping gradient norm.
pub fn sgd_step<M: Trainable>(model: &mut M, batch: &[&M::Example], cfg: &TrainConfig, lr: f64) -> Result<(f64, f64, usize)> {
    let (loss, tokens, mut grads) = {
        let mut g = Graph::new(model.params(), true);
        let (sum, tokens) = model.loss(&mut g, batch, cfg.label_smoothing)?;
        let mean = g.scale(sum, 1.0 / tokens.max(1) as f64)?;
        let grads = g.backward(mean)?.into_param_grads();
        (g.value(mean).data()[0], tokens, grads)
    };
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "gradient norm" });
    }
    if norm > cfg.clip_norm {
        grads.scale(cfg.clip_norm / norm);
    }
    let store = model.params_mut();
    for (id, g) in grads.iter() {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .zip(g)
            .for_each(|(p, d)| *p -= lr * d);
    }
    Ok((loss, norm, tokens))
}

/// Trains `model` in place for `cfg.max_epochs` epochs with `seed`, then
/// replaces its parameters by the mean of the last `cfg.average_last`
/// epoch checkpoints. With a dev set, the single best epoch checkpoint is
/// kept instead when it scores better on dev than that mean (dev BLEU when
/// the hook is set, else dev loss).
pub fn train<M: Trainable>(
    model: &mut M,
    train: &[M::Example],
    dev: &[M::Example],
    cfg: &TrainConfig,
    seed: u64,
    mut hooks: Hooks<'_, M>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut lr = cfg.learning_rate;
    let mut best_dev = f64::INFINITY;
    let mut stale = 0;
    let mut log = Vec::with_capacity(cfg.max_epochs);
    let mut recent: VecDeque<(usize, ParamStore)> = VecDeque::with_capacity(cfg.average_last);
    // higher is better
    let score = |bleu: Option<f64>, loss: Option<f64>| bleu.or(loss.map(|l| -l));
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        let batches = make_batches(model, train, cfg.batch_size, Some(&mut rng));
        let (mut loss_sum, mut tokens, mut norm_sum) = (0.0, 0usize, 0.0);
        for (step, b) in batches.iter().enumerate() {
            let refs: Vec<&M::Example> = b.iter().map(|&i| &train[i]).collect();
            let (loss, norm, n) = sgd_step(model, &refs, cfg, lr).map_err(|e| Error::Diverged {
                epoch,
                step,
                source: Box::new(e),
            })?;
            loss_sum += loss * n as f64;
            tokens += n;
            norm_sum += norm;
        }
        let dev_loss = if dev.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, dev, cfg.batch_size, 0.0)?)
        };
        let dev_bleu = match hooks.dev_bleu {
            Some(f) => Some(f(model)?),
            None => None,
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / tokens.max(1) as f64,
            dev_loss,
            dev_bleu,
            lr,
            grad_norm: norm_sum / batches.len() as f64,
        };
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&entry);
        }
        log.push(entry);
        if let Some(d) = dev_loss {
            if d < best_dev {
                best_dev = d;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    lr = (lr * cfg.decay).max(cfg.min_learning_rate);
                    stale = 0;
                }
            }
        }
        if let Some(v) = score(dev_bleu, dev_loss) {
            if best.as_ref().map_or(true, |(b, _, _)| v > *b) {
                best = Some((v, epoch, model.params().clone()));
            }
        }
        if recent.len() == cfg.average_last {
            recent.pop_front();
        }
        recent.push_back((epoch, model.params().clone()));
    }
    let mut averaged_epochs: Vec<usize> = recent.iter().map(|(e, _)| *e).collect();
    let stores: Vec<&ParamStore> = recent.iter().map(|(_, s)| s).collect();
    if !stores.is_empty() {
        let avg = average_stores(&stores)?;
        super::checkpoint::copy_params(model.params_mut(), &avg)?;
    }
    if let Some((best_score, epoch, params)) = best {
        if averaged_epochs.len() > 1 {
            let dev_bleu = match hooks.dev_bleu {
                Some(f) => Some(f(model)?),
                None => None,
            };
            let dev_loss = Some(evaluate_loss(model, dev, cfg.batch_size, 0.0)?);
            if score(dev_bleu, dev_loss).map_or(true, |avg| best_score > avg) {
                super::checkpoint::copy_params(model.params_mut(), &params)?;
                averaged_epochs = vec![epoch];
            }
        }
    }
    Ok(TrainReport { log, averaged_epochs })
}
