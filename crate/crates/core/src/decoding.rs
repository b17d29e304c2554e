//! Beam search, greedy decoding and ensembles over any step scorer.

use std::cmp::Ordering;

use crate::corpus::{BOS, EOS, PAD};
use crate::fusion::{step_scores, FusionConfig, Strategy};
use crate::lm::{LmModel, LmState};
use crate::numerics::functional::log_softmax;
use crate::numerics::{Graph, Tensor};
use crate::seq2seq::{group_by_length, DecoderState, EncoderOutput, TmModel};
use crate::{par, Error, Result};

/// Tokens never proposed during search.
pub const NEVER_EMITTED: [u32; 2] = [PAD, BOS];

/// An incremental per-step scorer.
///
/// `prepare` encodes equal-length sources. `step` feeds `tokens[r]` to
/// `states[r]` and returns one row of next-token log-scores per state; state
/// `r` belongs to source `r % sources`.
pub trait Scorer: Sync {
    type Source: Sync;
    type State: Clone + Send + Sync;

    fn vocab_size(&self) -> usize;

    fn prepare(&self, sources: &[&[u32]]) -> Result<(Self::Source, Vec<Self::State>)>;

    fn step(&self, source: &Self::Source, states: &[Self::State], tokens: &[u32]) -> Result<(Tensor, Vec<Self::State>)>;
}

/// A TM combined with zero or more fixed LMs under one fusion strategy.
pub struct FusionScorer<'a> {
    pub tm: &'a TmModel,
    pub lms: Vec<&'a LmModel>,
    pub config: FusionConfig,
}

impl<'a> FusionScorer<'a> {
    pub fn new(tm: &'a TmModel, lms: Vec<&'a LmModel>, config: FusionConfig) -> Result<Self> {
        let lm_count = if config.strategy == Strategy::Baseline { 0 } else { lms.len() };
        config.validate(lm_count)?;
        if config.strategy == Strategy::Cold && tm.cold_fusion().is_none() {
            return Err(Error::invalid("cold fusion needs a model trained with the gate"));
        }
        for lm in &lms {
            if lm.vocab_size() != tm.config().target_vocab {
                return Err(Error::invalid(format!(
                    "LM vocabulary {} differs from TM target vocabulary {}",
                    lm.vocab_size(),
                    tm.config().target_vocab
                )));
            }
        }
        Ok(FusionScorer { tm, lms, config })
    }

    pub fn baseline(tm: &'a TmModel) -> Self {
        FusionScorer {
            tm,
            lms: Vec::new(),
            config: FusionConfig::baseline(),
        }
    }

    fn uses_lm(&self) -> bool {
        self.config.strategy != Strategy::Baseline
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionState {
    pub decoder: DecoderState,
    pub lms: Vec<LmState>,
}

impl Scorer for FusionScorer<'_> {
    type Source = EncoderOutput;
    type State = FusionState;

    fn vocab_size(&self) -> usize {
        self.tm.config().target_vocab
    }

    fn prepare(&self, sources: &[&[u32]]) -> Result<(EncoderOutput, Vec<FusionState>)> {
        let enc = self.tm.encode(sources)?;
        let lm_states: Vec<LmState> = if self.uses_lm() {
            self.lms.iter().map(|lm| lm.start()).collect()
        } else {
            Vec::new()
        };
        let states = self
            .tm
            .initial_states(&enc)
            .into_iter()
            .map(|decoder| FusionState {
                decoder,
                lms: lm_states.clone(),
            })
            .collect();
        Ok((enc, states))
    }

    fn step(&self, enc: &EncoderOutput, states: &[FusionState], tokens: &[u32]) -> Result<(Tensor, Vec<FusionState>)> {
        let dec: Vec<DecoderState> = states.iter().map(|s| s.decoder.clone()).collect();
        let out = self.tm.decoder_step(enc, &dec, tokens)?;
        let n = states.len();
        let mut lm_rows = Vec::new();
        let mut lm_next: Vec<Vec<LmState>> = vec![Vec::new(); n];
        if self.uses_lm() {
            for (k, lm) in self.lms.iter().enumerate() {
                let st: Vec<LmState> = states.iter().map(|s| s.lms[k].clone()).collect();
                let (rows, next) = lm.step_batch(&st, tokens)?;
                lm_rows.push(rows);
                for (slot, s) in lm_next.iter_mut().zip(next) {
                    slot.push(s);
                }
            }
        }
        let logits = if self.config.strategy == Strategy::Cold {
            let cold = self.tm.cold_fusion().expect("checked in new");
            let mut g = Graph::new(self.tm.params(), false);
            let f = g.input(out.feature)?;
            let s = g.input(out.logits)?;
            let l = g.input(lm_rows[0].clone())?;
            let fused = cold.logits(&mut g, f, s, l)?;
            g.value(fused).clone()
        } else {
            out.logits
        };
        let v = self.vocab_size();
        let mut data = Vec::with_capacity(n * v);
        for r in 0..n {
            let lms: Vec<&[f64]> = lm_rows.iter().map(|t| t.row(r)).collect();
            data.extend(step_scores(&self.config, logits.row(r), &lms)?);
        }
        let next = out
            .states
            .into_iter()
            .zip(lm_next)
            .map(|(decoder, lms)| FusionState { decoder, lms })
            .collect();
        Ok((Tensor::matrix(n, v, data)?, next))
    }
}

/// Averages member log-probabilities, then renormalises.
pub struct EnsembleScorer<S> {
    members: Vec<S>,
}

impl<S: Scorer> EnsembleScorer<S> {
    pub fn new(members: Vec<S>) -> Result<Self> {
        let first = members.first().ok_or(Error::Empty("ensemble"))?;
        if members.iter().any(|m| m.vocab_size() != first.vocab_size()) {
            return Err(Error::invalid("ensemble members disagree on vocabulary size"));
        }
        Ok(EnsembleScorer { members })
    }

    pub fn members(&self) -> &[S] {
        &self.members
    }
}

/// `log_softmax(mean_k log_softmax(rows_k))` per row.
pub fn ensemble_combine(rows: &[&[f64]]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or(Error::Empty("ensemble"))?;
    let mut mean = vec![0.0; first.len()];
    for r in rows {
        if r.len() != mean.len() {
            return Err(Error::shape("ensemble", "member rows differ in length"));
        }
        let lp = log_softmax(r)?;
        mean.iter_mut().zip(&lp).for_each(|(m, v)| *m += v);
    }
    let k = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    log_softmax(&mean)
}

impl<S: Scorer> Scorer for EnsembleScorer<S> {
    type Source = Vec<S::Source>;
    type State = Vec<S::State>;

    fn vocab_size(&self) -> usize {
        self.members[0].vocab_size()
    }

    fn prepare(&self, sources: &[&[u32]]) -> Result<(Self::Source, Vec<Self::State>)> {
        let mut srcs = Vec::with_capacity(self.members.len());
        let mut states: Vec<Vec<S::State>> = Vec::new();
        for m in &self.members {
            let (s, st) = m.prepare(sources)?;
            srcs.push(s);
            if states.is_empty() {
                states = st.into_iter().map(|x| vec![x]).collect();
            } else {
                states.iter_mut().zip(st).for_each(|(v, x)| v.push(x));
            }
        }
        Ok((srcs, states))
    }

    fn step(&self, source: &Self::Source, states: &[Self::State], tokens: &[u32]) -> Result<(Tensor, Vec<Self::State>)> {
        let n = states.len();
        let mut tables = Vec::with_capacity(self.members.len());
        let mut next: Vec<Vec<S::State>> = vec![Vec::with_capacity(self.members.len()); n];
        for (k, m) in self.members.iter().enumerate() {
            let st: Vec<S::State> = states.iter().map(|s| s[k].clone()).collect();
            let (t, ns) = m.step(&source[k], &st, tokens)?;
            tables.push(t);
            next.iter_mut().zip(ns).for_each(|(v, x)| v.push(x));
        }
        let v = self.vocab_size();
        let mut data = Vec::with_capacity(n * v);
        for r in 0..n {
            let rows: Vec<&[f64]> = tables.iter().map(|t| t.row(r)).collect();
            data.extend(ensemble_combine(&rows)?);
        }
        Ok((Tensor::matrix(n, v, data)?, next))
    }
}

/// A finished or length-capped search result.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, ending with `</s>` when finished.
    pub tokens: Vec<u32>,
    /// Sum of per-step scores.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the trailing `</s>`.
    pub fn output(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    fn ranking_score(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 {
            self.score
        } else {
            self.score / (self.tokens.len().max(1) as f64).powf(length_penalty)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Fixed cap; `None` means `2 * source length + 10`.
    pub max_len: Option<usize>,
    /// Exponent `α` dividing final scores by `length^α`; 0 disables it.
    pub length_penalty: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam: 6,
            max_len: None,
            length_penalty: 0.0,
        }
    }
}

impl DecodeOptions {
    pub fn greedy() -> Self {
        DecodeOptions {
            beam: 1,
            ..Self::default()
        }
    }

    pub fn max_len_for(&self, source_len: usize) -> usize {
        self.max_len.unwrap_or(2 * source_len + 10)
    }
}

fn by_score_then_tokens(a: &(f64, &[u32]), b: &(f64, &[u32])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Beam search for one source. Returns up to `beam` hypotheses, best first.
pub fn beam_search<S: Scorer>(scorer: &S, source: &[u32], beam: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    beam_search_with(scorer, source, beam, max_len, 0.0)
}

pub fn beam_search_with<S: Scorer>(
    scorer: &S,
    source: &[u32],
    beam: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Vec<Hypothesis>> {
    if source.is_empty() {
        return Err(Error::Empty("source"));
    }
    if beam == 0 || max_len == 0 {
        return Err(Error::invalid("beam and max_len must be at least 1"));
    }
    let (src, mut states) = scorer.prepare(&[source])?;
    let v = scorer.vocab_size();
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut last: Vec<u32> = vec![BOS];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for t in 0..max_len {
        let (scores, next_states) = scorer.step(&src, &states, &last)?;
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * v);
        for (h, (_, base)) in live.iter().enumerate() {
            for (y, &s) in scores.row(h).iter().enumerate() {
                if NEVER_EMITTED.contains(&(y as u32)) || !s.is_finite() {
                    continue;
                }
                cands.push((base + s, h, y as u32));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(beam);
        let mut new_live = Vec::new();
        let mut new_states = Vec::new();
        let mut new_last = Vec::new();
        for (score, h, y) in cands {
            let mut tokens = live[h].0.clone();
            tokens.push(y);
            if y == EOS || t + 1 == max_len {
                pool.push(Hypothesis {
                    tokens,
                    score,
                    finished: y == EOS,
                });
            } else {
                new_live.push((tokens, score));
                new_states.push(next_states[h].clone());
                new_last.push(y);
            }
        }
        live = new_live;
        states = new_states;
        last = new_last;
        if live.is_empty() {
            break;
        }
        // scores only decrease, so nothing live can overtake the retired pool
        let worst_retired = pool.iter().map(|h| h.score).fold(f64::INFINITY, f64::min);
        if !pool.is_empty() && live.iter().all(|(_, s)| *s < worst_retired) {
            break;
        }
    }
    let mut ranked: Vec<(f64, Hypothesis)> = pool
        .into_iter()
        .map(|h| (h.ranking_score(length_penalty), h))
        .collect();
    ranked.sort_by(|a, b| by_score_then_tokens(&(a.0, &a.1.tokens), &(b.0, &b.1.tokens)));
    ranked.truncate(beam);
    Ok(ranked.into_iter().map(|(_, h)| h).collect())
}

/// Greedy decoding of equal-length sources in one batch.
pub fn greedy_batch<S: Scorer>(scorer: &S, sources: &[&[u32]], max_len: usize) -> Result<Vec<Hypothesis>> {
    if sources.iter().any(|s| s.is_empty()) {
        return Err(Error::Empty("source"));
    }
    let (src, mut states) = scorer.prepare(sources)?;
    let n = sources.len();
    let mut out: Vec<Hypothesis> = (0..n)
        .map(|_| Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            finished: false,
        })
        .collect();
    let mut last = vec![BOS; n];
    for _ in 0..max_len {
        if out.iter().all(|h| h.finished) {
            break;
        }
        let (scores, next) = scorer.step(&src, &states, &last)?;
        for (r, h) in out.iter_mut().enumerate() {
            if h.finished {
                continue;
            }
            let mut best: Option<(u32, f64)> = None;
            for (y, &s) in scores.row(r).iter().enumerate() {
                if NEVER_EMITTED.contains(&(y as u32)) || !s.is_finite() {
                    continue;
                }
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((y as u32, s));
                }
            }
            let (y, s) = best.ok_or_else(|| Error::invalid("no token has a finite score"))?;
            h.tokens.push(y);
            h.score += s;
            h.finished = y == EOS;
            last[r] = y;
        }
        states = next;
    }
    Ok(out)
}

/// Decodes every source; returns the n-best list per sentence (one entry for
/// greedy). Greedy decoding batches sentences of equal length.
pub fn translate<S: Scorer>(scorer: &S, sources: &[Vec<u32>], opts: &DecodeOptions) -> Result<Vec<Vec<Hypothesis>>> {
    if opts.beam == 1 && opts.length_penalty == 0.0 {
        let groups: Vec<Vec<usize>> = group_by_length(sources)
            .into_iter()
            .flat_map(|g| g.chunks(64).map(<[usize]>::to_vec).collect::<Vec<_>>())
            .collect();
        let decoded = par::try_map(&groups, |g| {
            let refs: Vec<&[u32]> = g.iter().map(|&i| sources[i].as_slice()).collect();
            greedy_batch(scorer, &refs, opts.max_len_for(refs[0].len()))
        })?;
        let mut out: Vec<Vec<Hypothesis>> = vec![Vec::new(); sources.len()];
        for (g, hyps) in groups.iter().zip(decoded) {
            for (&i, h) in g.iter().zip(hyps) {
                out[i] = vec![h];
            }
        }
        return Ok(out);
    }
    par::try_map(sources, |s| {
        beam_search_with(scorer, s, opts.beam, opts.max_len_for(s.len()), opts.length_penalty)
    })
}

/// Best output token sequence per sentence.
pub fn best_outputs(nbest: &[Vec<Hypothesis>]) -> Vec<Vec<u32>> {
    nbest
        .iter()
        .map(|h| h.first().map(|h| h.output().to_vec()).unwrap_or_default())
        .collect()
}

/// `line<TAB>rank<TAB>score<TAB>tokens` rows, lines and ranks from 0.
pub fn nbest_tsv(nbest: &[Vec<Hypothesis>], render: impl Fn(&[u32]) -> String) -> Vec<String> {
    let mut rows = Vec::new();
    for (line, hyps) in nbest.iter().enumerate() {
        for (rank, h) in hyps.iter().enumerate() {
            rows.push(format!("{line}\t{rank}\t{:.6}\t{}", h.score, render(h.output())));
        }
    }
    rows
}
