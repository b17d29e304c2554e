//! Ways of combining translation-model scores `S` with a fixed LM.
//!
//! | strategy  | training objective                    | decoding score                 |
//! |-----------|---------------------------------------|--------------------------------|
//! | baseline  | `log_softmax(S)`                      | same                           |
//! | shallow   | `log_softmax(S)`                      | `log_softmax(S) + λ·lm`        |
//! | prenorm   | `log_softmax(S + lm)`                 | same                           |
//! | postnorm  | `log_softmax(log_softmax(S) + lm)`    | same                           |
//! | cold      | `log_softmax(S + W·(gate ⊙ f(lm)))`   | same                           |
//!
//! PostNorm also has a literal form, `log_softmax(S) + lm`, which is not
//! normalised, and a probability-space mixture form. With several LMs their
//! log-probabilities are summed before combination.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::numerics::functional::log_softmax;
use crate::numerics::{Graph, Linear, NodeId, ParamStore, Tensor};
use crate::{Error, Result};

/// Mixture weight on the TM in the probability-space variant.
pub const MIXTURE_WEIGHT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Baseline,
    Shallow,
    Cold,
    PreNorm,
    PostNorm,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Baseline,
        Strategy::Shallow,
        Strategy::Cold,
        Strategy::PreNorm,
        Strategy::PostNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Shallow => "shallow",
            Strategy::Cold => "cold",
            Strategy::PreNorm => "prenorm",
            Strategy::PostNorm => "postnorm",
        }
    }

    /// Whether the LM takes part in the training objective.
    pub fn trains_with_lm(self) -> bool {
        matches!(self, Strategy::Cold | Strategy::PreNorm | Strategy::PostNorm)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub strategy: Strategy,
    /// LM weight for shallow fusion.
    pub lambda: f64,
    /// PostNorm only: renormalise the product (default) or keep it literal.
    pub postnorm_renormalize: bool,
    /// PostNorm only: mix probabilities instead of multiplying them.
    pub mixture: bool,
}

impl FusionConfig {
    pub fn new(strategy: Strategy) -> Self {
        FusionConfig {
            strategy,
            lambda: 0.0,
            postnorm_renormalize: true,
            mixture: false,
        }
    }

    pub fn baseline() -> Self {
        Self::new(Strategy::Baseline)
    }

    pub fn shallow(lambda: f64) -> Self {
        FusionConfig {
            lambda,
            ..Self::new(Strategy::Shallow)
        }
    }

    /// Checks the configuration against the number of LMs supplied.
    pub fn validate(&self, num_lms: usize) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.mixture && self.strategy != Strategy::PostNorm {
            return Err(Error::invalid("mixture mode only applies to postnorm"));
        }
        match self.strategy {
            Strategy::Baseline => Ok(()),
            Strategy::Shallow | Strategy::Cold if num_lms != 1 => Err(Error::invalid(format!(
                "{} fusion needs exactly one LM, got {num_lms}",
                self.strategy
            ))),
            Strategy::PreNorm | Strategy::PostNorm if !(1..=2).contains(&num_lms) => Err(
                Error::invalid(format!("{} fusion needs one or two LMs, got {num_lms}", self.strategy)),
            ),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for FusionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "strategy={} lambda={} renormalize={} mixture={}",
            self.strategy, self.lambda, self.postnorm_renormalize, self.mixture
        )
    }
}

impl FromStr for FusionConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = FusionConfig::baseline();
        for field in s.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::format("fusion config", format!("bad field {field:?}")))?;
            let bad = || Error::format("fusion config", format!("bad value in {field:?}"));
            match k {
                "strategy" => cfg.strategy = v.parse()?,
                "lambda" => cfg.lambda = v.parse().map_err(|_| bad())?,
                "renormalize" => cfg.postnorm_renormalize = v.parse().map_err(|_| bad())?,
                "mixture" => cfg.mixture = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::format("fusion config", format!("unknown field {k:?}"))),
            }
        }
        Ok(cfg)
    }
}

fn same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("{} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `log_softmax(S + lm)`.
pub fn combine_prenorm(s: &[f64], lm_logp: &[f64]) -> Result<Vec<f64>> {
    same_len("combine_prenorm", s, lm_logp)?;
    let sum: Vec<f64> = s.iter().zip(lm_logp).map(|(a, b)| a + b).collect();
    log_softmax(&sum)
}

/// `log_softmax(S) + lm`, renormalised when `renormalize` is set.
pub fn combine_postnorm(s: &[f64], lm_logp: &[f64], renormalize: bool) -> Result<Vec<f64>> {
    same_len("combine_postnorm", s, lm_logp)?;
    let tm = log_softmax(s)?;
    let prod: Vec<f64> = tm.iter().zip(lm_logp).map(|(a, b)| a + b).collect();
    if renormalize {
        log_softmax(&prod)
    } else {
        Ok(prod)
    }
}

/// `log(w·softmax(S) + (1 - w)·P_LM)` with `w = MIXTURE_WEIGHT`.
pub fn combine_mixture(s: &[f64], lm_logp: &[f64]) -> Result<Vec<f64>> {
    same_len("combine_mixture", s, lm_logp)?;
    let tm = log_softmax(s)?;
    Ok(tm
        .iter()
        .zip(lm_logp)
        .map(|(a, b)| (MIXTURE_WEIGHT * a.exp() + (1.0 - MIXTURE_WEIGHT) * b.exp()).ln())
        .collect())
}

/// `tm_logp + λ·lm_logp`; unnormalised by design.
pub fn shallow_fusion_score(tm_logp: &[f64], lm_logp: &[f64], lambda: f64) -> Result<Vec<f64>> {
    same_len("shallow_fusion", tm_logp, lm_logp)?;
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(tm_logp.iter().zip(lm_logp).map(|(a, b)| a + lambda * b).collect())
}

/// Elementwise sum of several LM log-probability vectors.
pub fn sum_lms(lm_logps: &[&[f64]]) -> Result<Vec<f64>> {
    let first = lm_logps.first().ok_or(Error::Empty("LM list"))?;
    let mut out = first.to_vec();
    for lp in &lm_logps[1..] {
        same_len("sum_lms", &out, lp)?;
        out.iter_mut().zip(lp.iter()).for_each(|(o, v)| *o += v);
    }
    Ok(out)
}

/// PreNorm or PostNorm with the summed log-probabilities of every LM.
pub fn combine_multi_lm(s: &[f64], lm_logps: &[&[f64]], config: &FusionConfig) -> Result<Vec<f64>> {
    let lm = sum_lms(lm_logps)?;
    match config.strategy {
        Strategy::PreNorm => combine_prenorm(s, &lm),
        Strategy::PostNorm if config.mixture => combine_mixture(s, &lm),
        Strategy::PostNorm => combine_postnorm(s, &lm, config.postnorm_renormalize),
        other => Err(Error::invalid(format!("{other} fusion does not combine several LMs"))),
    }
}

/// Per-step decoding scores for one hypothesis. `s` are raw TM scores
/// (already cold-fused for [`Strategy::Cold`]); `lm_logps` holds one vector
/// per LM and may be empty for the baseline.
pub fn step_scores(config: &FusionConfig, s: &[f64], lm_logps: &[&[f64]]) -> Result<Vec<f64>> {
    match config.strategy {
        Strategy::Baseline | Strategy::Cold => log_softmax(s),
        Strategy::Shallow => {
            let lm = sum_lms(lm_logps)?;
            shallow_fusion_score(&log_softmax(s)?, &lm, config.lambda)
        }
        Strategy::PreNorm | Strategy::PostNorm => combine_multi_lm(s, lm_logps, config),
    }
}

/// Training-time fused log-scores in a graph. `logits` are raw TM scores
/// (cold-fused already for [`Strategy::Cold`]); `lm_logp` is the summed LM
/// log-probability constant for the same rows.
pub fn fused_log_probs(
    g: &mut Graph<'_>,
    config: &FusionConfig,
    logits: NodeId,
    lm_logp: Option<NodeId>,
) -> Result<NodeId> {
    let need_lm = || lm_logp.ok_or_else(|| Error::invalid(format!("{} fusion needs LM scores", config.strategy)));
    match config.strategy {
        Strategy::Baseline | Strategy::Shallow | Strategy::Cold => g.log_softmax(logits),
        Strategy::PreNorm => {
            let sum = g.add(logits, need_lm()?)?;
            g.log_softmax(sum)
        }
        Strategy::PostNorm if config.mixture => {
            let tm = g.log_softmax(logits)?;
            let p = g.exp(tm)?;
            let q = g.exp(need_lm()?)?;
            let p = g.scale(p, MIXTURE_WEIGHT)?;
            let q = g.scale(q, 1.0 - MIXTURE_WEIGHT)?;
            let m = g.add(p, q)?;
            g.log(m)
        }
        Strategy::PostNorm => {
            let tm = g.log_softmax(logits)?;
            let prod = g.add(tm, need_lm()?)?;
            if config.postnorm_renormalize {
                g.log_softmax(prod)
            } else {
                Ok(prod)
            }
        }
    }
}

/// Gating network that admits a fixed LM's signal into the output layer:
/// `f = W_lm·lm + b`, `gate = σ(W_g·[feature ; f] + b_g)`,
/// `logits = S + W_o·(gate ⊙ f)`.
#[derive(Clone, Debug)]
pub struct ColdFusionParams {
    pub lm_proj: Linear,
    pub gate: Linear,
    pub out: Linear,
}

impl ColdFusionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        feature: usize,
        vocab: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ColdFusionParams {
            lm_proj: Linear::new(store, &format!("{name}.lm_proj"), vocab, width, true, rng)?,
            gate: Linear::new(store, &format!("{name}.gate"), feature + width, width, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), width, vocab, false, rng)?,
        })
    }

    /// Fused raw scores for rows of `feature`, `tm_logits` and `lm_logp`.
    pub fn logits(&self, g: &mut Graph<'_>, feature: NodeId, tm_logits: NodeId, lm_logp: NodeId) -> Result<NodeId> {
        let f = self.lm_proj.forward(g, lm_logp)?;
        let both = g.concat_cols(&[feature, f])?;
        let pre = self.gate.forward(g, both)?;
        let gate = g.sigmoid(pre)?;
        let gated = g.mul(gate, f)?;
        let extra = self.out.forward(g, gated)?;
        g.add(tm_logits, extra)
    }
}

/// One cold-fusion step on plain values: returns log-probabilities.
pub fn cold_fusion_step(
    store: &ParamStore,
    params: &ColdFusionParams,
    feature: &[f64],
    tm_logits: &[f64],
    lm_logp: &[f64],
) -> Result<Vec<f64>> {
    same_len("cold_fusion_step", tm_logits, lm_logp)?;
    let mut g = Graph::new(store, false);
    let f = g.input(Tensor::matrix(1, feature.len(), feature.to_vec())?)?;
    let s = g.input(Tensor::matrix(1, tm_logits.len(), tm_logits.to_vec())?)?;
    let lm = g.input(Tensor::matrix(1, lm_logp.len(), lm_logp.to_vec())?)?;
    let logits = params.logits(&mut g, f, s, lm)?;
    log_softmax(g.value(logits).data())
}
