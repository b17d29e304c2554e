//! Graph-free math on plain slices.

use super::kernels::log_sum_exp;
use crate::{Error, Result};

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let lp = log_softmax(logits)?;
    Ok(lp.into_iter().map(f64::exp).collect())
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("logit vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let lse = log_sum_exp(logits);
    Ok(logits.iter().map(|v| v - lse).collect())
}

/// Shannon entropy in nats of the distribution whose log-probabilities are given.
pub fn entropy_of_log_probs(logp: &[f64]) -> f64 {
    -logp
        .iter()
        .filter(|v| v.is_finite())
        .map(|&l| l.exp() * l)
        .sum::<f64>()
}

/// Dot-product attention of one query over aligned keys and values.
/// Returns `(context, weights)`.
pub fn dot_attention(
    query: &[f64],
    keys: &[&[f64]],
    values: &[&[f64]],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if keys.is_empty() {
        return Err(Error::Empty("attention key list"));
    }
    if keys.len() != values.len() {
        return Err(Error::shape(
            "dot_attention",
            format!("{} keys, {} values", keys.len(), values.len()),
        ));
    }
    let dv = values[0].len();
    if keys.iter().any(|k| k.len() != query.len()) || values.iter().any(|v| v.len() != dv) {
        return Err(Error::shape("dot_attention", "inconsistent vector sizes"));
    }
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| k.iter().zip(query).map(|(a, b)| a * b).sum())
        .collect();
    let weights = softmax(&scores)?;
    let mut ctx = vec![0.0; dv];
    for (w, v) in weights.iter().zip(values) {
        ctx.iter_mut().zip(v.iter()).for_each(|(c, x)| *c += w * x);
    }
    Ok((ctx, weights))
}
