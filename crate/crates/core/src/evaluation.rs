//! Corpus BLEU, precision breakdowns and entropy/perplexity analysis.

use std::collections::HashMap;
use std::fmt;

use crate::numerics::functional::entropy_of_log_probs;
use crate::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Corpus-level BLEU with its components. Percentages are on a 0..100 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub bp: f64,
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub const TSV_HEADER: &'static str = "bleu\tp1\tp2\tp3\tp4\tbp\tcand_len\tref_len";

    pub fn tsv_row(&self) -> String {
        let p = &self.precisions;
        format!(
            "{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.6}\t{}\t{}",
            self.bleu, p[0], p[1], p[2], p[3], self.bp, self.cand_len, self.ref_len
        )
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.precisions;
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP = {:.3}, ratio = {:.3}, hyp_len = {}, ref_len = {})",
            self.bleu,
            p[0],
            p[1],
            p[2],
            p[3],
            self.bp,
            self.cand_len as f64 / self.ref_len.max(1) as f64,
            self.cand_len,
            self.ref_len
        )
    }
}

/// `bp * exp(mean ln p_n)` from percentage precisions; 0 if any is 0.
pub fn bleu_from_components(precisions: &[f64; MAX_ORDER], bp: f64) -> f64 {
    if precisions.iter().any(|&p| p <= 0.0) {
        return 0.0;
    }
    let mean_log = precisions.iter().map(|p| (p / 100.0).ln()).sum::<f64>() / MAX_ORDER as f64;
    100.0 * bp * mean_log.exp()
}

pub fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram totals per order.
fn sentence_stats<S: AsRef<str>>(cand: &[S], reference: &[S]) -> [(usize, usize); MAX_ORDER] {
    let mut out = [(0, 0); MAX_ORDER];
    for (n, slot) in out.iter_mut().enumerate() {
        let c = ngrams(cand, n + 1);
        let r = ngrams(reference, n + 1);
        let matched = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
        *slot = (matched, cand.len().saturating_sub(n));
    }
    out
}

/// Corpus BLEU over tokenised, line-aligned candidates and references.
pub fn bleu<S: AsRef<str> + Sync>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<BleuReport> {
    if candidates.len() != references.len() {
        return Err(Error::shape(
            "bleu",
            format!("{} candidates, {} references", candidates.len(), references.len()),
        ));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("bleu corpus"));
    }
    let pairs: Vec<(&Vec<S>, &Vec<S>)> = candidates.iter().zip(references).collect();
    let stats = crate::par::map(&pairs, |(c, r)| sentence_stats(c, r));
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    for s in &stats {
        for n in 0..MAX_ORDER {
            matched[n] += s[n].0;
            total[n] += s[n].1;
        }
    }
    let cand_len: usize = candidates.iter().map(|c| c.len()).sum();
    let ref_len: usize = references.iter().map(|r| r.len()).sum();
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if total[n] > 0 {
            precisions[n] = 100.0 * matched[n] as f64 / total[n] as f64;
        }
    }
    let bp = brevity_penalty(cand_len, ref_len);
    Ok(BleuReport {
        bleu: bleu_from_components(&precisions, bp),
        precisions,
        bp,
        cand_len,
        ref_len,
    })
}

/// BLEU over whitespace-separated lines.
pub fn bleu_lines(candidates: &[String], references: &[String]) -> Result<BleuReport> {
    let split = |v: &[String]| -> Vec<Vec<String>> {
        v.iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    };
    bleu(&split(candidates), &split(references))
}

/// Relative change of system `b` over base `a`, in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionComparison {
    pub precisions: [f64; MAX_ORDER],
    pub bleu: f64,
}

impl PrecisionComparison {
    pub const TSV_HEADER: &'static str = "p1\tp2\tp3\tp4\tbleu";

    pub fn tsv_row(&self) -> String {
        let p = &self.precisions;
        format!("{:+.2}\t{:+.2}\t{:+.2}\t{:+.2}\t{:+.2}", p[0], p[1], p[2], p[3], self.bleu)
    }
}

pub fn precision_breakdown_compare(a: &BleuReport, b: &BleuReport) -> Result<PrecisionComparison> {
    if a.precisions.iter().any(|&p| p == 0.0) || a.bleu == 0.0 {
        return Err(Error::invalid("base report has a zero precision"));
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = 100.0 * (b.precisions[n] - a.precisions[n]) / a.precisions[n];
    }
    Ok(PrecisionComparison {
        precisions,
        bleu: 100.0 * (b.bleu - a.bleu) / a.bleu,
    })
}

/// Mean per-step entropy (nats) and perplexity of a model's teacher-forced
/// distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyReport {
    pub label: String,
    pub entropy: f64,
    pub perplexity: f64,
    pub steps: usize,
}

impl EntropyReport {
    pub const TSV_HEADER: &'static str = "model\tentropy\tperplexity\tsteps";

    pub fn tsv_row(&self) -> String {
        format!("{}\t{:.6}\t{:.6}\t{}", self.label, self.entropy, self.perplexity, self.steps)
    }
}

/// Running sums behind an [`EntropyReport`].
#[derive(Clone, Debug, Default)]
pub struct EntropyAccumulator {
    entropy: f64,
    nll: f64,
    steps: usize,
}

impl EntropyAccumulator {
    /// Adds one step: a normalised log-distribution and the gold token.
    pub fn add(&mut self, log_dist: &[f64], target: u32) -> Result<()> {
        let lp = *log_dist.get(target as usize).ok_or(Error::TokenOutOfRange {
            id: target,
            vocab: log_dist.len(),
        })?;
        self.entropy += entropy_of_log_probs(log_dist);
        self.nll -= lp;
        self.steps += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &EntropyAccumulator) {
        self.entropy += other.entropy;
        self.nll += other.nll;
        self.steps += other.steps;
    }

    pub fn report(&self, label: impl Into<String>) -> Result<EntropyReport> {
        if self.steps == 0 {
            return Err(Error::Empty("entropy corpus"));
        }
        let n = self.steps as f64;
        Ok(EntropyReport {
            label: label.into(),
            entropy: self.entropy / n,
            perplexity: (self.nll / n).exp(),
            steps: self.steps,
        })
    }
}

/// Entropy report over `(log-distribution rows, gold tokens)` per sentence.
pub fn average_entropy<'r, I>(label: &str, sentences: I) -> Result<EntropyReport>
where
    I: IntoIterator<Item = (&'r [Vec<f64>], &'r [u32])>,
{
    let mut acc = EntropyAccumulator::default();
    for (rows, gold) in sentences {
        if rows.len() != gold.len() {
            return Err(Error::shape("average_entropy", format!("{} rows, {} targets", rows.len(), gold.len())));
        }
        for (r, &y) in rows.iter().zip(gold) {
            acc.add(r, y)?;
        }
    }
    acc.report(label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identity_scores_100() {
        let refs = vec![toks("the cat sat on the mat"), toks("a b c d e")];
        let r = bleu(&refs, &refs).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(r.precisions, [100.0; 4]);
        assert_eq!(r.bp, 1.0);
    }

    #[test]
    fn hand_counted_toy_corpus() {
        let cands = vec![toks("the the cat sat"), toks("on a mat")];
        let refs = vec![toks("the cat sat down"), toks("on the mat")];
        let r = bleu(&cands, &refs).unwrap();
        // unigram: the(1 of 2) cat sat | on mat => 3 + 2 = 5 of 7
        // bigram: "the cat" "cat sat" | none => 2 of 5
        // trigram: "the cat sat" => 1 of 3; 4-gram: 0 of 1
        assert!((r.precisions[0] - 500.0 / 7.0).abs() < 1e-9);
        assert!((r.precisions[1] - 40.0).abs() < 1e-9);
        assert!((r.precisions[2] - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(r.precisions[3], 0.0);
        assert_eq!(r.bleu, 0.0);
        assert_eq!((r.cand_len, r.ref_len), (7, 7));
    }

    #[test]
    fn brevity_penalty_applies_to_short_output() {
        let r = bleu(&[toks("a b c d")], &[toks("a b c d e f")]).unwrap();
        assert!((r.bp - (1.0 - 6.0 / 4.0f64).exp()).abs() < 1e-12);
        assert!(r.bleu < 100.0 && r.bleu > 0.0);
    }

    #[test]
    fn errors() {
        assert!(bleu::<String>(&[], &[]).is_err());
        assert!(bleu(&[toks("a")], &[]).is_err());
    }

    #[test]
    fn permutation_invariant() {
        let c = vec![toks("a b c d e"), toks("x y z w"), toks("p q r s t u")];
        let r = vec![toks("a b c d f"), toks("x y z w v"), toks("p q r s t")];
        let a = bleu(&c, &r).unwrap();
        let order = [2, 0, 1];
        let c2: Vec<_> = order.iter().map(|&i| c[i].clone()).collect();
        let r2: Vec<_> = order.iter().map(|&i| r[i].clone()).collect();
        assert_eq!(a, bleu(&c2, &r2).unwrap());
    }

    #[test]
    fn comparison() {
        let a = BleuReport {
            bleu: 10.0,
            precisions: [50.0, 20.0, 10.0, 5.0],
            bp: 1.0,
            cand_len: 1,
            ref_len: 1,
        };
        let same = precision_breakdown_compare(&a, &a).unwrap();
        assert_eq!(same.precisions, [0.0; 4]);
        let mut b = a.clone();
        b.precisions.iter_mut().for_each(|p| *p *= 2.0);
        let d = precision_breakdown_compare(&a, &b).unwrap();
        assert!(d.precisions.iter().all(|&x| (x - 100.0).abs() < 1e-12));
        let mut z = a.clone();
        z.precisions[3] = 0.0;
        assert!(precision_breakdown_compare(&z, &a).is_err());
    }

    #[test]
    fn entropy_extremes() {
        let v = 7usize;
        let uniform = vec![-(v as f64).ln(); v];
        let r = average_entropy("u", [(&[uniform.clone(), uniform][..], &[3u32, 4][..])]).unwrap();
        assert!((r.entropy - (v as f64).ln()).abs() < 1e-12);
        assert!((r.perplexity - v as f64).abs() < 1e-9);
        let mut onehot = vec![f64::NEG_INFINITY; v];
        onehot[2] = 0.0;
        let r = average_entropy("o", [(&[onehot][..], &[2u32][..])]).unwrap();
        assert_eq!(r.entropy, 0.0);
        assert_eq!(r.perplexity, 1.0);
        assert!(average_entropy("e", std::iter::empty()).is_err());
    }
}
