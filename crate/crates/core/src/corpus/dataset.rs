use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::Vocabulary;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Real,
    Synthetic,
}

/// One aligned pair of token-id sequences (no bos/eos).
#[derive(Clone, Debug, PartialEq)]
pub struct SentencePair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelDataset {
    pairs: Vec<SentencePair>,
}

impl ParallelDataset {
    /// Validates that no side is empty and every id is inside its vocabulary.
    pub fn new(pairs: Vec<SentencePair>, source_vocab: usize, target_vocab: usize) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            if p.source.is_empty() || p.target.is_empty() {
                return Err(Error::invalid(format!("pair {i} has an empty side")));
            }
            for (&id, v) in p
                .source
                .iter()
                .map(|id| (id, source_vocab))
                .chain(p.target.iter().map(|id| (id, target_vocab)))
            {
                if id as usize >= v {
                    return Err(Error::TokenOutOfRange { id, vocab: v });
                }
            }
        }
        Ok(ParallelDataset { pairs })
    }

    /// Encodes tokenised text pairs; pairs with an empty side are skipped.
    pub fn encode<S: AsRef<str>>(
        pairs: &[(Vec<S>, Vec<S>)],
        source_vocab: &Vocabulary,
        target_vocab: &Vocabulary,
        provenance: Provenance,
    ) -> Result<Self> {
        let pairs = pairs
            .iter()
            .filter(|(s, t)| !s.is_empty() && !t.is_empty())
            .map(|(s, t)| SentencePair {
                source: source_vocab.encode(s),
                target: target_vocab.encode(t),
                provenance,
            })
            .collect();
        Self::new(pairs, source_vocab.len(), target_vocab.len())
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.pairs.iter().filter(|p| p.provenance == provenance).count()
    }

    /// First `n` pairs.
    pub fn truncated(&self, n: usize) -> Self {
        ParallelDataset {
            pairs: self.pairs[..n.min(self.pairs.len())].to_vec(),
        }
    }

    /// Swaps source and target on every pair.
    pub fn reversed(&self) -> Self {
        ParallelDataset {
            pairs: self
                .pairs
                .iter()
                .map(|p| SentencePair {
                    source: p.target.clone(),
                    target: p.source.clone(),
                    provenance: p.provenance,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixOptions {
    /// Sample synthetic pairs with replacement when the pool is too small.
    pub with_replacement: bool,
    pub seed: u64,
}

impl Default for MixOptions {
    fn default() -> Self {
        MixOptions {
            with_replacement: false,
            seed: 0,
        }
    }
}

/// Mixes real and synthetic pairs at a ratio of 1:`n` (one real per `n`
/// synthetic). Without replacement the synthetic share is truncated to the
/// pool size. The result is shuffled with `opts.seed`.
pub fn mix_backtranslation(
    real: &ParallelDataset,
    synthetic: &ParallelDataset,
    n: i64,
    opts: MixOptions,
) -> Result<ParallelDataset> {
    if n < 0 {
        return Err(Error::invalid(format!("mixing ratio must be >= 0, got {n}")));
    }
    if n == 0 {
        return Ok(real.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let wanted = real.len() * n as usize;
    let pool = synthetic.pairs();
    let picked: Vec<&SentencePair> = if opts.with_replacement && !pool.is_empty() {
        (0..wanted).map(|_| &pool[rng.gen_range(0..pool.len())]).collect()
    } else {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(wanted);
        idx.into_iter().map(|i| &pool[i]).collect()
    };
    let mut pairs: Vec<SentencePair> = real.pairs().to_vec();
    pairs.extend(picked.into_iter().map(|p| SentencePair {
        provenance: Provenance::Synthetic,
        ..p.clone()
    }));
    pairs.shuffle(&mut rng);
    Ok(ParallelDataset { pairs })
}

/// Cheap stand-in for backtranslation: the target sentence doubles as its
/// own source.
pub fn copy_target_pairs<S: AsRef<str>>(mono: &[S]) -> Vec<(String, String)> {
    mono.iter()
        .map(|t| (t.as_ref().to_string(), t.as_ref().to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, tag: u32, prov: Provenance) -> ParallelDataset {
        let pairs = (0..n)
            .map(|i| SentencePair {
                source: vec![tag, i as u32 % 7 + 4],
                target: vec![i as u32 % 5 + 4],
                provenance: prov,
            })
            .collect();
        ParallelDataset::new(pairs, 100, 100).unwrap()
    }

    #[test]
    fn validation() {
        let bad = SentencePair {
            source: vec![],
            target: vec![1],
            provenance: Provenance::Real,
        };
        assert!(ParallelDataset::new(vec![bad], 10, 10).is_err());
        let oob = SentencePair {
            source: vec![12],
            target: vec![1],
            provenance: Provenance::Real,
        };
        assert!(matches!(
            ParallelDataset::new(vec![oob], 10, 10),
            Err(Error::TokenOutOfRange { id: 12, .. })
        ));
    }

    #[test]
    fn ratio_zero_is_identity() {
        let real = toy(10, 50, Provenance::Real);
        let syn = toy(100, 60, Provenance::Synthetic);
        assert_eq!(mix_backtranslation(&real, &syn, 0, MixOptions::default()).unwrap(), real);
        assert!(mix_backtranslation(&real, &syn, -1, MixOptions::default()).is_err());
    }

    #[test]
    fn exact_counts_on_the_sweep_grid() {
        let real = toy(100, 50, Provenance::Real);
        let syn = toy(2000, 60, Provenance::Real);
        for n in [0i64, 1, 2, 4, 8, 16] {
            let m = mix_backtranslation(&real, &syn, n, MixOptions::default()).unwrap();
            assert_eq!(m.len(), 100 * (1 + n as usize));
            assert_eq!(m.count(Provenance::Real), 100);
            assert_eq!(m.count(Provenance::Synthetic), 100 * n as usize);
        }
    }

    #[test]
    fn small_pool_truncates_unless_replacement() {
        let real = toy(10, 50, Provenance::Real);
        let syn = toy(15, 60, Provenance::Synthetic);
        let m = mix_backtranslation(&real, &syn, 4, MixOptions::default()).unwrap();
        assert_eq!(m.count(Provenance::Synthetic), 15);
        let opts = MixOptions {
            with_replacement: true,
            seed: 3,
        };
        let m = mix_backtranslation(&real, &syn, 4, opts).unwrap();
        assert_eq!(m.count(Provenance::Synthetic), 40);
    }

    #[test]
    fn mixing_is_seed_deterministic() {
        let real = toy(20, 50, Provenance::Real);
        let syn = toy(200, 60, Provenance::Synthetic);
        let opts = MixOptions {
            with_replacement: false,
            seed: 11,
        };
        let a = mix_backtranslation(&real, &syn, 2, opts).unwrap();
        let b = mix_backtranslation(&real, &syn, 2, opts).unwrap();
        assert_eq!(a, b);
    }
}
